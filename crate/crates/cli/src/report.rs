use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use operon_dbtl::active::{RunState, StopReason};
use operon_dbtl::config::RunConfig;
use operon_dbtl::io::{read_json, read_manifest, Manifest, MANIFEST_FILE};
use operon_dbtl::kinetics::ground_truth_structure;
use operon_dbtl::search::Hypothesis;

use crate::commands::{InduceOutput, LOOP_CONFIG_FILE, REPORT_FILE, STATE_FILE};
use crate::{data_err, runtime_err, CliError};

pub const REPORT_MD: &str = "report.md";
pub const LOSS_CSV: &str = "loss_by_round.csv";
pub const ACQUISITION_CSV: &str = "acquisition_by_round.csv";
pub const PARAMETERS_CSV: &str = "parameters.csv";

struct ParamRow {
    source: &'static str,
    slot: String,
    fitted: f64,
    generating: Option<f64>,
}

impl ParamRow {
    fn rel_error(&self) -> Option<f64> {
        self.generating.map(|g| (self.fitted - g).abs() / g.abs())
    }
}

fn param_rows(source: &'static str, h: &Hypothesis, generating: Option<&RunConfig>) -> Vec<ParamRow> {
    let truth = generating.map(|c| c.params.assignment());
    h.assignment
        .0
        .iter()
        .map(|(slot, &fitted)| ParamRow {
            source,
            slot: slot.clone(),
            fitted,
            generating: truth.as_ref().and_then(|t| t.get(slot)),
        })
        .collect()
}

fn write_param_table(md: &mut String, rows: &[ParamRow]) {
    let _ = writeln!(md, "| slot | fitted | generating | relative error |");
    let _ = writeln!(md, "|---|---|---|---|");
    for r in rows {
        let g = r.generating.map_or("n/a".to_string(), |v| format!("{v:.6e}"));
        let e = r.rel_error().map_or("n/a".to_string(), |v| format!("{v:.3e}"));
        let _ = writeln!(md, "| {} | {:.6e} | {g} | {e} |", r.slot, r.fitted);
    }
}

fn write_structure(md: &mut String, h: &Hypothesis) {
    let _ = writeln!(md, "```");
    for line in h.structure.render_multiline().lines() {
        let _ = writeln!(md, "{line}");
    }
    let _ = writeln!(md, "```");
}

fn is_ground_truth(text: &str, cfg: &RunConfig) -> bool {
    text == ground_truth_structure(cfg.catalog.n_genes()).render()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    csv::Writer::from_path(path).map_err(|e| runtime_err(format!("{}: {e}", path.display())))
}

fn finish(mut w: csv::Writer<fs::File>, path: &Path) -> Result<(), CliError> {
    w.flush().map_err(|e| runtime_err(format!("{}: {e}", path.display())))
}

fn load<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<Option<T>, CliError> {
    if path.exists() {
        read_json(path).map(Some).map_err(data_err)
    } else {
        Ok(None)
    }
}

/// Writes `report.md` and the plot CSVs for whatever artifacts `dir` holds.
pub fn cmd_report(dir: &Path) -> Result<PathBuf, CliError> {
    let manifest: Option<Manifest> = if dir.join(MANIFEST_FILE).exists() {
        Some(read_manifest(dir).map_err(data_err)?)
    } else {
        None
    };
    let search: Option<InduceOutput> = load(&dir.join(REPORT_FILE))?;
    let state_text = match fs::read_to_string(dir.join(STATE_FILE)) {
        Ok(t) => Some(t),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(data_err(format!("{}: {e}", dir.join(STATE_FILE).display()))),
    };
    let state = state_text
        .map(|t| RunState::from_json(&t))
        .transpose()
        .map_err(|e| data_err(format!("{}: {e}", dir.join(STATE_FILE).display())))?;
    let loop_cfg: Option<RunConfig> = load(&dir.join(LOOP_CONFIG_FILE))?;
    if manifest.is_none() && search.is_none() && state.is_none() {
        return Err(CliError::Data(format!(
            "{}: no artifacts to report; expected at least one of {MANIFEST_FILE}, {REPORT_FILE}, {STATE_FILE}",
            dir.display()
        )));
    }
    if state.is_some() && loop_cfg.is_none() {
        return Err(CliError::Data(format!("{}: {STATE_FILE} without {LOOP_CONFIG_FILE}", dir.display())));
    }

    let mut md = String::from("# operon-dbtl report\n");
    let mut params = Vec::new();

    if let Some(m) = &manifest {
        let _ = writeln!(md, "\n## Dataset\n");
        let _ = writeln!(md, "- config: {}", m.config_hash);
        let _ = writeln!(md, "- designs: {}", m.designs.len());
        let _ = writeln!(md, "- species: {}", m.species.join(", "));
        let _ = writeln!(md, "- noise: {:?}, sigma {}", m.config.noise.kind, m.config.noise.sigma);
        let g = &m.config.grid;
        let _ = writeln!(md, "- grid: {} points on [{}, {}]", g.points, g.start, g.end);
    }

    if let Some(s) = &search {
        let r = &s.report;
        let top = r.best();
        // parameters are only comparable when the data came from a known generator
        let generating = manifest.as_ref().map(|m| &m.config);
        let _ = writeln!(md, "\n## Induction\n");
        let _ = writeln!(md, "- config: {}", s.config_hash);
        let _ = writeln!(md, "- structures fitted: {}", r.structures_tried());
        let _ = writeln!(md, "- designs: {}, residuals: {}", r.n_designs, r.n_residuals);
        let _ = writeln!(md, "- recovered: {}", is_ground_truth(&top.text(), &s.config));
        let _ = writeln!(md, "\n| rank | score | loss | complexity |\n|---|---|---|---|");
        for (i, h) in r.ranked.iter().enumerate() {
            let _ = writeln!(md, "| {} | {:.6e} | {:.6e} | {} |", i + 1, h.score, h.loss, h.complexity);
        }
        let _ = writeln!(md, "\nTop-1 structure:\n");
        write_structure(&mut md, top);
        let rows = param_rows("induce", top, generating);
        md.push('\n');
        write_param_table(&mut md, &rows);
        params.extend(rows);
    }

    if let (Some(st), Some(cfg)) = (&state, &loop_cfg) {
        let _ = writeln!(md, "\n## Loop\n");
        let _ = writeln!(md, "- config: {}", st.config_hash);
        let _ = writeln!(md, "- acquisition: {:?}", st.acquisition);
        let _ = writeln!(md, "- experiments: {} ({} seed, {} rounds)", st.experiments(), st.seed_designs.len(), st.round());
        let stopped = match st.stopped {
            Some(StopReason::Converged) => "converged",
            Some(StopReason::BudgetExhausted) => "budget exhausted",
            Some(StopReason::PoolExhausted) => "pool exhausted",
            None => "not finished",
        };
        let _ = writeln!(md, "- stopped: {stopped}");
        let recovered = st.top_structure().is_some_and(|t| is_ground_truth(t, cfg));
        let _ = writeln!(md, "- recovered: {recovered}");

        let path = dir.join(LOSS_CSV);
        let mut w = csv_writer(&path)?;
        let rec = |e: csv::Error| runtime_err(format!("{}: {e}", path.display()));
        w.write_record(["round", "n_designs", "top_loss"]).map_err(rec)?;
        for (i, ind) in st.inductions.iter().enumerate() {
            w.write_record([i.to_string(), ind.n_designs.to_string(), ind.top_loss.to_string()])
                .map_err(rec)?;
        }
        finish(w, &path)?;

        let path = dir.join(ACQUISITION_CSV);
        let mut w = csv_writer(&path)?;
        let rec = |e: csv::Error| runtime_err(format!("{}: {e}", path.display()));
        w.write_record(["round", "design", "acquisition"]).map_err(rec)?;
        for r in &st.history {
            w.write_record([r.round.to_string(), r.design.clone(), r.acquisition.to_string()])
                .map_err(rec)?;
        }
        finish(w, &path)?;

        let _ = writeln!(md, "\n| round | design | acquisition | top-1 loss |\n|---|---|---|---|");
        for r in &st.history {
            let design = r.design.replace('|', "\\|");
            let _ = writeln!(md, "| {} | `{design}` | {:.4e} | {:.4e} |", r.round, r.acquisition, r.top_loss);
        }
        if let Some(c) = &st.committee {
            let _ = writeln!(md, "\nFinal top-1 structure:\n");
            write_structure(&mut md, c.top());
            let rows = param_rows("loop", c.top(), Some(cfg));
            md.push('\n');
            write_param_table(&mut md, &rows);
            params.extend(rows);
        }
        let _ = writeln!(md, "\nPlot data: `{LOSS_CSV}`, `{ACQUISITION_CSV}`.");
    }

    if !params.is_empty() {
        let path = dir.join(PARAMETERS_CSV);
        let mut w = csv_writer(&path)?;
        let rec = |e: csv::Error| runtime_err(format!("{}: {e}", path.display()));
        w.write_record(["source", "slot", "fitted", "generating", "rel_error"]).map_err(rec)?;
        for p in &params {
            let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
            w.write_record([
                p.source.to_string(),
                p.slot.clone(),
                p.fitted.to_string(),
                opt(p.generating),
                opt(p.rel_error()),
            ])
            .map_err(rec)?;
        }
        finish(w, &path)?;
    }

    let out = dir.join(REPORT_MD);
    fs::write(&out, md).map_err(|e| runtime_err(format!("{}: {e}", out.display())))?;
    Ok(out)
}
