use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use operon_dbtl::active::{Acquisition, Assay, Dbtl, RunState, SimulatorOracle};
use operon_dbtl::config::RunConfig;
use operon_dbtl::design::{decode_design, enumerate_designs, DesignCatalog, DesignGenome};
use operon_dbtl::io::{read_dataset, read_json, write_dataset, write_history_csv, write_json};
use operon_dbtl::kinetics::{generate_dataset, IntegratorControl};
use operon_dbtl::search::{induce, SearchReport};
use serde::{Deserialize, Serialize};

use crate::{data_err, resolve, runtime_err, Baseline, CliError, Common};

pub const REPORT_FILE: &str = "search_report.json";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const TIMING_FILE: &str = "search_timing.json";
pub const STATE_FILE: &str = "run_state.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const LOOP_CONFIG_FILE: &str = "loop_config.json";

/// Splits `key,key,...` where each key itself contains commas: a new key starts at
/// every field of the form `P<n>|...`.
pub fn parse_design_list(text: &str, catalog: &DesignCatalog) -> Result<Vec<DesignGenome>, CliError> {
    let mut keys: Vec<String> = Vec::new();
    for field in text.split(',').map(str::trim).filter(|f| !f.is_empty()) {
        match keys.last_mut() {
            Some(k) if !(field.starts_with('P') && field.contains('|')) => {
                k.push(',');
                k.push_str(field);
            }
            _ => keys.push(field.to_string()),
        }
    }
    if keys.is_empty() {
        return Err(CliError::Config("--designs: no design keys given".into()));
    }
    keys.iter()
        .map(|k| decode_design(k, catalog).map_err(|e| CliError::Config(format!("--designs: {e}"))))
        .collect()
}

/// Writes the dataset for the selected designs; returns the number written.
pub fn cmd_generate(cfg: &RunConfig, out: &Path, designs: Option<&str>, all: bool) -> Result<usize, CliError> {
    let designs = match designs {
        Some(list) if !all => parse_design_list(list, &cfg.catalog)?,
        _ => enumerate_designs(&cfg.catalog),
    };
    let ds = generate_dataset(
        &designs,
        &cfg.params,
        &cfg.grid,
        &cfg.noise_model(),
        &cfg.catalog,
        &cfg.observation,
    )
    .map_err(runtime_err)?;
    write_dataset(out, &ds, cfg).map_err(runtime_err)?;
    Ok(ds.len())
}

/// Everything `induce` persists in its report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InduceOutput {
    pub config_hash: String,
    pub config: RunConfig,
    pub dataset_hash: String,
    pub report: SearchReport,
}

#[derive(Serialize)]
struct Timing {
    seconds: f64,
    structures: usize,
}

/// Fields of the generating config that must agree with the one used to induce.
fn data_fields(c: &RunConfig) -> Vec<(&'static str, String)> {
    let j = |v: serde_json::Result<String>| v.expect("config serializes");
    vec![
        ("catalog", j(serde_json::to_string(&c.catalog))),
        ("params", j(serde_json::to_string(&c.params))),
        ("grid", j(serde_json::to_string(&c.grid))),
        ("observation", j(serde_json::to_string(&c.observation))),
        ("noise", j(serde_json::to_string(&c.noise))),
    ]
}

fn mismatch(generated: &RunConfig, given: &RunConfig) -> Vec<String> {
    data_fields(generated)
        .into_iter()
        .zip(data_fields(given))
        .filter(|(a, b)| a.1 != b.1)
        .map(|(a, b)| format!("  {}: dataset {} vs config {}", a.0, a.1, b.1))
        .collect()
}

fn summary_text(out: &InduceOutput) -> String {
    let r = &out.report;
    let mut s = String::new();
    let _ = writeln!(s, "config {}  dataset {}", out.config_hash, out.dataset_hash);
    let _ = writeln!(
        s,
        "{} designs, {} residuals, {} structures fitted",
        r.n_designs,
        r.n_residuals,
        r.structures_tried()
    );
    if r.above_recovery_threshold {
        let _ = writeln!(s, "note: top-1 loss is above the exact-fit threshold");
    }
    for (i, h) in r.ranked.iter().enumerate() {
        let _ = writeln!(
            s,
            "\nrank {}  score {:.6e}  loss {:.6e}  complexity {}",
            i + 1,
            h.score,
            h.loss,
            h.complexity
        );
        for line in h.structure.render_multiline().lines() {
            let _ = writeln!(s, "  {line}");
        }
        let params: Vec<String> = h.assignment.0.iter().map(|(k, v)| format!("{k} = {v:.6e}")).collect();
        let _ = writeln!(s, "  params: {}", params.join(", "));
    }
    s
}

pub fn cmd_induce(
    config: Option<&Path>,
    seed: Option<u64>,
    data: &Path,
    out: &Path,
) -> Result<InduceOutput, CliError> {
    let (manifest, ds) = read_dataset(data).map_err(data_err)?;
    let mut cfg = match config {
        Some(p) => {
            let given = RunConfig::load(p).map_err(|e| CliError::Config(e.to_string()))?;
            let diff = mismatch(&manifest.config, &given);
            if !diff.is_empty() {
                return Err(CliError::Config(format!(
                    "config does not match the dataset manifest:\n{}",
                    diff.join("\n")
                )));
            }
            given
        }
        None => manifest.config.clone(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if ds.is_empty() {
        return Err(CliError::Data(format!("{}: dataset has no designs", data.display())));
    }
    let t = Instant::now();
    let report = induce(&ds, &cfg.knowledge, &cfg.search).map_err(runtime_err)?;
    let elapsed = t.elapsed().as_secs_f64();
    let output = InduceOutput {
        config_hash: cfg.hash(),
        dataset_hash: manifest.config_hash.clone(),
        config: cfg,
        report,
    };
    fs::create_dir_all(out).map_err(runtime_err)?;
    write_json(&out.join(REPORT_FILE), &output).map_err(runtime_err)?;
    fs::write(out.join(SUMMARY_FILE), summary_text(&output)).map_err(runtime_err)?;
    let timing = Timing {
        seconds: elapsed,
        structures: output.report.structures_tried(),
    };
    write_json(&out.join(TIMING_FILE), &timing).map_err(runtime_err)?;
    Ok(output)
}

fn write_atomic(path: &Path, text: &str) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(runtime_err)?;
    fs::rename(&tmp, path).map_err(runtime_err)
}

fn checkpoint(out: &Path, state: &RunState) -> Result<(), CliError> {
    write_atomic(&out.join(STATE_FILE), &(state.to_json() + "\n"))?;
    write_history_csv(&out.join(HISTORY_FILE), state).map_err(runtime_err)
}

fn loop_config(common: &Common, resume: Option<&Path>) -> Result<RunConfig, CliError> {
    let beside = resume.map(|p| p.with_file_name(LOOP_CONFIG_FILE));
    match (&common.config, beside) {
        (None, Some(path)) if path.exists() => {
            let mut cfg: RunConfig = read_json(&path).map_err(data_err)?;
            cfg.validate().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            Ok(cfg)
        }
        _ => resolve(common).map(|(c, _)| c),
    }
}

pub fn cmd_loop(
    common: &Common,
    out: &Path,
    resume: Option<&Path>,
    baseline: Option<Baseline>,
    max_rounds: Option<usize>,
) -> Result<RunState, CliError> {
    let mut cfg = loop_config(common, resume)?;
    if baseline == Some(Baseline::Random) {
        cfg.dbtl.acquisition = Acquisition::Random;
    }
    let times = cfg.grid.times();
    let oracle = SimulatorOracle {
        params: cfg.params.clone(),
        catalog: cfg.catalog.clone(),
        times: times.clone(),
        noise: cfg.noise_model(),
        observation: cfg.observation.clone(),
        control: IntegratorControl::default(),
    };
    let dbtl = Dbtl {
        assay: Assay {
            catalog: cfg.catalog.clone(),
            times,
            observed: cfg.observation.species(cfg.catalog.n_genes()),
            control: IntegratorControl::default(),
        },
        knowledge: &cfg.knowledge,
        search: &cfg.search,
        config: &cfg.dbtl,
        oracle: &oracle,
        seed: cfg.loop_seed(),
        config_hash: cfg.hash(),
    };
    fs::create_dir_all(out).map_err(runtime_err)?;
    let mut state = match resume {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
            let state = RunState::from_json(&text).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
            if state.config_hash != dbtl.config_hash {
                return Err(CliError::Config(format!(
                    "checkpoint was written under config {} but the current config is {}",
                    state.config_hash, dbtl.config_hash
                )));
            }
            state
        }
        None => dbtl.start().map_err(runtime_err)?,
    };
    write_json(&out.join(LOOP_CONFIG_FILE), &cfg).map_err(runtime_err)?;
    checkpoint(out, &state)?;
    let mut failure = None;
    dbtl.run(&mut state, max_rounds, |s| {
        if failure.is_none() {
            failure = checkpoint(out, s).err();
        }
    })
    .map_err(runtime_err)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(state),
    }
}
