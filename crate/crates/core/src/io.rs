//! On-disk formats: per-design CSV trajectories with a JSON manifest, and loop history.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::active::{Outcome, RunState};
use crate::config::RunConfig;
use crate::design::decode_design;
use crate::kinetics::{Dataset, Trajectory};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub key: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub config: RunConfig,
    pub species: Vec<String>,
    pub designs: Vec<ManifestEntry>,
}

/// File name for a design's CSV: `P0|g2,g1,g3|R0,R1,R2` becomes `P0_g2-g1-g3_R0-R1-R2.csv`.
pub fn design_file_name(key: &str) -> String {
    format!("{}.csv", key.replace('|', "_").replace(',', "-"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| DataError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| DataError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<(), DataError> {
    let csv_err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["t".to_string()];
    header.extend(traj.species.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (t, row) in traj.times.iter().zip(&traj.values) {
        let mut rec = vec![t.to_string()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

fn parse_num(path: &Path, line: usize, text: &str) -> Result<f64, DataError> {
    text.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| format_err(path, format!("line {line}: `{text}` is not a finite number")))
}

/// Reads one design CSV; the design itself comes from the manifest.
pub fn read_trajectory_csv(path: &Path, design: crate::design::DesignGenome) -> Result<Trajectory, DataError> {
    let csv_err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("t") || header.len() < 2 {
        return Err(format_err(path, "header must be `t` followed by species names"));
    }
    let species = header[1..].to_vec();
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = i + 2;
        if rec.len() != header.len() {
            return Err(format_err(path, format!("line {line}: expected {} fields", header.len())));
        }
        times.push(parse_num(path, line, &rec[0])?);
        values.push(
            rec.iter()
                .skip(1)
                .map(|f| parse_num(path, line, f))
                .collect::<Result<Vec<_>, _>>()?,
        );
    }
    if times.is_empty() {
        return Err(format_err(path, "no data rows"));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(format_err(path, "times must be strictly increasing"));
    }
    Ok(Trajectory {
        design,
        times,
        species,
        values,
    })
}

/// Writes one CSV per design plus the manifest into `dir` (created if missing).
pub fn write_dataset(dir: &Path, dataset: &Dataset, config: &RunConfig) -> Result<Manifest, DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut designs = Vec::with_capacity(dataset.len());
    for traj in dataset.iter() {
        let file = design_file_name(&traj.key());
        write_trajectory_csv(&dir.join(&file), traj)?;
        designs.push(ManifestEntry { key: traj.key(), file });
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        config_hash: config.hash(),
        config: config.clone(),
        species: dataset.observed_species(),
        designs,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, DataError> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(format_err(&path, "no dataset manifest"));
    }
    let m: Manifest = read_json(&path)?;
    if m.format_version != MANIFEST_VERSION {
        return Err(format_err(&path, format!("unsupported manifest version {}", m.format_version)));
    }
    Ok(m)
}

/// Loads the dataset described by `dir/manifest.json`.
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Dataset), DataError> {
    let manifest = read_manifest(dir)?;
    let mpath = dir.join(MANIFEST_FILE);
    if manifest.designs.is_empty() {
        return Err(format_err(&mpath, "manifest lists no designs"));
    }
    let catalog = manifest.config.catalog.clone();
    let mut ds = Dataset::new(catalog.clone());
    for e in &manifest.designs {
        let design = decode_design(&e.key, &catalog).map_err(|err| format_err(&mpath, err.to_string()))?;
        let path = dir.join(&e.file);
        let traj = read_trajectory_csv(&path, design)?;
        if traj.species != manifest.species {
            return Err(format_err(&path, "species columns differ from the manifest"));
        }
        ds.insert(traj);
    }
    Ok((manifest, ds))
}

fn outcome_text(o: Outcome) -> &'static str {
    match o {
        Outcome::Tested => "tested",
        Outcome::Failed => "failed",
    }
}

/// Loop history as CSV: one row per round after the seed set.
pub fn write_history_csv(path: &Path, state: &RunState) -> Result<(), DataError> {
    let csv_err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["round", "design", "acquisition", "outcome", "top_loss", "structure"])
        .map_err(csv_err)?;
    for r in &state.history {
        w.write_record([
            r.round.to_string(),
            r.design.clone(),
            r.acquisition.to_string(),
            outcome_text(r.outcome).to_string(),
            r.top_loss.to_string(),
            r.top_structure.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{decode_design, DesignCatalog};
    use crate::kinetics::{generate_dataset, KineticParams, NoiseModel, Observation, TimeGrid};

    #[test]
    fn file_names_are_flat() {
        assert_eq!(design_file_name("P1|g3,g1,g2|R0,R2,R1"), "P1_g3-g1-g2_R0-R2-R1.csv");
    }

    #[test]
    fn dataset_round_trips_exactly() {
        let cat = DesignCatalog::default();
        let designs = vec![
            decode_design("P0|g1,g2,g3|R0,R0,R0", &cat).unwrap(),
            decode_design("P1|g3,g2,g1|R2,R1,R0", &cat).unwrap(),
        ];
        let ds = generate_dataset(
            &designs,
            &KineticParams::default(),
            &TimeGrid::default(),
            &NoiseModel::gaussian(0.05, 3),
            &cat,
            &Observation { include_mrna: true },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        write_dataset(dir.path(), &ds, &cfg).unwrap();
        let (m, back) = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(m.config_hash, cfg.hash());
        assert_eq!(m.designs.len(), 2);
    }

    #[test]
    fn malformed_csv_is_reported_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        fs::write(&p, "t,p_g1\n0,1\n0.5,abc\n").unwrap();
        let d = decode_design("P0|g1,g2,g3|R0,R0,R0", &DesignCatalog::default()).unwrap();
        let err = read_trajectory_csv(&p, d).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn missing_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_dataset(dir.path()).is_err());
    }
}
