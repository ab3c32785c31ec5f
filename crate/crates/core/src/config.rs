//! Run configuration: one JSON document describing a whole experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::active::LoopConfig;
use crate::design::DesignCatalog;
use crate::kinetics::{KineticParams, NoiseKind, NoiseModel, Observation, TimeGrid};
use crate::search::{BackgroundKnowledge, SearchConfig};
use crate::util::{derive_seed, short_hash};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Syntax(#[from] serde_json::Error),
    #[error("unsupported config version {found} (expected {CONFIG_VERSION})")]
    Version { found: u32 },
    #[error("{path}: {message}")]
    Field { path: String, message: String },
}

fn field(path: &str, message: impl ToString) -> ConfigError {
    ConfigError::Field {
        path: path.to_string(),
        message: message.to_string(),
    }
}

/// Measurement noise as configured; the stream seed is derived from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub sigma: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            kind: NoiseKind::None,
            sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Master seed for data noise and design draws. The fitter has its own seed in
    /// `search.fit.seed`.
    pub seed: u64,
    pub catalog: DesignCatalog,
    pub params: KineticParams,
    pub grid: TimeGrid,
    pub observation: Observation,
    pub noise: NoiseSpec,
    pub knowledge: BackgroundKnowledge,
    pub search: SearchConfig,
    #[serde(rename = "loop")]
    pub dbtl: LoopConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let catalog = DesignCatalog::default();
        RunConfig {
            version: CONFIG_VERSION,
            seed: 0,
            knowledge: BackgroundKnowledge::for_operon(catalog.n_genes()),
            catalog,
            params: KineticParams::default(),
            grid: TimeGrid::default(),
            observation: Observation { include_mrna: true },
            noise: NoiseSpec::default(),
            search: SearchConfig::default(),
            dbtl: LoopConfig::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every nested invariant, reporting the first offending field path.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.version != CONFIG_VERSION {
            return Err(ConfigError::Version { found: self.version });
        }
        self.params.validate().map_err(|e| field("params", e))?;
        self.grid.validate().map_err(|e| field("grid", e))?;
        if !(self.noise.sigma.is_finite() && self.noise.sigma >= 0.0) {
            return Err(field("noise.sigma", "must be finite and >= 0"));
        }
        if self.knowledge.n_genes != self.catalog.n_genes() {
            return Err(field(
                "knowledge.n_genes",
                format!("{} does not match catalog.n_genes = {}", self.knowledge.n_genes, self.catalog.n_genes()),
            ));
        }
        self.knowledge.validate().map_err(|e| field("knowledge", e))?;
        if self.search.bound == 0 {
            return Err(field("search.bound", "must be positive"));
        }
        if self.search.k == 0 {
            return Err(field("search.k", "must be positive"));
        }
        if !(self.search.lambda.is_finite() && self.search.lambda >= 0.0) {
            return Err(field("search.lambda", "must be finite and >= 0"));
        }
        self.search.fit.validate().map_err(|e| field("search.fit", e))?;
        self.dbtl.validate().map_err(|(path, msg)| field(&format!("loop.{path}"), msg))?;
        if self.dbtl.n0 > self.catalog.design_count() {
            return Err(field("loop.n0", "exceeds the number of designs in the catalog"));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(field("out_dir", "must not be empty"));
        }
        Ok(())
    }

    /// Short stable hash of the serialized configuration, ignoring `out_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        short_hash(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    pub fn noise_model(&self) -> NoiseModel {
        NoiseModel {
            kind: self.noise.kind,
            sigma: self.noise.sigma,
            seed: derive_seed(self.seed, "noise"),
        }
    }

    pub fn loop_seed(&self) -> u64 {
        derive_seed(self.seed, "loop")
    }
}
