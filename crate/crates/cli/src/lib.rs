//! Command-line harness: dataset generation, induction, closed-loop runs and reports.

use std::fs::{self, OpenOptions};
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use operon_dbtl::config::RunConfig;
use thiserror::Error;

mod commands;
mod report;

pub use commands::{cmd_generate, cmd_induce, cmd_loop, parse_design_list, InduceOutput};
pub use report::cmd_report;

pub const LOCK_FILE: &str = ".operon-dbtl.lock";
pub const LOG_ENV: &str = "OPERON_DBTL_LOG";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

pub(crate) fn data_err(e: impl ToString) -> CliError {
    CliError::Data(e.to_string())
}

pub(crate) fn runtime_err(e: impl ToString) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "operon-dbtl", version, about = "Design-build-test-learn runs for a three-gene operon")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed; overrides `seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Random,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate designs and write per-design CSVs plus a manifest.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated design keys, e.g. `P0|g1,g2,g3|R0,R0,R0`.
        #[arg(long, conflicts_with = "all", required_unless_present = "all")]
        designs: Option<String>,
        /// Every design in the catalog.
        #[arg(long)]
        all: bool,
    },
    /// Enumerate, fit and rank structures against a generated dataset.
    Induce {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; defaults to the output directory.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the closed design-build-test-learn loop against the simulator.
    Loop {
        #[command(flatten)]
        common: Common,
        /// Continue from a `run_state.json` checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Propose designs at random instead of by committee disagreement.
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        /// Stop after this many rounds without marking the run finished.
        #[arg(long)]
        max_rounds: Option<usize>,
    },
    /// Summarize the artifacts in an output directory as markdown and CSV.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

/// Loads the config (or defaults) and applies the seed override. The returned
/// directory is where outputs go.
pub fn resolve(common: &Common) -> Result<(RunConfig, PathBuf), CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(|e| CliError::Config(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    Ok((cfg, out))
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutLock {
    path: PathBuf,
}

impl OutLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| runtime_err(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(OutLock { path }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(CliError::Runtime(format!(
                "{} is in use by another invocation (remove {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(runtime_err(format!("cannot lock {}: {e}", dir.display()))),
        }
    }
}

impl Drop for OutLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { common, designs, all } => {
            let (cfg, out) = resolve(&common)?;
            let _lock = OutLock::acquire(&out)?;
            let n = cmd_generate(&cfg, &out, designs.as_deref(), all)?;
            println!("wrote {n} designs to {}", out.display());
        }
        Command::Induce { common, data } => {
            let (_, out) = resolve(&common)?;
            let data = data.unwrap_or_else(|| out.clone());
            let _lock = OutLock::acquire(&out)?;
            let r = cmd_induce(common.config.as_deref(), common.seed, &data, &out)?;
            println!("rank 1 of {}: {}", r.report.structures_tried(), r.report.best().text());
        }
        Command::Loop {
            common,
            resume,
            baseline,
            max_rounds,
        } => {
            let out = match (&common.out, &resume) {
                (Some(o), _) => o.clone(),
                (None, Some(p)) => p.parent().map(Path::to_path_buf).unwrap_or_default(),
                (None, None) => resolve(&common)?.1,
            };
            let _lock = OutLock::acquire(&out)?;
            let state = cmd_loop(&common, &out, resume.as_deref(), baseline, max_rounds)?;
            println!(
                "{} experiments, top-1: {}",
                state.experiments(),
                state.top_structure().unwrap_or("none")
            );
        }
        Command::Report { common } => {
            let (_, out) = resolve(&common)?;
            let _lock = OutLock::acquire(&out)?;
            let path = cmd_report(&out)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
