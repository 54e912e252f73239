//! Command-line front end.
//!
//! Exit codes: 0 success, 2 calibration abstained (or an abstained artifact
//! was given to `predict`), 3 the base model already covers the attribution
//! target, 1 anything else.

pub mod artifacts;
mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::attribution::AttributionError;
use crate::calibration::CalibrationError;
use crate::data::DataError;
use crate::evaluators::ValueError;
use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_ABSTAINED: i32 = 2;
pub const EXIT_BASE_COVERS: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("artifact: {0}")]
    Artifact(String),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Value(#[from] ValueError),
    #[error("calibration abstained: {0}")]
    Abstained(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Abstained(_) => EXIT_ABSTAINED,
            CliError::Attribution(AttributionError::BaseModelCovers { .. }) => EXIT_BASE_COVERS,
            _ => EXIT_ERROR,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "corap",
    version,
    about = "Risk-controlled reasoning-answer prediction sets and certified attribution"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every command. Set flags override the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML/JSON config, or any artifact whose config echo should be reused.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// sim:perfect | sim:hopeless | sim:<profile file> | remote:<url>
    #[arg(long, global = true)]
    pub backend: Option<String>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    #[arg(long, global = true)]
    pub kmax: Option<usize>,
    /// Product grid `l1,l1,../l2,../l3,..`; values accept `inf`.
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub grid: Option<String>,
    /// Monte Carlo permutations for attribution.
    #[arg(long, global = true)]
    pub permutations: Option<usize>,
    #[arg(long, global = true)]
    pub delta: Option<f64>,
    /// Number of warm-start groups.
    #[arg(long, global = true)]
    pub groups: Option<usize>,
    /// Warm-start permutations.
    #[arg(long, global = true)]
    pub warmstart: Option<usize>,
    #[arg(long, global = true)]
    pub xi: Option<f64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LevelArg {
    Examples,
    Steps,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Calibrate thresholds on a calibration set; optionally evaluate a test set.
    Calibrate {
        #[arg(long)]
        cal: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Build prediction sets with a calibrated threshold tuple.
    Predict {
        #[arg(long)]
        calibration: PathBuf,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Repeated calibration on a simulated profile with exact true risk.
    Simulate {
        /// Pool to draw each trial's calibration subset from (default: synthetic examples).
        #[arg(long)]
        cal: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        n_cal: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Certified attribution of a target's coverage to training examples or steps.
    Explain {
        #[arg(long, value_enum)]
        level: LevelArg,
        #[arg(long)]
        training: Option<PathBuf>,
        #[arg(long)]
        cal: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        target_id: Option<String>,
        /// Calibration artifact whose config seeds this run.
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Example-level report; required for `--level steps`.
        #[arg(long)]
        examples_report: Option<PathBuf>,
        /// Toy scorer parameters (TOML/JSON).
        #[arg(long)]
        scorer: Option<PathBuf>,
    },
    /// Tables behind loss/size-vs-alpha plots and attribution rankings.
    Report {
        #[arg(required = true)]
        artifacts: Vec<PathBuf>,
    },
    /// Write a planted toy universe (training, calibration, target).
    Planted {
        #[arg(long, default_value_t = 8)]
        examples: usize,
        #[arg(long, default_value_t = 4)]
        steps: usize,
        #[arg(long, default_value_t = 3)]
        pivotal_example: usize,
        #[arg(long, default_value_t = 2)]
        pivotal_step: usize,
        #[arg(long, default_value_t = 20)]
        n_cal: usize,
    },
}

impl GlobalArgs {
    /// Overlays the set flags onto `cfg`.
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<(), CliError> {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.backend {
            cfg.backend = v.clone();
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.epsilon {
            cfg.epsilon = v;
        }
        if let Some(v) = self.kmax {
            cfg.k_max = v;
        }
        if let Some(v) = &self.grid {
            cfg.grid = config::parse_grid(v)?;
        }
        if let Some(v) = self.permutations {
            cfg.permutations = v;
        }
        if let Some(v) = self.delta {
            cfg.delta = v;
        }
        if let Some(v) = self.groups {
            cfg.groups = Some(v);
        }
        if let Some(v) = self.warmstart {
            cfg.warmstart = v;
        }
        if let Some(v) = self.xi {
            cfg.xi = v;
        }
        Ok(())
    }

    /// Config file (or `fallback` artifact) overlaid with flags.
    pub fn resolve(&self, fallback: Option<&Path>) -> Result<RunConfig, CliError> {
        let mut cfg = match self.config.as_deref().or(fallback) {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        self.apply(&mut cfg)?;
        Ok(cfg)
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.global.jobs {
        Some(n) => match rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
        {
            Ok(pool) => pool.install(|| commands::dispatch(&cli)),
            Err(e) => Err(CliError::Other(format!("thread pool: {e}"))),
        },
        None => commands::dispatch(&cli),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
