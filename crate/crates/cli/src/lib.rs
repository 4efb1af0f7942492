//! Command-line front-end over the counterfactual engine and its service.
//!
//! One binary, `counterfact`, with a subcommand per pipeline stage. All
//! commands share the configuration loader and seed override, write a
//! resolved-config copy next to their outputs, and never write into their
//! input directories.

pub mod commands;
pub mod config;
mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{RunConfig, CONFIG_KEYS, RESOLVED_CONFIG_FILE};
pub use error::{CliError, Result};

/// Environment variable holding the log filter (e.g. `debug`, `counterfact_core=trace`).
pub const LOG_ENV: &str = "COUNTERFACT_LOG";

#[derive(Debug, Parser)]
#[command(
    name = "counterfact",
    version,
    about = "Counterfactual treatment-trajectory engine: simulate, train, evaluate, explain, serve",
    after_long_help = CONFIG_KEYS
)]
pub struct Cli {
    /// Run configuration (TOML, or JSON by extension).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Seed for every seeded config section (overrides the config).
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    /// Batched runs, one output subdirectory per seed.
    #[arg(long, global = true, value_delimiter = ',', value_name = "N1,N2,...")]
    pub seeds: Vec<u64>,

    /// Log errors only.
    #[arg(long, global = true)]
    pub quiet: bool,

    /// Log as JSON lines.
    #[arg(long, global = true)]
    pub json_logs: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a confounded tumor-growth cohort with ground truth.
    Simulate {
        /// Confounding strengths; one output subdirectory per value.
        #[arg(long, value_delimiter = ',', value_name = "G1,G2,...")]
        gammas: Vec<f64>,
    },
    /// Impute, split, normalize and train; writes a checkpoint and report.
    Train {
        /// Raw dataset directory (e.g. a `simulate` output).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Rolling-origin multi-horizon evaluation of one or more checkpoints.
    Evaluate {
        /// Checkpoint file; repeat for a seed-batched summary.
        #[arg(long = "checkpoint", value_name = "PATH")]
        checkpoints: Vec<PathBuf>,
        /// Raw dataset directory (e.g. `splits/test` of a `train` output).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Row labels, one per checkpoint.
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
    },
    /// Forecast one patient under the default plans, with attribution and explanation.
    Predict {
        /// Checkpoint file written by `train`.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Raw dataset directory holding the patient.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Patient id; the first record when omitted.
        #[arg(long)]
        patient: Option<String>,
        /// History steps to condition on; the whole record when omitted.
        #[arg(long)]
        origin: Option<usize>,
        /// Plan to attribute; the first default plan when omitted.
        #[arg(long)]
        plan: Option<String>,
    },
    /// Integrated-gradients attribution for one patient and plan.
    Attribute {
        /// Checkpoint file written by `train`.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Raw dataset directory holding the patient.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Patient id; the first record when omitted.
        #[arg(long)]
        patient: Option<String>,
        /// History steps to condition on; the whole record when omitted.
        #[arg(long)]
        origin: Option<usize>,
        /// Default-plan label (e.g. `Chemo`); the first default plan when omitted.
        #[arg(long)]
        plan: Option<String>,
    },
    /// Frozen-encoder reconstruction probe of an unbalanced and a balanced checkpoint.
    Probe {
        /// Checkpoint trained without balancing.
        #[arg(long, value_name = "PATH")]
        unbalanced: Option<PathBuf>,
        /// Checkpoint trained with balancing.
        #[arg(long, value_name = "PATH")]
        balanced: Option<PathBuf>,
        /// Directory holding `train/` and `val/` raw splits (a `train` output's `splits/`).
        /// Raw dataset directory holding the patient.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Write per-step encoder representations as CSV.
    ExportRepr {
        /// Checkpoint file written by `train`.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Raw dataset directory to encode.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Run the HTTP API; prints the bound address on stdout.
    Serve {
        /// Checkpoint to serve.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Directory of checkpoints listed by `GET /models`.
        #[arg(long, value_name = "DIR")]
        models_dir: Option<PathBuf>,
        /// Bind address.
        #[arg(long)]
        host: Option<String>,
        /// TCP port; 0 binds a free ephemeral port.
        #[arg(long)]
        port: Option<u16>,
        /// Allowed browser origins.
        #[arg(long, value_delimiter = ',')]
        cors: Vec<String>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Predict { .. } => "predict",
            Command::Attribute { .. } => "attribute",
            Command::Probe { .. } => "probe",
            Command::ExportRepr { .. } => "export-repr",
            Command::Serve { .. } => "serve",
        }
    }
}

/// Install the global log subscriber (stderr).
pub fn init_logging(quiet: bool, json: bool) {
    use tracing_subscriber::EnvFilter;
    let filter = if quiet {
        EnvFilter::new("error")
    } else {
        EnvFilter::try_from_env(LOG_ENV).unwrap_or_else(|_| EnvFilter::new("info"))
    };
    let builder = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr);
    // a subscriber may already be installed when embedded; keep the first one
    let _ = if json {
        builder.json().try_init()
    } else {
        builder.try_init()
    };
}

/// Execute a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p, cli.seed)?,
        None => RunConfig::default(),
    };
    cfg.run.command = Some(cli.command.name().into());
    commands::dispatch(cli, cfg)
}
