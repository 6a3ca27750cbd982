//! Experiment driver: configuration, data files and orchestration around `ddnpc-core`.

pub mod commands;
pub mod config;
pub mod io;
pub mod registry;

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_ASSUMPTION: u8 = 3;
pub const EXIT_SOLVER: u8 = 4;

/// Error carrying the process exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(msg: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: msg.into() }
    }

    pub fn assumption(msg: impl Into<String>) -> Self {
        Self { code: EXIT_ASSUMPTION, message: msg.into() }
    }

    pub fn solver(msg: impl Into<String>) -> Self {
        Self { code: EXIT_SOLVER, message: msg.into() }
    }

    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        Self::config(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

impl From<ddnpc_core::Error> for Failure {
    fn from(e: ddnpc_core::Error) -> Self {
        use ddnpc_core::Error as E;
        let code = match &e {
            E::NonConvergence { .. } | E::Callback(_) => EXIT_SOLVER,
            E::InvalidConfig(_)
            | E::MissingCertificate(_)
            | E::DimensionMismatch(_)
            | E::StructureMismatch(_)
            | E::InvalidSequence(_)
            | E::DepthExceedsLength { .. }
            | E::WindowOutOfRange { .. }
            | E::InsufficientSamples { .. }
            | E::DictionaryLacksInput => EXIT_CONFIG,
            _ => EXIT_ASSUMPTION,
        };
        Self { code, message: e.to_string() }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ddnpc", version, about = "Data-driven nonlinear predictive control experiments")]
pub struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory receiving every output file.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Turn assumption warnings (box, persistency of excitation, held inputs) into failures.
    #[arg(long, global = true)]
    pub strict: bool,
    /// Replace the root seed of the configuration.
    #[arg(long, global = true)]
    pub seed_override: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record offline data and estimate the approximation certificate.
    Collect,
    /// Rank test of the basis-function Hankel matrix of a data file.
    CheckPe {
        /// Data CSV; defaults to the configured data file.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Excitation order; defaults to horizon + d_max + n.
        #[arg(long)]
        order: Option<usize>,
    },
    /// Data-driven simulation of a window of the offline data.
    Simulate,
    /// Data-driven output matching of a window of the offline data.
    MatchOutput,
    /// Receding-horizon closed loop.
    NpcRun,
    /// Collect and run over a grid of noise levels, dictionary perturbations and seeds.
    Sweep,
}

pub fn run(cli: &Cli) -> Result<(), Failure> {
    let path = cli.config.as_ref().ok_or_else(|| Failure::config("--config is required"))?;
    let mut cfg = config::ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed_override {
        cfg.seed = s;
    }
    std::fs::create_dir_all(&cli.out_dir).map_err(|e| Failure::io(&cli.out_dir, e))?;
    let ctx = commands::Context { out_dir: cli.out_dir.clone(), strict: cli.strict, config_path: path.clone() };
    match &cli.command {
        Command::Collect => commands::collect(&cfg, &ctx).map(|_| ()),
        Command::CheckPe { data, order } => commands::check_pe(&cfg, &ctx, data.as_deref(), *order),
        Command::Simulate => commands::simulate(&cfg, &ctx),
        Command::MatchOutput => commands::match_output(&cfg, &ctx),
        Command::NpcRun => commands::npc_run(&cfg, &ctx).map(|_| ()),
        Command::Sweep => commands::sweep(&cfg, &ctx),
    }
}
