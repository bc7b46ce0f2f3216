//! `qtdog`: config-driven experiment runner.
//!
//! Exit codes: 0 success, 2 config error, 3 divergence-only failure, 4 I/O
//! error, 1 anything else.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{Ctx, Outcome};
use config::ModeSetting;
use qtdog::Execution;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Io(_) => 4,
            CliError::Internal(_) => 1,
        }
    }

    pub fn from_core(e: qtdog::Error) -> Self {
        use qtdog::Error as E;
        match e {
            E::Io(_) | E::IngestFile(_) => CliError::Io(e.to_string()),
            E::Contract(_) | E::Dimension { .. } | E::Ingest { .. } => CliError::Config(e.to_string()),
            E::Diverged { .. } => CliError::Diverged(e.to_string()),
            E::NumericDomain { .. } | E::NonFinite { .. } | E::Serde(_) => CliError::Internal(e.to_string()),
        }
    }

    /// Dataset construction: bad generator parameters are config errors.
    pub fn from_data(e: qtdog::Error) -> Self {
        match e {
            qtdog::Error::NumericDomain { .. } => CliError::Config(e.to_string()),
            other => Self::from_core(other),
        }
    }
}

#[derive(Parser)]
#[command(name = "qtdog", version, about = "Quantization-aware training experiments on multi-domain toy data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum concurrent jobs; 1 runs everything sequentially.
    #[arg(long)]
    jobs: Option<usize>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace existing outputs of this command.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train on every held-out domain and summarize.
    Run(Common),
    /// ERM baseline plus one multi-seed run per bit width.
    SweepBits {
        #[command(flatten)]
        common: Common,
        /// Comma-separated bit widths; defaults to the config's sweep block.
        #[arg(long, value_delimiter = ',')]
        bits: Option<Vec<u32>>,
    },
    /// Flatness profiles and curvature of saved checkpoints.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Train an ensemble of quantized models per held-out domain.
    Ensemble(Common),
    /// Round-to-nearest quantization of full-precision models. Trains them
    /// first unless checkpoints are given.
    Ptq {
        #[command(flatten)]
        common: Common,
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
}

fn context(c: &Common) -> Result<Ctx, CliError> {
    let cfg = config::load(&c.config)?;
    let exec = match c.jobs {
        Some(0) => return Err(CliError::Config("--jobs must be ≥ 1".into())),
        Some(1) => Execution::Sequential,
        Some(n) => {
            set_threads(n);
            Execution::Parallel
        }
        None => Execution::Parallel,
    };
    Ok(Ctx {
        seed: c.seed.unwrap_or(cfg.seed),
        seed_override: c.seed.is_some(),
        exec,
        out: c.out.clone().unwrap_or_else(|| cfg.output_dir.clone()),
        force: c.force,
        cfg,
    })
}

#[cfg(feature = "parallel")]
fn set_threads(n: usize) {
    // Fails only if a global pool already exists, which keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}

#[cfg(not(feature = "parallel"))]
fn set_threads(_: usize) {}

fn dispatch(cmd: &Command) -> Result<Outcome, CliError> {
    match cmd {
        Command::Run(c) => {
            let ctx = context(c)?;
            let mode = ctx.cfg.quant.mode;
            commands::run(&ctx, "run", mode)
        }
        Command::SweepBits { common, bits } => commands::sweep(&context(common)?, bits.clone()),
        Command::Analyze { common, checkpoints } => commands::analyze(&context(common)?, checkpoints),
        Command::Ensemble(c) => commands::ensemble(&context(c)?),
        Command::Ptq { common, checkpoints } => {
            let ctx = context(common)?;
            if checkpoints.is_empty() {
                commands::run(&ctx, "ptq", ModeSetting::PtqRtn)
            } else {
                commands::ptq_checkpoints(&ctx, checkpoints)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Diverged) => {
            eprintln!("qtdog: at least one run diverged; outputs were written");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("qtdog: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
