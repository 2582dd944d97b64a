//! The `dcr` command-line tool: dataset generation, training, evaluation,
//! verification sweeps and plot data.
//!
//! Exit codes: 0 success, 2 invalid input (bad flags, config, paths or
//! files), 3 runtime failure (divergence, I/O, locked directory), 4 a
//! verification sweep found violations.

pub mod commands;
pub mod config;
pub mod plot;
pub mod rundir;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "dcr", version, about = "Diffusion contrastive reconstruction experiments")]
pub struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Overrides `out`: parent of run directories, or where reports go.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic dataset as IDX files plus a manifest into `--out`.
    GenData,
    /// Train and write checkpoints and a run log into a fresh run directory.
    Train {
        #[arg(long, value_enum)]
        mode: Mode,
    },
    /// Clustering, scatter and reconstruction-probe metrics on the held-out split.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Variance-identity, scatter-transfer and loss-sandwich sweeps.
    Verify {
        /// Model to check; a freshly initialized one when absent.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Loss and gradient-cosine series from a run log, plus an SVG chart.
    Plot {
        #[arg(long, value_name = "PATH")]
        runlog: PathBuf,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Denoiser pretraining, projector alignment, encoder enhancement.
    Dcr,
    /// Joint contrastive plus reconstruction loss with conflict logging.
    Naive,
    /// Contrastive-reconstruction loss on encoder and projector together.
    EndToEnd,
}

/// A command failure, classified for the exit code.
#[derive(Debug)]
pub enum Failure {
    Invalid(String),
    Runtime(String),
    Violations(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 2,
            Failure::Runtime(_) => 3,
            Failure::Violations(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Invalid(m) | Failure::Runtime(m) | Failure::Violations(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

impl From<dcr_core::Error> for Failure {
    fn from(e: dcr_core::Error) -> Self {
        use dcr_core::Error as E;
        match e {
            E::InvalidArgument(_) | E::Shape { .. } | E::BadMagic { .. } | E::Truncated { .. } | E::Checkpoint(_) | E::RunLog { .. } => {
                Failure::Invalid(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

pub fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Invalid(msg.into())
}

pub fn runtime(msg: impl Into<String>) -> Failure {
    Failure::Runtime(msg.into())
}

/// Resolves the configuration: file (or defaults), then flag overrides.
pub fn effective_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = effective_config(&cli)?;
    match &cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Train { mode } => commands::train(&cfg, *mode).map(|dir| println!("{}", dir.display())),
        Command::Eval { checkpoint } => commands::eval(&cfg, checkpoint, cli.out.as_deref()).map(|_| ()),
        Command::Verify { checkpoint } => commands::verify(&cfg, checkpoint.as_deref(), cli.out.as_deref()),
        Command::Plot { runlog } => commands::plot(runlog, cli.out.as_deref()),
        Command::ShowConfig => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

/// Parses arguments, runs, and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
