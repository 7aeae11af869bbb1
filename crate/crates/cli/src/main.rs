use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fwplab::FwpError;

mod commands;
mod config;
mod output;

/// Fast weight programmer experiments.
#[derive(Debug, Parser)]
#[command(name = "fwplab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check that paired forms of the same computation agree.
    Equiv(Common),
    /// Compare analytic gradients with central differences.
    Gradcheck(Common),
    /// Verify the hand-built constructions (`gd` or `parity`).
    Construct {
        /// Overrides the config's `construction`.
        which: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a block stack on a generated task.
    Train(Common),
    /// Time the recurrent, chunk-wise and quadratic forms.
    Bench(Common),
    /// Dump a generated dataset as JSON lines.
    Datagen(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "fwplab-out")]
    out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
    Threshold(String),
    Io(anyhow::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Threshold(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Threshold(m) => write!(f, "threshold failure: {m}"),
            CliError::Io(e) => write!(f, "io error: {e:#}"),
        }
    }
}

impl From<FwpError> for CliError {
    fn from(e: FwpError) -> Self {
        match e {
            FwpError::Numeric { .. } | FwpError::Divergence { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.into())
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("FWPLAB_THREADS") else { return Ok(()) };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("FWPLAB_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Io(e.into()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Equiv(c) => commands::equiv(&c.into()),
        Command::Gradcheck(c) => commands::gradcheck(&c.into()),
        Command::Construct { which, common } => commands::construct(&common.into(), which.as_deref()),
        Command::Train(c) => commands::train(&c.into()),
        Command::Bench(c) => commands::bench(&c.into()),
        Command::Datagen(c) => commands::datagen(&c.into()),
    }
}

impl From<Common> for commands::Invocation {
    fn from(c: Common) -> Self {
        commands::Invocation {
            config: c.config,
            seed: c.seed,
            out: c.out,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fwplab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
