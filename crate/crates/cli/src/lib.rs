//! Batch experiments on embedded eigenvalues: band tables, Floquet data,
//! eigenvalue searches, persistence scans and decay checks, written as CSV.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(#[from] embspec_core::Error),
    #[error("output error: {0}")]
    Io(#[from] std::io::Error),
    #[error("output error: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "embspec", version, about = "Embedded eigenvalues of asymptotically periodic Schrodinger systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for CSV files.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Worker threads for internal scans.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for randomized probes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Hill discriminant scan and band edges.
    Bands,
    /// Monodromy, multipliers and exponents of the system at infinity.
    Monodromy,
    /// Embedded-eigenvalue search near lambda0.
    Eig,
    /// Mismatch scaling along perturbation directions.
    Persist,
    /// Tail decay fit and roughness probes.
    Decay,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Bands => "bands",
            Self::Monodromy => "monodromy",
            Self::Eig => "eig",
            Self::Persist => "persist",
            Self::Decay => "decay",
        }
    }
}

/// Runs one command, printing its summary; returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    match execute(cli) {
        Ok(summary) => {
            print!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("embspec: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<String, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config <path> is required".into()))?;
    let cfg = config::LoadedConfig::from_path(path)?;
    if let Some(k) = cli.threads {
        if k == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
    }
    std::fs::create_dir_all(&cli.out)?;
    let ctx = commands::Context {
        cfg: &cfg,
        out: &cli.out,
        seed: cli.seed,
        command: cli.command,
    };
    match cli.command {
        Command::Bands => commands::bands(&ctx),
        Command::Monodromy => commands::monodromy(&ctx),
        Command::Eig => commands::eig(&ctx),
        Command::Persist => commands::persist(&ctx),
        Command::Decay => commands::decay(&ctx),
    }
}
