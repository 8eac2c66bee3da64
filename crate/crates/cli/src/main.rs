use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod report;

use config::RunConfig;

/// Invalid input: bad config, failed validation or missing prerequisite files.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_INVALID: u8 = 2;
pub const EXIT_NOT_CONVERGED: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "dcmfg", version, about = "Density-constrained mean field game solver")]
struct Cli {
    /// run configuration (TOML); a run manifest is accepted too
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// worker threads, overriding the config
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// output directory, overriding output.directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the problem and certify the result.
    Solve,
    /// Solve the one-step projection problem and check the interpolation bound.
    Project,
    /// Sample trajectories from a previous solve and run the flow checks.
    Sample,
    /// Aggregate tables over run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Invalid>().is_some() {
        return EXIT_INVALID;
    }
    match e.downcast_ref::<dcmfg::Error>() {
        Some(
            dcmfg::Error::Validation(_)
            | dcmfg::Error::InvalidParameter(_)
            | dcmfg::Error::InvalidGrid(_)
            | dcmfg::Error::ShapeMismatch(_)
            | dcmfg::Error::Format(_),
        ) => EXIT_INVALID,
        _ => EXIT_FAILURE,
    }
}

fn init_threads(n: Option<usize>) -> anyhow::Result<usize> {
    let n = n.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |v| v.get()));
    if n == 0 {
        return Err(Invalid("threads must be positive".into()).into());
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(n)
}

fn dispatch(cli: Cli) -> anyhow::Result<u8> {
    if let Command::Report { runs } = &cli.command {
        init_threads(cli.threads)?;
        return report::run(runs, cli.out.as_deref());
    }
    let path = cli.config.ok_or_else(|| Invalid("--config is required".into()))?;
    let mut cfg = RunConfig::load(&path)?;
    if let Some(out) = cli.out {
        cfg.output.directory = out;
    }
    cfg.threads = Some(init_threads(cli.threads.or(cfg.threads))?);
    match cli.command {
        Command::Solve => commands::solve(&cfg),
        Command::Project => commands::project(&cfg),
        Command::Sample => commands::sample(&cfg),
        Command::Report { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
