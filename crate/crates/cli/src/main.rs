//! `volex`: run execution-cost experiments from TOML configs.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 1 for I/O failures.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::{content_hash, Outputs, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "volex", version, about = "Optimal execution under stochastic volume")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; overrides the config file.
    #[arg(long, global = true, env = "VOLEX_SEED")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "volex-out")]
    out_dir: PathBuf,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Monte Carlo cost sweep, sample paths and the permanent-impact schedule.
    Simulate,
    /// Penalty sweep of the value function.
    Pde,
    /// Merge CSV outputs found under a directory into plot-ready tables.
    Figures {
        #[arg(long)]
        dir: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Pde => "pde",
            Command::Figures { .. } => "figures",
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let started = Instant::now();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot start thread pool: {e}")))?;
    }
    let (mut cfg, config_hash) = match &cli.config {
        Some(path) => {
            let cfg = RunConfig::load(path)?;
            let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
            (Some(cfg), Some(content_hash(&bytes)))
        }
        None => (None, None),
    };
    let needs_config = !matches!(cli.command, Command::Figures { .. });
    if needs_config && cfg.is_none() {
        return Err(CliError::Config(format!("{} needs --config", cli.command.name())));
    }
    let seed = match cfg.as_mut() {
        Some(c) => c.resolve_seed(cli.seed),
        None => cli.seed.unwrap_or(0),
    };
    let mut out = Outputs::new(&cli.out_dir)?;
    match &cli.command {
        Command::Simulate => commands::simulate(cfg.as_ref().expect("checked"), &mut out, cli.quiet)?,
        Command::Pde => commands::pde(cfg.as_ref().expect("checked"), seed, &mut out, cli.quiet)?,
        Command::Figures { dir } => commands::figures(dir, &mut out, cli.quiet)?,
    }
    let dir = out.dir().to_path_buf();
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command: cli.command.name().into(),
        config_path: cli.config.as_ref().map(|p| p.display().to_string()),
        config_sha256: config_hash,
        config: serde_json::to_value(&cfg).expect("config serializes"),
        seed,
        outputs: out.into_files(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    manifest.save(&dir)?;
    if !cli.quiet {
        println!("{} outputs in {}", manifest.outputs.len(), dir.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(e.exit_code())
        }
    }
}
