//! `sheaf-sysid`: cohomology reports, simulation, identification and the
//! reference experiments, driven by one TOML config per run.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use crate::commands::Run;
use crate::config::{CommandName, RunConfig};

const THREADS_VAR: &str = "SHEAF_SYSID_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "sheaf-sysid",
    version,
    about = "Sheaf-Laplacian dynamics and recovery of edge potentials"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML). Relative paths inside it resolve against its directory.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (default: the config's `out`, else ./out).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides the config seed; for experiments, replaces the seed list.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Only errors are printed.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Report dim H⁰, dim H¹ and the Laplacian spectrum; write the harmonic basis.
    Cohomology,
    /// Integrate the flow and write trajectory CSVs with a manifest.
    Simulate,
    /// Fit a parametric edge potential to trajectory files.
    Identify,
    /// Run one of the reference experiments and write its tables.
    Experiment,
}

impl From<Command> for CommandName {
    fn from(c: Command) -> Self {
        match c {
            Command::Cohomology => Self::Cohomology,
            Command::Simulate => Self::Simulate,
            Command::Identify => Self::Identify,
            Command::Experiment => Self::Experiment,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for numerical divergence, 1 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    let diverged = e.chain().any(|c| {
        matches!(
            c.downcast_ref::<sheaf_sysid::Error>(),
            Some(sheaf_sysid::Error::Divergence { .. })
        )
    });
    if diverged {
        2
    } else {
        1
    }
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let command = CommandName::from(cli.command);
    let path = cli.config.context("--config PATH is required")?;
    let mut config = RunConfig::load(&path)?;
    match config.command {
        Some(c) if c != command => bail!("config is for `{}`, not `{}`", c.as_str(), command.as_str()),
        _ => config.command = Some(command),
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
        if let Some(exp) = config.experiment.as_mut() {
            exp.seeds = vec![seed];
        }
    }
    let base = path.parent().map(PathBuf::from).unwrap_or_default();
    let out = cli
        .out
        .or_else(|| config.out.as_ref().map(|o| base.join(o)))
        .unwrap_or_else(|| PathBuf::from("out"));
    Run::new(command, config, base, out, cli.quiet)?.run()
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("{THREADS_VAR} must be a positive integer, got '{v}'"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")
}
