//! `brsmfg <command> [--config PATH] [--set KEY=VALUE]... [--out DIR] [--workers N]`
//!
//! Exit status: 0 success, 1 i/o error, 2 configuration error, 3 numerical
//! failure, 4 finished without convergence.

use std::path::PathBuf;
use std::process::ExitCode;

use brsmfg::config::RunConfig;
use brsmfg::runner::{run, Command, RunError};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "brsmfg", version, about = "Best-reply strategy and mean-field game experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Flat key = value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (default: $BRSMFG_OUT/<command>, else ./out/<command>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses one per core. Does not change results.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// N-player particle simulation under the BRS control.
    Simulate,
    /// Mean-field Fokker–Planck equation under the BRS drift.
    Fpk,
    /// Mean-field game system by damped Picard iteration.
    Mfg,
    /// W₁ profile between the BRS and MFG densities.
    Compare,
    /// W₁ to the mean-field limit for growing N.
    ChaosStudy,
    /// Convergence order of the one-window HJB to the BRS surrogate.
    MpcOrder,
    /// Wealth trading model, particles and grid.
    Wealth,
    /// Two-population crowd model.
    Crowd,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Simulate => Command::Simulate,
            Cmd::Fpk => Command::Fpk,
            Cmd::Mfg => Command::Mfg,
            Cmd::Compare => Command::Compare,
            Cmd::ChaosStudy => Command::ChaosStudy,
            Cmd::MpcOrder => Command::MpcOrder,
            Cmd::Wealth => Command::Wealth,
            Cmd::Crowd => Command::Crowd,
        }
    }
}

fn execute(cli: Cli) -> Result<i32, RunError> {
    let command = Command::from(cli.command);
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p, &cli.overrides)?,
        None => RunConfig::from_text("", &cli.overrides)?,
    };
    if let Some(w) = cli.workers {
        cfg.set("run.workers", &w.to_string())?;
    }
    let out = cli.out.unwrap_or_else(|| {
        let root = std::env::var_os("BRSMFG_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out"));
        root.join(command.name())
    });
    let outcome = run(command, &cfg, &out)?;
    print!("{}", outcome.report.render());
    if !outcome.converged {
        log::warn!("finished without convergence");
    }
    Ok(outcome.exit_code())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
