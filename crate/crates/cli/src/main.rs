//! `confound`: policy-value bounds under unobserved confounding, from the
//! command line. Four commands: `simulate` writes a synthetic dataset,
//! `bounds` sweeps estimators over a sensitivity grid, `learn` fits a
//! mixture policy against an adversary, `selfcheck` verifies the numerical
//! core against slow reference computations.

mod config;
mod runner;
mod selfcheck;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use config::{Command, Overrides};

#[derive(Parser, Debug)]
#[command(name = "confound", version, about = "Worst-case policy-value bounds under unobserved confounding")]
struct Cli {
    /// simulate | bounds | learn | selfcheck
    command: String,
    /// Flat key=value config file; every flag below overrides its key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Synthetic sample size.
    #[arg(long)]
    n: Option<usize>,
    /// Seeds: 'a..b' (half-open) or a comma list.
    #[arg(long)]
    seeds: Option<String>,
    /// Sensitivity sweep grid, comma separated.
    #[arg(long)]
    grid: Option<String>,
    /// Model template: box:GAMMA=1.5 or f:KIND=kl,GAMMA_BUDGET=0.01.
    #[arg(long)]
    model: Option<String>,
    /// Constraint spec, repeatable: kcmc:hard,D=100 | kcmc:gp,D=100,alpha=0.05 | zsb | qb.
    #[arg(long = "spec")]
    specs: Vec<String>,
    /// Output path; companions derive from it (.summary.csv, .trace.csv).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 1 runs serially. Results are identical either way.
    #[arg(long)]
    workers: Option<usize>,
    /// lower | upper | both.
    #[arg(long)]
    direction: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> confound::Result<i32> {
    let command = Command::parse(&cli.command)?;
    let ov = Overrides {
        n: cli.n,
        seeds: cli.seeds.clone(),
        grid: cli.grid.clone(),
        model: cli.model.clone(),
        specs: cli.specs.clone(),
        out: cli.out.clone(),
        workers: cli.workers,
        direction: cli.direction.clone(),
    };
    let cfg = config::load(command, cli.config.as_deref(), &ov)?;
    match command {
        Command::Simulate => runner::run_simulate(&cfg),
        Command::Bounds => runner::run_bounds(&cfg),
        Command::Learn => runner::run_learn(&cfg),
        Command::Selfcheck => selfcheck::run(),
    }
}
