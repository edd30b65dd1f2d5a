use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rbsde_lab::cli::{self, Command, ExperimentConfig};
use rbsde_lab::Error;

#[derive(Parser)]
#[command(name = "rbsde-lab", version, about = "Reflected BSDE solvers and operator checks")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Solve and write per-step means of Y, |Z| and K.
    Solve(Common),
    /// Check the configured axioms on random trials.
    CheckAxioms(Common),
    /// Price the configured American put and compare with the binomial tree.
    PriceAmerican(Common),
    /// Root value over a list of step counts.
    Convergence(Common),
    /// Truncation sequence for a claim that may be negative.
    Extend(Common),
    /// Verify that Y + K is a martingale of the unreflected operator.
    DoobMeyer(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (`key = value` lines).
    config: PathBuf,
    /// Output CSV; overrides `output`. Without either the CSV goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `ensemble.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let args = Cli::parse();
    let (cmd, common) = match args.command {
        Sub::Solve(c) => (Command::Solve, c),
        Sub::CheckAxioms(c) => (Command::CheckAxioms, c),
        Sub::PriceAmerican(c) => (Command::PriceAmerican, c),
        Sub::Convergence(c) => (Command::Convergence, c),
        Sub::Extend(c) => (Command::Extend, c),
        Sub::DoobMeyer(c) => (Command::DoobMeyer, c),
    };
    let result = ExperimentConfig::from_file(&common.config).and_then(|mut cfg| {
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        if let Some(o) = common.out {
            cfg.output = Some(o);
        }
        let outcome = cli::run(cmd, &cfg)?;
        match &cfg.output {
            Some(path) => std::fs::write(path, &outcome.csv)
                .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?,
            None => print!("{}", outcome.csv),
        }
        Ok(outcome)
    });
    match &result {
        Ok(o) if !o.pass => eprintln!("checks failed"),
        Err(e) => eprintln!("error: {e}"),
        _ => {}
    }
    ExitCode::from(cli::exit_code(&result) as u8)
}
