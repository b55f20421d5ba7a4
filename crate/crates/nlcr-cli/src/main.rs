//! `nlcr` — reconcile forecasts onto non-linear constraint manifolds,
//! compute accuracy-guarantee balls, and run the two simulation studies.
//!
//! Exit codes: 0 success, 1 incoherent rows found by `check`, 2 input
//! error, 3 numerical failure.

mod cmds;
mod io;

use clap::{Parser, Subcommand};

use crate::cmds::{
    cmd_ball, cmd_check, cmd_evaluate, cmd_reconcile, cmd_simulate, BallArgs, CheckArgs,
    EvaluateArgs, ReconcileArgs, SimulateArgs, DEFAULT_EPS, DEFAULT_MAX_ITERATIONS,
};
use crate::io::CliError;

const LONG_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    "\nalgorithm: equality-constrained SQP, Powell-damped BFGS, L1-merit Armijo line search",
    "\ndefaults: eps1 = 1e-8, eps2 = 1e-8, max iterations = 500",
    "\nrng: ChaCha8, one stream per simulation cell",
    "\nenv: NLCR_EPS1, NLCR_EPS2 override tolerances (flags take precedence)",
);

#[derive(Parser, Debug)]
#[command(name = "nlcr", version, long_version = LONG_VERSION)]
#[command(about = "Non-linearly constrained forecast reconciliation")]
struct Cli {
    /// Worker threads for batch work (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Project base forecasts onto the constraint manifold.
    Reconcile(ReconcileArgs),
    /// Reconcile one forecast and report its accuracy-guarantee ball.
    Ball(BallArgs),
    /// Run a simulation study and write per-cell improvement proportions.
    Simulate(SimulateArgs),
    /// Score forecast panels: RMSE, gmRMSE, DM tests, MCB intervals.
    Evaluate(EvaluateArgs),
    /// Verify rows against the constraints; exits 1 on incoherence.
    Check(CheckArgs),
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Input("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Input(format!("--jobs: {e}")))?;
    }
    match &cli.command {
        Command::Reconcile(a) => cmd_reconcile(a),
        Command::Ball(a) => cmd_ball(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Check(a) => cmd_check(a),
    }
}

fn main() {
    // Referenced so the defaults named in --version stay in sync with the
    // values the parser actually uses.
    debug_assert_eq!(DEFAULT_EPS, 1e-8);
    debug_assert_eq!(DEFAULT_MAX_ITERATIONS, 500);

    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("nlcr: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
