//! `mjls`: validate problems, certify stability, solve the finite- and
//! infinite-horizon robust control problems, simulate, and reproduce the
//! bundled example.
//!
//! Exit codes: 0 success, 1 invalid problem or unstable system, 2 parse or
//! usage error, 3 stability undecided, 4 solver failure or failed comparison.

mod commands;
mod reproduce;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "mjls", version, about = "Robust min-max control of Markov jump linear systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the problem file against the model invariants.
    Validate {
        problem: PathBuf,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Open-loop mean-square stability over the polytope.
    Stability {
        problem: PathBuf,
        #[command(flatten)]
        jsr: JsrArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Finite-horizon min-max solution and optimal cost.
    Finite {
        problem: PathBuf,
        #[arg(short = 'T', long = "horizon", value_parser = horizon)]
        horizon: usize,
        #[command(flatten)]
        initial: InitialArgs,
        /// Relative tolerance of the dominance test.
        #[arg(long, value_parser = positive, default_value_t = mjls::finite_horizon::PRUNE_TOL)]
        tol: f64,
        /// Keep every candidate branch.
        #[arg(long)]
        no_prune: bool,
        /// Largest number of candidates allowed at one step.
        #[arg(long, default_value_t = mjls::finite_horizon::DEFAULT_BRANCH_BUDGET)]
        budget: usize,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Stabilizing coupled algebraic Riccati solution, gains and cost.
    Infinite {
        problem: PathBuf,
        #[command(flatten)]
        initial: InitialArgs,
        /// Relative residual at which the Riccati iteration stops.
        #[arg(long, value_parser = positive, default_value_t = mjls::infinite_horizon::CareOptions::default().tol)]
        tol: f64,
        #[command(flatten)]
        jsr: JsrArgs,
        /// Also report the finite-horizon convergence diagnostics for this horizon.
        #[arg(short = 'T', long = "horizon", value_parser = horizon)]
        horizon: Option<usize>,
        /// Write the stabilizing solution here as a controller file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Closed-loop simulation or Monte Carlo cost estimate.
    Simulate {
        problem: PathBuf,
        #[arg(short = 'T', long = "horizon", value_parser = horizon)]
        horizon: usize,
        #[command(flatten)]
        initial: InitialArgs,
        /// Control law: the finite-horizon policy or the steady-state one.
        #[arg(long, value_enum, default_value_t = Policy::Finite)]
        policy: Policy,
        /// Steady-state controller file written by `infinite --out`.
        #[arg(long)]
        controller: Option<PathBuf>,
        /// `greedy`, `mixture`, or `vertex:<v>` (1-based).
        #[arg(long, default_value = "greedy", value_parser = adversary)]
        adversary: Adversary,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        runs: u64,
        #[arg(long, value_parser = positive, default_value_t = mjls::finite_horizon::PRUNE_TOL)]
        tol: f64,
        #[arg(long, default_value_t = mjls::finite_horizon::DEFAULT_BRANCH_BUDGET)]
        budget: usize,
        #[command(flatten)]
        jsr: JsrArgs,
        /// Trajectory CSV for a single run, summary JSON otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Recompute the bundled example and compare with the published values.
    ReproduceExample {
        /// Absolute tolerance on gain entries.
        #[arg(long, value_parser = positive, default_value_t = reproduce::GAIN_TOL)]
        tol: f64,
        #[command(flatten)]
        jsr: JsrArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
}

#[derive(Args, Clone)]
struct OutputArgs {
    /// Machine-readable report on stdout.
    #[arg(long)]
    json: bool,
    /// Also write the JSON report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Copy)]
struct JsrArgs {
    #[arg(long, default_value_t = 12, value_parser = clap::value_parser!(u64).range(1..))]
    jsr_depth: u64,
    #[arg(long, value_parser = positive, default_value_t = 1e-4)]
    jsr_gap: f64,
}

#[derive(Args, Clone)]
struct InitialArgs {
    /// Initial state, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Option<Vec<f64>>,
    /// Known initial mode (1-based).
    #[arg(long, conflicts_with = "p0", value_parser = clap::value_parser!(u64).range(1..))]
    theta0: Option<u64>,
    /// Initial mode distribution, comma separated.
    #[arg(long, value_delimiter = ',')]
    p0: Option<Vec<f64>>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Policy {
    Finite,
    Steady,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Adversary {
    Greedy,
    Mixture,
    Vertex(usize),
}

fn positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err("must be a positive number".into())
    }
}

fn horizon(s: &str) -> Result<usize, String> {
    let v: usize = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 1 {
        Ok(v)
    } else {
        Err("horizon must be at least 1".into())
    }
}

fn adversary(s: &str) -> Result<Adversary, String> {
    match s {
        "greedy" => Ok(Adversary::Greedy),
        "mixture" => Ok(Adversary::Mixture),
        _ => match s.strip_prefix("vertex:").map(str::parse::<usize>) {
            Some(Ok(v)) if v >= 1 => Ok(Adversary::Vertex(v)),
            _ => Err(format!("unknown adversary `{s}` (greedy, mixture, vertex:<v>)")),
        },
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var("MJLS_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads();
    match commands::dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
