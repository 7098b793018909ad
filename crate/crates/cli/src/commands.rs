use std::fmt::{Display, Write as _};
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use mjls::finite_horizon::{
    branch_profile, profile_peak, solve_finite_horizon, FiniteHorizonOptions,
};
use mjls::infinite_horizon::{
    convergence_report, infinite_cost, stabilizing_solution, CareOptions, InfiniteHorizonOptions,
    StabilizingSolution,
};
use mjls::linalg::to_rows;
use mjls::model::{load_problem, parse_problem, ProblemError};
use mjls::simulate::{
    empirical_decay, simulate_many, AdversaryChoice, AdversaryPolicy, ClosedLoopTrajectory,
    Controller, McSummary, SimulationError, SimulationOptions, MIN_DECAY_TRAJECTORIES,
};
use mjls::stability::{is_mss, JsrOptions, Verdict};
use mjls::{InitialCondition, ModeInfo, Problem};

use crate::{reproduce, Adversary, Command, InitialArgs, JsrArgs, OutputArgs, Policy};

pub const EXIT_OK: u8 = 0;
pub const EXIT_INVALID: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_UNDECIDED: u8 = 3;
pub const EXIT_SOLVER: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    pub fn solver(context: &str, e: impl Display) -> Self {
        Self { code: EXIT_SOLVER, message: format!("{context}: {e}") }
    }
}

impl From<ProblemError> for CliError {
    fn from(e: ProblemError) -> Self {
        let code = match e {
            ProblemError::Invalid(_) => EXIT_INVALID,
            _ => EXIT_USAGE,
        };
        Self { code, message: e.to_string() }
    }
}

pub type CmdResult = Result<u8, CliError>;

pub fn dispatch(command: Command) -> CmdResult {
    match command {
        Command::Validate { problem, output } => validate(&problem, &output),
        Command::Stability { problem, jsr, output } => stability(&problem, jsr, &output),
        Command::Finite { problem, horizon, initial, tol, no_prune, budget, output } => {
            let opts = FiniteHorizonOptions { prune: !no_prune, prune_tol: tol, branch_budget: budget };
            finite(&problem, horizon, &initial, &opts, &output)
        }
        Command::Infinite { problem, initial, tol, jsr, horizon, out, json } => {
            infinite(&problem, &initial, tol, jsr, horizon, out.as_deref(), json)
        }
        Command::Simulate {
            problem, horizon, initial, policy, controller, adversary, seed, runs, tol, budget,
            jsr, out, json,
        } => {
            let run = SimulateRun {
                horizon,
                policy,
                controller,
                adversary,
                seed,
                runs: runs as usize,
                finite: FiniteHorizonOptions { prune: true, prune_tol: tol, branch_budget: budget },
                jsr: jsr_options(jsr),
            };
            simulate(&problem, &initial, &run, out.as_deref(), json)
        }
        Command::ReproduceExample { tol, jsr, output } => {
            reproduce::run(tol, jsr_options(jsr), &output)
        }
    }
}

pub fn jsr_options(args: JsrArgs) -> JsrOptions {
    JsrOptions {
        max_depth: args.jsr_depth as usize,
        gap: args.jsr_gap,
        ..JsrOptions::default()
    }
}

/// Prints the report as JSON or as human text, and writes the JSON to `--out`.
pub fn emit(output: &OutputArgs, report: &Value, human: impl FnOnce() -> String) -> Result<(), CliError> {
    if let Some(path) = &output.out {
        write_json(path, report)?;
    }
    if output.json {
        println!("{}", serde_json::to_string_pretty(report).expect("json value"));
    } else {
        print!("{}", human());
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let file = File::create(path)
        .map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value)
        .map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))
}

pub fn rows(m: &DMatrix<f64>) -> Value {
    json!(to_rows(m))
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("[{}]", parts.join(", "))
}

fn fmt_matrix(m: &DMatrix<f64>) -> String {
    let parts: Vec<String> = to_rows(m).iter().map(|r| fmt_vec(r)).collect();
    format!("[{}]", parts.join(", "))
}

fn validate(path: &Path, output: &OutputArgs) -> CmdResult {
    let problem = parse_problem(path)?;
    let report = problem.validate();
    let dims = problem.model.dims();
    let value = json!({
        "valid": report.is_valid(),
        "modes": problem.model.n_modes(),
        "vertices": problem.polytope.n_vertices(),
        "dims": dims,
        "violations": report.violations,
    });
    emit(output, &value, || {
        if report.is_valid() {
            format!(
                "valid: {} modes, {} vertices, nx={} nu={} nz={}\n",
                problem.model.n_modes(),
                problem.polytope.n_vertices(),
                dims.nx,
                dims.nu,
                dims.nz
            )
        } else {
            format!("invalid:\n{report}\n")
        }
    })?;
    Ok(if report.is_valid() { EXIT_OK } else { EXIT_INVALID })
}

fn stability(path: &Path, jsr: JsrArgs, output: &OutputArgs) -> CmdResult {
    let problem = load_problem(path)?;
    let report = is_mss(&problem.model, &problem.polytope, &jsr_options(jsr))
        .map_err(|e| CliError::solver("joint spectral radius of the open-loop lifting", e))?;
    let value = serde_json::to_value(&report).expect("serializable report");
    emit(output, &value, || {
        let mut s = String::new();
        for (v, r) in report.vertex_radii.iter().enumerate() {
            let _ = writeln!(s, "rho(Lambda_{}) = {r}", v + 1);
        }
        let c = &report.certificate;
        let _ = writeln!(
            s,
            "jsr in [{}, {}] (depth {}, converged {})",
            c.lower, c.upper, c.depth, c.converged
        );
        let _ = writeln!(s, "verdict: {}", verdict_name(report.verdict));
        s
    })?;
    Ok(match report.verdict {
        Verdict::Stable => EXIT_OK,
        Verdict::Unstable => EXIT_INVALID,
        Verdict::Undecided => EXIT_UNDECIDED,
    })
}

fn verdict_name(v: Verdict) -> &'static str {
    match v {
        Verdict::Stable => "stable",
        Verdict::Unstable => "unstable",
        Verdict::Undecided => "undecided",
    }
}

/// Initial condition from the flags, falling back to the problem file.
fn initial_condition(problem: &Problem, args: &InitialArgs) -> Result<Option<InitialCondition>, CliError> {
    let file = problem.initial.clone();
    let x0 = match (&args.x0, &file) {
        (Some(x), _) => DVector::from_vec(x.clone()),
        (None, Some(ic)) => ic.x0.clone(),
        (None, None) => {
            if args.theta0.is_some() || args.p0.is_some() {
                return Err(CliError::usage("--theta0/--p0 given without --x0"));
            }
            return Ok(None);
        }
    };
    let mode = match (args.theta0, &args.p0, &file) {
        (Some(t), _, _) => ModeInfo::Known(t as usize - 1),
        (None, Some(p), _) => ModeInfo::Distribution(DVector::from_vec(p.clone())),
        (None, None, Some(ic)) => ic.mode.clone(),
        (None, None, None) => return Err(CliError::usage("--x0 needs --theta0 or --p0")),
    };
    let nx = problem.model.dims().nx;
    if x0.len() != nx {
        return Err(CliError::usage(format!("--x0 has {} entries, expected {nx}", x0.len())));
    }
    mode.check(problem.model.n_modes())
        .map_err(|e| CliError::usage(e.to_string()))?;
    Ok(Some(InitialCondition { x0, mode }))
}

fn mode_json(mode: &ModeInfo) -> Value {
    match mode {
        ModeInfo::Known(i) => json!({ "theta0": i + 1 }),
        ModeInfo::Distribution(p) => json!({ "p0": p.as_slice() }),
    }
}

fn finite(
    path: &Path,
    horizon: usize,
    initial: &InitialArgs,
    opts: &FiniteHorizonOptions,
    output: &OutputArgs,
) -> CmdResult {
    let problem = load_problem(path)?;
    let ic = initial_condition(&problem, initial)?;
    let z = problem.terminal_or_zero();
    let solution = solve_finite_horizon(&problem.model, &problem.polytope, &z, horizon, opts)
        .map_err(|e| CliError::solver("finite-horizon Riccati recursion", e))?;
    let cost = match &ic {
        Some(ic) => Some(
            solution
                .cost(&ic.x0, &ic.mode)
                .map_err(|e| CliError::solver("finite-horizon cost", e))?,
        ),
        None => None,
    };
    let profile = branch_profile(&solution);
    let (peak_candidates, peak_step) = profile_peak(&profile, |p| p.candidates);
    let (peak_retained, _) = profile_peak(&profile, |p| p.retained);
    let set0 = solution.set_at(0);

    let branches: Vec<Value> = set0
        .branches
        .iter()
        .map(|b| {
            json!({
                "lineage": b.lineage.iter().map(|v| v + 1).collect::<Vec<_>>(),
                "gains": b.k.iter().map(rows).collect::<Vec<_>>(),
                "x": b.x.iter().map(rows).collect::<Vec<_>>(),
            })
        })
        .collect();
    let value = json!({
        "horizon": horizon,
        "initial": ic.as_ref().map(|ic| json!({ "x0": ic.x0.as_slice(), "mode": mode_json(&ic.mode) })),
        "cost": cost,
        "step0_branches": branches,
        "profile": profile,
        "peak_candidates": { "count": peak_candidates, "step": peak_step },
        "peak_retained": peak_retained,
    });
    emit(output, &value, || {
        let mut s = String::new();
        let _ = writeln!(s, "horizon {horizon}: {} branches at step 0", set0.len());
        if let Some(c) = &cost {
            let _ = writeln!(s, "cost J = {} (branch {})", c.value, c.argmax + 1);
            let _ = writeln!(s, "branch costs {}", fmt_vec(&c.branch_values));
        }
        let _ = writeln!(
            s,
            "peak candidates {peak_candidates} at step {peak_step}, peak retained {peak_retained}"
        );
        for (l, b) in set0.branches.iter().enumerate() {
            let lineage: Vec<String> = b.lineage.iter().map(|v| (v + 1).to_string()).collect();
            let _ = writeln!(s, "branch {} lineage {}", l + 1, lineage.join(","));
            for (i, k) in b.k.iter().enumerate() {
                let _ = writeln!(s, "  K_{} = {}", i + 1, fmt_matrix(k));
            }
        }
        s
    })?;
    Ok(EXIT_OK)
}

fn solve_care(problem: &Problem, tol: f64, jsr: JsrOptions) -> Result<StabilizingSolution, CliError> {
    let opts = InfiniteHorizonOptions {
        care: CareOptions { tol, ..CareOptions::default() },
        jsr,
    };
    stabilizing_solution(&problem.model, &problem.polytope, &opts)
        .map_err(|e| CliError::solver("coupled algebraic Riccati equations", e))
}

fn infinite(
    path: &Path,
    initial: &InitialArgs,
    tol: f64,
    jsr: JsrArgs,
    horizon: Option<usize>,
    out: Option<&Path>,
    as_json: bool,
) -> CmdResult {
    let problem = load_problem(path)?;
    let ic = initial_condition(&problem, initial)?;
    let solution = solve_care(&problem, tol, jsr_options(jsr))?;
    if let Some(path) = out {
        write_json(path, &solution)?;
    }
    let certified = solution.require_certified();

    let (cost, convergence) = match (&ic, &certified) {
        (Some(ic), Ok(())) => {
            let cost = infinite_cost(&solution, &ic.x0, &ic.mode)
                .map_err(|e| CliError::solver("infinite-horizon cost", e))?;
            let convergence = match horizon {
                Some(t) => Some(
                    convergence_report(
                        &problem.model,
                        &problem.polytope,
                        &solution,
                        &problem.terminal_or_zero(),
                        t,
                        &ic.x0,
                        &ic.mode,
                    )
                    .map_err(|e| CliError::solver("finite-horizon convergence check", e))?,
                ),
                None => None,
            };
            (Some(cost), convergence)
        }
        _ => (None, None),
    };

    let branches: Vec<Value> = solution
        .branches
        .iter()
        .map(|b| {
            json!({
                "vertex": b.vertex + 1,
                "gains": b.k.iter().map(rows).collect::<Vec<_>>(),
                "x": b.x.iter().map(rows).collect::<Vec<_>>(),
                "jsr": b.certificate,
                "iterations": b.iterations,
                "residual": b.residual,
            })
        })
        .collect();
    let discarded: Vec<Value> = solution
        .discarded
        .iter()
        .map(|d| json!({ "vertex": d.vertex + 1, "dominated_by": d.dominated_by + 1 }))
        .collect();
    let selected = cost.as_ref().map(|c| solution.branches[c.argmax].vertex + 1);
    let value = json!({
        "certified": solution.certified,
        "branches": branches,
        "discarded": discarded,
        "initial": ic.as_ref().map(|ic| json!({ "x0": ic.x0.as_slice(), "mode": mode_json(&ic.mode) })),
        "cost": cost,
        "selected_vertex": selected,
        "convergence": convergence,
    });
    let output = OutputArgs { json: as_json, out: None };
    emit(&output, &value, || {
        let mut s = String::new();
        for b in &solution.branches {
            let c = &b.certificate;
            let _ = writeln!(
                s,
                "vertex {}: jsr in [{}, {}], {} iterations, residual {}",
                b.vertex + 1,
                c.lower,
                c.upper,
                b.iterations,
                b.residual
            );
            for (i, k) in b.k.iter().enumerate() {
                let _ = writeln!(s, "  K_{} = {}", i + 1, fmt_matrix(k));
            }
        }
        for d in &solution.discarded {
            let _ = writeln!(s, "vertex {} dominated by vertex {}", d.vertex + 1, d.dominated_by + 1);
        }
        if let (Some(c), Some(v)) = (&cost, selected) {
            let _ = writeln!(s, "cost J = {} (vertex {v})", c.value);
            let _ = writeln!(s, "branch costs {}", fmt_vec(&c.branch_values));
        }
        if let Some(r) = &convergence {
            let _ = writeln!(
                s,
                "horizon {}: J_T = {}, gap {}, bound {}",
                r.horizon, r.finite_cost, r.gap, r.lemma_bound
            );
        }
        s
    })?;
    match certified {
        Ok(()) => Ok(EXIT_OK),
        Err(e) => Err(CliError::solver("closed-loop stability certificate", e)),
    }
}

struct SimulateRun {
    horizon: usize,
    policy: Policy,
    controller: Option<PathBuf>,
    adversary: Adversary,
    seed: u64,
    runs: usize,
    finite: FiniteHorizonOptions,
    jsr: JsrOptions,
}

fn load_controller(path: &Path) -> Result<StabilizingSolution, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("controller file {}: {e}", path.display())))
}

fn simulation_error(e: SimulationError) -> CliError {
    match e {
        SimulationError::Input(_)
        | SimulationError::VertexOutOfRange { .. }
        | SimulationError::GainDimension { .. } => CliError::usage(e.to_string()),
        _ => CliError::solver("closed-loop simulation", e),
    }
}

fn simulate(
    path: &Path,
    initial: &InitialArgs,
    run: &SimulateRun,
    out: Option<&Path>,
    as_json: bool,
) -> CmdResult {
    let problem = load_problem(path)?;
    let ic = initial_condition(&problem, initial)?
        .ok_or_else(|| CliError::usage("simulation needs an initial state (--x0)"))?;
    let adversary = match run.adversary {
        Adversary::Greedy => AdversaryPolicy::GreedyWorstCase,
        Adversary::Mixture => AdversaryPolicy::RandomMixture { seed: run.seed },
        Adversary::Vertex(v) => AdversaryPolicy::FixedVertex { vertex: v - 1 },
    };
    let policy = if run.controller.is_some() { Policy::Steady } else { run.policy };

    let finite_solution;
    let steady_solution;
    let controller = match policy {
        Policy::Finite => {
            finite_solution = solve_finite_horizon(
                &problem.model,
                &problem.polytope,
                &problem.terminal_or_zero(),
                run.horizon,
                &run.finite,
            )
            .map_err(|e| CliError::solver("finite-horizon Riccati recursion", e))?;
            Controller::Finite(&finite_solution)
        }
        Policy::Steady => {
            steady_solution = match &run.controller {
                Some(file) => load_controller(file)?,
                None => solve_care(&problem, CareOptions::default().tol, run.jsr)?,
            };
            Controller::Steady(&steady_solution)
        }
    };
    let opts = SimulationOptions {
        horizon: run.horizon,
        terminal: problem.terminal.clone(),
    };
    let trajectories = simulate_many(
        &problem.model,
        &problem.polytope,
        &controller,
        &adversary,
        &ic.x0,
        &ic.mode,
        &opts,
        run.runs,
        run.seed,
    )
    .map_err(simulation_error)?;

    if let [t] = trajectories.as_slice() {
        if let Some(path) = out {
            let file = File::create(path)
                .map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))?;
            t.write_csv(BufWriter::new(file)).map_err(simulation_error)?;
        }
        let value = trajectory_json(t, run.seed);
        let output = OutputArgs { json: as_json, out: None };
        emit(&output, &value, || trajectory_text(t))?;
        return Ok(EXIT_OK);
    }

    let costs: Vec<f64> = trajectories.iter().map(|t| t.total_cost).collect();
    let summary = McSummary::from_costs(&costs, run.seed);
    let certified = match &controller {
        Controller::Steady(s) if s.certified => Some(s.zeta()),
        _ => None,
    };
    let decay = (trajectories.len() >= MIN_DECAY_TRAJECTORIES)
        .then(|| empirical_decay(&trajectories, 0, certified).ok())
        .flatten();
    let value = json!({ "summary": summary, "decay": decay });
    let output = OutputArgs { json: as_json, out: out.map(Path::to_path_buf) };
    emit(&output, &value, || {
        let mut s = format!(
            "{} runs, seed {}: mean cost {} (stderr {})\n",
            summary.n_runs, summary.seed, summary.mean, summary.stderr
        );
        if let Some(rate) = decay.and_then(|d| d.rate()) {
            let _ = writeln!(s, "empirical decay rate {rate}");
        }
        s
    })?;
    Ok(EXIT_OK)
}

fn choice_json(c: &AdversaryChoice) -> Value {
    match c {
        AdversaryChoice::Vertex(v) => json!({ "vertex": v + 1 }),
        AdversaryChoice::Mixture(w) => json!({ "mixture": w }),
    }
}

fn trajectory_json(t: &ClosedLoopTrajectory, seed: u64) -> Value {
    let steps: Vec<Value> = t
        .steps
        .iter()
        .map(|s| {
            json!({
                "k": s.k,
                "theta": s.theta + 1,
                "choice": choice_json(&s.choice),
                "x": s.x.as_slice(),
                "u": s.u.as_slice(),
                "stage_cost": s.stage_cost,
            })
        })
        .collect();
    json!({
        "seed": seed,
        "steps": steps,
        "final_state": t.final_state.as_slice(),
        "final_mode": t.final_mode + 1,
        "terminal_cost": t.terminal_cost,
        "total_cost": t.total_cost,
    })
}

fn trajectory_text(t: &ClosedLoopTrajectory) -> String {
    let mut s = String::new();
    for step in &t.steps {
        let choice = match &step.choice {
            AdversaryChoice::Vertex(v) => format!("vertex {}", v + 1),
            AdversaryChoice::Mixture(w) => format!("mixture {}", fmt_vec(w)),
        };
        let _ = writeln!(
            s,
            "k={} theta={} {} x={} u={} cost={}",
            step.k,
            step.theta + 1,
            choice,
            fmt_vec(step.x.as_slice()),
            fmt_vec(step.u.as_slice()),
            step.stage_cost
        );
    }
    let _ = writeln!(
        s,
        "final x={} theta={} terminal cost {} total cost {}",
        fmt_vec(t.final_state.as_slice()),
        t.final_mode + 1,
        t.terminal_cost,
        t.total_cost
    );
    s
}
