//! Closed-loop simulation against transition-probability adversaries.
//!
//! Trajectories follow `x_{k+1} = A_θ x_k + B_θ u_k`, `z_k = C_θ x_k + D_θ u_k`
//! with `θ_{k+1}` drawn from row `θ_k` of the matrix chosen by the adversary.
//! Runs are reproducible: run `r` of a Monte Carlo batch uses stream `r` of a
//! ChaCha generator seeded with the batch seed.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::finite_horizon::{FiniteHorizonError, FiniteHorizonSolution};
use crate::infinite_horizon::{CareError, StabilizingSolution};
use crate::linalg::quad_form;
use crate::model::{MjlsModel, ModeInfo, TerminalWeights, TpmPolytope};

/// Minimum number of trajectories for a decay fit.
pub const MIN_DECAY_TRAJECTORIES: usize = 100;
/// Per-step mean squared norms at or below this are treated as zero.
pub const DECAY_FLOOR: f64 = 1e-280;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("controller covers horizon {available}, requested {requested}")]
    UncoveredHorizon { available: usize, requested: usize },
    #[error("controller is not certified stabilizing: {0}")]
    Uncertified(CareError),
    #[error("vertex {vertex} out of range 1..={count}")]
    VertexOutOfRange { vertex: usize, count: usize },
    #[error("greedy adversary needs a controller with value functions")]
    NoValueFunction,
    #[error("gain for mode {mode} is {rows}x{cols}, expected {expected_rows}x{expected_cols}")]
    GainDimension {
        mode: usize,
        rows: usize,
        cols: usize,
        expected_rows: usize,
        expected_cols: usize,
    },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("decay fit needs at least {required} trajectories, got {found}")]
    TooFewTrajectories { required: usize, found: usize },
    #[error("decay fit needs horizon > burn-in + 10 (horizon {horizon}, burn-in {burn_in})")]
    ShortHorizon { horizon: usize, burn_in: usize },
    #[error(transparent)]
    FiniteHorizon(#[from] FiniteHorizonError),
    #[error(transparent)]
    Care(#[from] CareError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// State-feedback law applied during a run.
#[derive(Debug, Clone, Copy)]
pub enum Controller<'a> {
    /// Time-varying min-max law of a finite-horizon solution.
    Finite(&'a FiniteHorizonSolution),
    /// Steady-state law of a certified stabilizing solution.
    Steady(&'a StabilizingSolution),
    /// `u = K_θ x` with one gain per mode.
    FixedGains(&'a [DMatrix<f64>]),
}

/// Value-function branches `X^(l)` seen by the controller at a step.
enum Branches<'a> {
    Finite(&'a [crate::finite_horizon::RiccatiBranch]),
    Terminal(&'a [DMatrix<f64>]),
    Steady(&'a [crate::infinite_horizon::CareBranch]),
}

impl Branches<'_> {
    fn len(&self) -> usize {
        match self {
            Branches::Finite(b) => b.len(),
            Branches::Terminal(_) => 1,
            Branches::Steady(b) => b.len(),
        }
    }

    fn x(&self, l: usize, mode: usize) -> &DMatrix<f64> {
        match self {
            Branches::Finite(b) => &b[l].x[mode],
            Branches::Terminal(z) => &z[mode],
            Branches::Steady(b) => &b[l].x[mode],
        }
    }

    fn k(&self, l: usize, mode: usize) -> Option<&DMatrix<f64>> {
        match self {
            Branches::Finite(b) => b[l].k.get(mode),
            Branches::Terminal(_) => None,
            Branches::Steady(b) => b[l].k.get(mode),
        }
    }

    /// Index of the branch with the largest `xᵀ X_θ x`, lowest on ties.
    fn argmax(&self, x: &DVector<f64>, mode: usize) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for l in 0..self.len() {
            let v = quad_form(self.x(l, mode), x);
            if v > best.1 {
                best = (l, v);
            }
        }
        best.0
    }
}

impl<'a> Controller<'a> {
    fn check(&self, model: &MjlsModel, horizon: usize) -> Result<(), SimulationError> {
        match self {
            Controller::Finite(sol) if sol.horizon < horizon => {
                Err(SimulationError::UncoveredHorizon {
                    available: sol.horizon,
                    requested: horizon,
                })
            }
            Controller::Finite(_) => Ok(()),
            Controller::Steady(sol) => sol.require_certified().map_err(SimulationError::Uncertified),
            Controller::FixedGains(gains) => {
                let d = model.dims();
                if gains.len() != model.n_modes() {
                    return Err(SimulationError::Input(format!(
                        "{} gains for {} modes",
                        gains.len(),
                        model.n_modes()
                    )));
                }
                for (i, g) in gains.iter().enumerate() {
                    if g.shape() != (d.nu, d.nx) {
                        return Err(SimulationError::GainDimension {
                            mode: i + 1,
                            rows: g.nrows(),
                            cols: g.ncols(),
                            expected_rows: d.nu,
                            expected_cols: d.nx,
                        });
                    }
                }
                Ok(())
            }
        }
    }

    /// Branches defining the cost-to-go at step `k`.
    fn branches_at(&self, k: usize) -> Option<Branches<'a>> {
        match *self {
            Controller::Finite(sol) if k >= sol.horizon => Some(Branches::Terminal(&sol.terminal.0)),
            Controller::Finite(sol) => Some(Branches::Finite(&sol.set_at(k).branches)),
            Controller::Steady(sol) => Some(Branches::Steady(&sol.branches)),
            Controller::FixedGains(_) => None,
        }
    }

    fn input(&self, k: usize, x: &DVector<f64>, theta: usize) -> DVector<f64> {
        match self {
            Controller::FixedGains(gains) => &gains[theta] * x,
            _ => {
                let b = self.branches_at(k).expect("value-function controller");
                let l = b.argmax(x, theta);
                b.k(l, theta).expect("step within horizon carries gains") * x
            }
        }
    }

    /// Terminal weights charged at the end of a run.
    fn terminal(&self) -> Option<&'a TerminalWeights> {
        match *self {
            Controller::Finite(sol) => Some(&sol.terminal),
            _ => None,
        }
    }
}

/// How the transition matrix is chosen at each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdversaryPolicy {
    /// Always the given vertex (0-based).
    FixedVertex { vertex: usize },
    /// The vertex maximizing the controller's next-step cost-to-go.
    GreedyWorstCase,
    /// A flat-Dirichlet point of the simplex each step.
    RandomMixture { seed: u64 },
}

/// Transition matrix choice recorded at a step.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversaryChoice {
    Vertex(usize),
    Mixture(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub k: usize,
    /// Mode at step `k` (0-based).
    pub theta: usize,
    pub choice: AdversaryChoice,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub z: DVector<f64>,
    /// `‖z_k‖²`.
    pub stage_cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopTrajectory {
    pub steps: Vec<TrajectoryStep>,
    pub final_state: DVector<f64>,
    pub final_mode: usize,
    /// `x_Tᵀ Z_{θ_T} x_T`, zero without terminal weights.
    pub terminal_cost: f64,
    pub total_cost: f64,
}

impl ClosedLoopTrajectory {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// `x_k` for `k = 0..=T`.
    pub fn state(&self, k: usize) -> &DVector<f64> {
        self.steps.get(k).map_or(&self.final_state, |s| &s.x)
    }

    /// `‖x_k‖²` for `k = 0..=T`.
    pub fn squared_norms(&self) -> Vec<f64> {
        (0..=self.horizon()).map(|k| self.state(k).norm_squared()).collect()
    }

    /// Recomputes every `x_{k+1}` and `z_k` from the stored `(x_k, θ_k, u_k)`
    /// and compares bitwise.
    pub fn dynamics_hold(&self, model: &MjlsModel) -> bool {
        self.steps.iter().enumerate().all(|(k, s)| {
            let m = model.mode(s.theta);
            let next = &m.a * &s.x + &m.b * &s.u;
            let z = &m.c * &s.x + &m.d * &s.u;
            next == *self.state(k + 1) && z == s.z
        })
    }

    /// CSV with header `k,theta,vertex,x_1..,u_1..,cost_stage,cost_cum`.
    /// Modes and vertices are 1-based; a mixture step shows `mix`. The last
    /// row holds `x_T` and the terminal cost.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), SimulationError> {
        let nx = self.final_state.len();
        let nu = self.steps.first().map_or(0, |s| s.u.len());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["k".to_string(), "theta".into(), "vertex".into()];
        header.extend((1..=nx).map(|i| format!("x_{i}")));
        header.extend((1..=nu).map(|i| format!("u_{i}")));
        header.extend(["cost_stage".to_string(), "cost_cum".into()]);
        w.write_record(&header)?;
        let mut cum = 0.0;
        for s in &self.steps {
            cum += s.stage_cost;
            let mut row = vec![
                s.k.to_string(),
                (s.theta + 1).to_string(),
                match &s.choice {
                    AdversaryChoice::Vertex(v) => (v + 1).to_string(),
                    AdversaryChoice::Mixture(_) => "mix".into(),
                },
            ];
            row.extend(s.x.iter().map(f64::to_string));
            row.extend(s.u.iter().map(f64::to_string));
            row.extend([s.stage_cost.to_string(), cum.to_string()]);
            w.write_record(&row)?;
        }
        let mut row = vec![self.horizon().to_string(), (self.final_mode + 1).to_string(), String::new()];
        row.extend(self.final_state.iter().map(f64::to_string));
        row.extend((0..nu).map(|_| String::new()));
        row.extend([self.terminal_cost.to_string(), self.total_cost.to_string()]);
        w.write_record(&row)?;
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Inverse-CDF draw from a probability row, scanning modes in index order.
pub fn sample_mode(row: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    let mut last = 0;
    for (j, &p) in row.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last = j;
            if u < cum {
                return j;
            }
        }
    }
    last
}

fn generator(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Greedy vertex: `argmax_v max_l Σ_j p_{θj}^(v) x⁺ᵀ X_j^(l) x⁺`.
fn greedy_vertex(
    polytope: &TpmPolytope,
    branches: &Branches<'_>,
    theta: usize,
    next: &DVector<f64>,
) -> usize {
    let n = polytope.n_modes();
    let forms: Vec<Vec<f64>> = (0..branches.len())
        .map(|l| (0..n).map(|j| quad_form(branches.x(l, j), next)).collect())
        .collect();
    let mut best = (0, f64::NEG_INFINITY);
    for (v, p) in polytope.vertices().iter().enumerate() {
        let value = forms
            .iter()
            .map(|q| (0..n).map(|j| p[(theta, j)] * q[j]).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max);
        if value > best.1 {
            best = (v, value);
        }
    }
    best.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOptions {
    pub horizon: usize,
    /// Terminal weights charged at `T`; defaults to the finite-horizon
    /// solution's own weights, and to none for other controllers.
    pub terminal: Option<TerminalWeights>,
}

impl SimulationOptions {
    pub fn new(horizon: usize) -> Self {
        Self {
            horizon,
            terminal: None,
        }
    }
}

fn check_inputs(
    model: &MjlsModel,
    polytope: &TpmPolytope,
    controller: &Controller<'_>,
    adversary: &AdversaryPolicy,
    x0: &DVector<f64>,
    opts: &SimulationOptions,
) -> Result<(), SimulationError> {
    controller.check(model, opts.horizon)?;
    if x0.len() != model.dims().nx {
        return Err(SimulationError::Input(format!(
            "x0 has length {}, expected {}",
            x0.len(),
            model.dims().nx
        )));
    }
    if polytope.n_modes() != model.n_modes() {
        return Err(SimulationError::Input(format!(
            "polytope has {} modes, model has {}",
            polytope.n_modes(),
            model.n_modes()
        )));
    }
    match adversary {
        AdversaryPolicy::FixedVertex { vertex } if *vertex >= polytope.n_vertices() => {
            Err(SimulationError::VertexOutOfRange {
                vertex: vertex + 1,
                count: polytope.n_vertices(),
            })
        }
        AdversaryPolicy::GreedyWorstCase if matches!(controller, Controller::FixedGains(_)) => {
            Err(SimulationError::NoValueFunction)
        }
        _ => Ok(()),
    }
}

#[allow(clippy::too_many_arguments)]
fn run(
    model: &MjlsModel,
    polytope: &TpmPolytope,
    controller: &Controller<'_>,
    adversary: &AdversaryPolicy,
    x0: &DVector<f64>,
    theta0: usize,
    opts: &SimulationOptions,
    rng: &mut ChaCha8Rng,
    mixture_rng: &mut ChaCha8Rng,
) -> ClosedLoopTrajectory {
    let n_vertices = polytope.n_vertices();
    let dirichlet = (n_vertices > 1).then(|| {
        Dirichlet::new_with_size(1.0, n_vertices).expect("flat Dirichlet with size ≥ 2")
    });
    let mut x = x0.clone();
    let mut theta = theta0;
    let mut steps = Vec::with_capacity(opts.horizon);
    let mut total = 0.0;
    for k in 0..opts.horizon {
        let m = model.mode(theta);
        let u = controller.input(k, &x, theta);
        let z = &m.c * &x + &m.d * &u;
        let next = &m.a * &x + &m.b * &u;
        let (choice, row): (AdversaryChoice, Vec<f64>) = match adversary {
            AdversaryPolicy::FixedVertex { vertex } => {
                let p = polytope.vertex(*vertex);
                (AdversaryChoice::Vertex(*vertex), p.row(theta).iter().copied().collect())
            }
            AdversaryPolicy::GreedyWorstCase => {
                let branches = controller.branches_at(k + 1).expect("checked");
                let v = greedy_vertex(polytope, &branches, theta, &next);
                (AdversaryChoice::Vertex(v), polytope.vertex(v).row(theta).iter().copied().collect())
            }
            AdversaryPolicy::RandomMixture { .. } => {
                let weights = match &dirichlet {
                    Some(d) => d.sample(mixture_rng),
                    None => vec![1.0],
                };
                let p = polytope.mixture(&weights);
                let row = p.row(theta).iter().copied().collect();
                (AdversaryChoice::Mixture(weights), row)
            }
        };
        let stage_cost = z.norm_squared();
        total += stage_cost;
        let draw: f64 = rng.gen();
        let next_theta = sample_mode(&row, draw);
        steps.push(TrajectoryStep {
            k,
            theta,
            choice,
            x,
            u,
            z,
            stage_cost,
        });
        x = next;
        theta = next_theta;
    }
    let terminal_cost = opts
        .terminal
        .as_ref()
        .or(controller.terminal())
        .map_or(0.0, |zw| quad_form(&zw.0[theta], &x));
    ClosedLoopTrajectory {
        steps,
        final_state: x,
        final_mode: theta,
        terminal_cost,
        total_cost: total + terminal_cost,
    }
}

fn mixture_seed(adversary: &AdversaryPolicy) -> u64 {
    match adversary {
        AdversaryPolicy::RandomMixture { seed } => *seed,
        _ => 0,
    }
}

/// One closed-loop run from a known initial mode (0-based).
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    model: &MjlsModel,
    polytope: &TpmPolytope,
    controller: &Controller<'_>,
    adversary: &AdversaryPolicy,
    x0: &DVector<f64>,
    theta0: usize,
    opts: &SimulationOptions,
    seed: u64,
) -> Result<ClosedLoopTrajectory, SimulationError> {
    check_inputs(model, polytope, controller, adversary, x0, opts)?;
    if theta0 >= model.n_modes() {
        return Err(SimulationError::Input(format!(
            "mode {} out of range 1..={}",
            theta0 + 1,
            model.n_modes()
        )));
    }
    let mut rng = generator(seed, 0);
    let mut mixture_rng = generator(mixture_seed(adversary), 0);
    Ok(run(
        model,
        polytope,
        controller,
        adversary,
        x0,
        theta0,
        opts,
        &mut rng,
        &mut mixture_rng,
    ))
}

/// Sample mean and standard error of realized costs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McSummary {
    pub mean: f64,
    pub stderr: f64,
    pub n_runs: usize,
    pub seed: u64,
}

impl McSummary {
    pub fn from_costs(costs: &[f64], seed: u64) -> Self {
        let n = costs.len();
        let mean = costs.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = costs.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            stderr,
            n_runs: n,
            seed,
        }
    }
}

/// `n_runs` independent trajectories; run `r` uses generator stream `r`.
/// With a mode distribution, `θ_0` is drawn from it first on the same stream.
#[allow(clippy::too_many_arguments)]
pub fn simulate_many(
    model: &MjlsModel,
    polytope: &TpmPolytope,
    controller: &Controller<'_>,
    adversary: &AdversaryPolicy,
    x0: &DVector<f64>,
    mode: &ModeInfo,
    opts: &SimulationOptions,
    n_runs: usize,
    seed: u64,
) -> Result<Vec<ClosedLoopTrajectory>, SimulationError> {
    check_inputs(model, polytope, controller, adversary, x0, opts)?;
    mode.check(model.n_modes())
        .map_err(|e| SimulationError::Input(e.to_string()))?;
    if n_runs == 0 {
        return Err(SimulationError::Input("n_runs must be at least 1".into()));
    }
    let weights = mode.weights(model.n_modes());
    Ok((0..n_runs as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = generator(seed, r);
            let mut mixture_rng = generator(mixture_seed(adversary), r);
            let theta0 = match mode {
                ModeInfo::Known(i) => *i,
                ModeInfo::Distribution(_) => sample_mode(&weights, rng.gen()),
            };
            run(
                model,
                polytope,
                controller,
                adversary,
                x0,
                theta0,
                opts,
                &mut rng,
                &mut mixture_rng,
            )
        })
        .collect())
}

/// Monte Carlo estimate of the expected realized cost.
#[allow(clippy::too_many_arguments)]
pub fn monte_carlo_cost(
    model: &MjlsModel,
    polytope: &TpmPolytope,
    controller: &Controller<'_>,
    adversary: &AdversaryPolicy,
    x0: &DVector<f64>,
    mode: &ModeInfo,
    opts: &SimulationOptions,
    n_runs: usize,
    seed: u64,
) -> Result<McSummary, SimulationError> {
    let costs: Vec<f64> =
        simulate_many(model, polytope, controller, adversary, x0, mode, opts, n_runs, seed)?
            .iter()
            .map(|t| t.total_cost)
            .collect();
    Ok(McSummary::from_costs(&costs, seed))
}

/// Fitted geometric rate of `E‖x_k‖²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecayEstimate {
    Rate { rate: f64, points: usize },
    /// Every per-step mean in the window is numerically zero.
    BelowFloor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayFit {
    pub estimate: DecayEstimate,
    /// Certified JSR bound for comparison, when known.
    pub certified: Option<f64>,
}

impl DecayFit {
    pub fn rate(&self) -> Option<f64> {
        match self.estimate {
            DecayEstimate::Rate { rate, .. } => Some(rate),
            DecayEstimate::BelowFloor => None,
        }
    }
}

/// Least-squares slope of `ln mean_k ‖x_k‖²` over `k ∈ [burn_in, T]`,
/// reported as the rate `exp(slope)`.
pub fn empirical_decay(
    trajectories: &[ClosedLoopTrajectory],
    burn_in: usize,
    certified: Option<f64>,
) -> Result<DecayFit, SimulationError> {
    if trajectories.len() < MIN_DECAY_TRAJECTORIES {
        return Err(SimulationError::TooFewTrajectories {
            required: MIN_DECAY_TRAJECTORIES,
            found: trajectories.len(),
        });
    }
    let horizon = trajectories.iter().map(ClosedLoopTrajectory::horizon).min().unwrap_or(0);
    if horizon <= burn_in + 10 {
        return Err(SimulationError::ShortHorizon { horizon, burn_in });
    }
    let n = trajectories.len() as f64;
    let points: Vec<(f64, f64)> = (burn_in..=horizon)
        .filter_map(|k| {
            let mean = trajectories
                .iter()
                .map(|t| t.state(k).norm_squared())
                .sum::<f64>()
                / n;
            (mean > DECAY_FLOOR && mean.is_finite()).then(|| (k as f64, mean.ln()))
        })
        .collect();
    if points.len() < 2 {
        return Ok(DecayFit {
            estimate: DecayEstimate::BelowFloor,
            certified,
        });
    }
    let m = points.len() as f64;
    let (sk, sy) = points.iter().fold((0.0, 0.0), |(a, b), (k, y)| (a + k, b + y));
    let (mk, my) = (sk / m, sy / m);
    let (num, den) = points.iter().fold((0.0, 0.0), |(a, b), (k, y)| {
        (a + (k - mk) * (y - my), b + (k - mk) * (k - mk))
    });
    Ok(DecayFit {
        estimate: DecayEstimate::Rate {
            rate: (num / den).exp(),
            points: points.len(),
        },
        certified,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::example::samuelson;
    use crate::model::ModeMatrices;

    fn scalar(a: f64, b: f64) -> (MjlsModel, TpmPolytope) {
        let model = MjlsModel::new(vec![ModeMatrices::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        )])
        .unwrap();
        let poly = TpmPolytope::new(vec![DMatrix::identity(1, 1)]).unwrap();
        (model, poly)
    }

    #[test]
    fn autonomous_scalar_decays_exactly() {
        let (model, poly) = scalar(0.5, 0.0);
        let gains = [DMatrix::zeros(1, 1)];
        let traj = simulate(
            &model,
            &poly,
            &Controller::FixedGains(&gains),
            &AdversaryPolicy::FixedVertex { vertex: 0 },
            &DVector::from_element(1, 1.0),
            0,
            &SimulationOptions::new(10),
            7,
        )
        .unwrap();
        for (k, s) in traj.steps.iter().enumerate() {
            assert_eq!(s.x[0], 0.5f64.powi(k as i32));
            assert_eq!(s.stage_cost, 0.25f64.powi(k as i32));
        }
        assert_eq!(traj.final_state[0], 0.5f64.powi(10));
        assert!(traj.dynamics_hold(&model));
    }

    #[test]
    fn identity_vertex_is_absorbing() {
        let p = samuelson();
        let gains = vec![DMatrix::zeros(1, 2); 3];
        let traj = simulate(
            &p.model,
            &p.polytope,
            &Controller::FixedGains(&gains),
            &AdversaryPolicy::FixedVertex { vertex: 3 },
            &DVector::from_vec(vec![1.0, 1.0]),
            1,
            &SimulationOptions::new(20),
            1,
        )
        .unwrap();
        assert!(traj.steps.iter().all(|s| s.theta == 1));
        assert_eq!(traj.final_mode, 1);
    }

    #[test]
    fn inverse_cdf_sampling() {
        let row = [0.2, 0.0, 0.5, 0.3];
        assert_eq!(sample_mode(&row, 0.0), 0);
        assert_eq!(sample_mode(&row, 0.199), 0);
        assert_eq!(sample_mode(&row, 0.2), 2);
        assert_eq!(sample_mode(&row, 0.71), 3);
        assert_eq!(sample_mode(&row, 0.999_999_999), 3);
    }

    #[test]
    fn deterministic_chain_has_zero_stderr() {
        let (model, poly) = scalar(0.9, 1.0);
        let gains = [DMatrix::from_element(1, 1, -0.4)];
        let s = monte_carlo_cost(
            &model,
            &poly,
            &Controller::FixedGains(&gains),
            &AdversaryPolicy::RandomMixture { seed: 3 },
            &DVector::from_element(1, 2.0),
            &ModeInfo::Known(0),
            &SimulationOptions::new(5),
            25,
            11,
        )
        .unwrap();
        assert_eq!(s.stderr, 0.0);
        assert_eq!(s.n_runs, 25);
    }

    #[test]
    fn greedy_requires_value_function() {
        let (model, poly) = scalar(0.9, 1.0);
        let gains = [DMatrix::zeros(1, 1)];
        let err = simulate(
            &model,
            &poly,
            &Controller::FixedGains(&gains),
            &AdversaryPolicy::GreedyWorstCase,
            &DVector::from_element(1, 1.0),
            0,
            &SimulationOptions::new(3),
            0,
        )
        .unwrap_err();
        assert!(matches!(err, SimulationError::NoValueFunction));
    }

    #[test]
    fn csv_layout() {
        let (model, poly) = scalar(0.5, 1.0);
        let gains = [DMatrix::from_element(1, 1, -0.25)];
        let traj = simulate(
            &model,
            &poly,
            &Controller::FixedGains(&gains),
            &AdversaryPolicy::FixedVertex { vertex: 0 },
            &DVector::from_element(1, 1.0),
            0,
            &SimulationOptions::new(2),
            0,
        )
        .unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "k,theta,vertex,x_1,u_1,cost_stage,cost_cum");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0,1,1,1,-0.25,"));
        assert!(lines[3].starts_with("2,1,,"));
    }

    #[test]
    fn decay_needs_enough_data() {
        let (model, poly) = scalar(0.5, 0.0);
        let gains = [DMatrix::zeros(1, 1)];
        let runs = simulate_many(
            &model,
            &poly,
            &Controller::FixedGains(&gains),
            &AdversaryPolicy::FixedVertex { vertex: 0 },
            &DVector::from_element(1, 1.0),
            &ModeInfo::Known(0),
            &SimulationOptions::new(30),
            MIN_DECAY_TRAJECTORIES,
            0,
        )
        .unwrap();
        let fit = empirical_decay(&runs, 5, None).unwrap();
        assert!((fit.rate().unwrap() - 0.25).abs() < 1e-12);
        assert!(matches!(
            empirical_decay(&runs[..10], 5, None),
            Err(SimulationError::TooFewTrajectories { .. })
        ));
        assert!(matches!(
            empirical_decay(&runs, 25, None),
            Err(SimulationError::ShortHorizon { .. })
        ));
        let (zero_model, _) = scalar(0.0, 0.0);
        let zero_runs = simulate_many(
            &zero_model,
            &poly,
            &Controller::FixedGains(&gains),
            &AdversaryPolicy::FixedVertex { vertex: 0 },
            &DVector::from_element(1, 1.0),
            &ModeInfo::Known(0),
            &SimulationOptions::new(30),
            MIN_DECAY_TRAJECTORIES,
            0,
        )
        .unwrap();
        assert_eq!(
            empirical_decay(&zero_runs, 5, None).unwrap().estimate,
            DecayEstimate::BelowFloor
        );
    }
}
