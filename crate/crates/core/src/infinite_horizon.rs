//! Stabilizing solution of the coupled algebraic Riccati equations over a
//! polytope of transition matrices.
//!
//! One set of coupled equations is solved per vertex, with the vertex as a
//! stationary transition matrix. Solutions dominated in the PSD order by
//! another vertex's solution are dropped, and each survivor's closed loop
//! must be certified mean-square stable over the whole polytope.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::finite_horizon::{
    check_mode, check_state, parsimonious_indices, PRUNE_TOL, riccati_update, solve_finite_horizon,
    CostEvaluation, FiniteHorizonError, FiniteHorizonOptions, RiccatiUpdate,
};
use crate::linalg::{quad_form, spectral_norm, to_rows};
use crate::model::{ModeInfo, ModeMatrices, MjlsModel, TerminalWeights, TpmPolytope};
use crate::stability::{
    jsr_bounds, lift_filter, verify_stabilizing, JsrCertificate, JsrOptions, StabilityError,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CareError {
    #[error(
        "coupled Riccati iteration for vertex {vertex} did not converge after {iterations} \
         iterations (residual {residual:.3e}); the vertex system is not mean-square \
         stabilizable and detectable"
    )]
    NoConvergence {
        vertex: usize,
        iterations: usize,
        residual: f64,
    },
    #[error(
        "singular Riccati bracket for vertex {vertex}, mode {mode} at iteration {iteration} \
         (condition {condition:.3e})"
    )]
    SingularBracket {
        vertex: usize,
        mode: usize,
        iteration: usize,
        condition: f64,
    },
    #[error("stabilizing solution is not certified: branch from vertex {vertex} has JSR upper bound {upper:.6}")]
    Uncertified { vertex: usize, upper: f64 },
    #[error(transparent)]
    Stability(#[from] StabilityError),
    #[error(transparent)]
    FiniteHorizon(#[from] FiniteHorizonError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CareOptions {
    /// Relative fixed-point residual at which iteration stops.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CareOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 100_000,
        }
    }
}

/// Converged solution for one stationary transition matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexCare {
    pub x: Vec<DMatrix<f64>>,
    pub k: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
    pub iterations: usize,
    pub residual: f64,
}

/// `max_i ‖X_i − Y_i‖ / (1 + ‖X_i‖)`.
pub fn relative_residual(x: &[DMatrix<f64>], y: &[DMatrix<f64>]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| spectral_norm(&(a - b)) / (1.0 + spectral_norm(a)))
        .fold(0.0, f64::max)
}

/// Value iteration of the coupled Riccati operator from `X = 0`.
///
/// `vertex` (1-based) only labels errors.
pub fn solve_vertex_care(
    model: &MjlsModel,
    tpm: &DMatrix<f64>,
    vertex: usize,
    opts: &CareOptions,
) -> Result<VertexCare, CareError> {
    let nx = model.dims().nx;
    let n = model.n_modes();
    let apply = |x: &[DMatrix<f64>], iteration: usize| -> Result<RiccatiUpdate, CareError> {
        riccati_update(model, tpm, x).map_err(|f| CareError::SingularBracket {
            vertex,
            mode: f.mode + 1,
            iteration,
            condition: f.condition,
        })
    };
    let mut x = vec![DMatrix::zeros(nx, nx); n];
    let mut residual = f64::INFINITY;
    for iteration in 1..=opts.max_iter {
        let next = apply(&x, iteration)?;
        residual = relative_residual(&next.x, &x);
        if !residual.is_finite() || next.x.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(CareError::NoConvergence {
                vertex,
                iterations: iteration,
                residual,
            });
        }
        x = next.x;
        if residual <= opts.tol {
            let at = apply(&x, iteration + 1)?;
            return Ok(VertexCare {
                residual: relative_residual(&x, &at.x),
                k: at.k,
                r: at.r,
                x,
                iterations: iteration,
            });
        }
    }
    Err(CareError::NoConvergence {
        vertex,
        iterations: opts.max_iter,
        residual,
    })
}

/// One retained solution, labelled by its source vertex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CareBranch {
    /// Source vertex (0-based).
    pub vertex: usize,
    #[serde(with = "matrix_seq")]
    pub x: Vec<DMatrix<f64>>,
    #[serde(with = "matrix_seq")]
    pub k: Vec<DMatrix<f64>>,
    #[serde(with = "matrix_seq")]
    pub r: Vec<DMatrix<f64>>,
    pub certificate: JsrCertificate,
    pub iterations: usize,
    pub residual: f64,
}

impl CareBranch {
    pub fn certified(&self) -> bool {
        self.certificate.certifies_stability()
    }

    pub fn weighted_x(&self, weights: &[f64]) -> DMatrix<f64> {
        let nx = self.x[0].nrows();
        crate::linalg::weighted_sum(weights, &self.x, nx, nx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discarded {
    /// Dropped vertex (0-based).
    pub vertex: usize,
    /// Vertex whose solution dominates it (0-based).
    pub dominated_by: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilizingSolution {
    pub branches: Vec<CareBranch>,
    pub discarded: Vec<Discarded>,
    /// Every retained branch has a JSR upper bound below one.
    pub certified: bool,
}

impl StabilizingSolution {
    pub fn require_certified(&self) -> Result<(), CareError> {
        match self.branches.iter().find(|b| !b.certified()) {
            Some(b) => Err(CareError::Uncertified {
                vertex: b.vertex + 1,
                upper: b.certificate.upper,
            }),
            None if self.branches.is_empty() => Err(CareError::Uncertified {
                vertex: 0,
                upper: f64::INFINITY,
            }),
            None => Ok(()),
        }
    }

    /// Solution reduced to a single branch, e.g. to force one control law.
    pub fn restrict(&self, branch: usize) -> Self {
        let b = self.branches[branch].clone();
        Self {
            certified: b.certified(),
            branches: vec![b],
            discarded: Vec::new(),
        }
    }

    pub fn gain_sets(&self) -> Vec<Vec<DMatrix<f64>>> {
        self.branches.iter().map(|b| b.k.clone()).collect()
    }

    /// Largest certified upper bound over the branches.
    pub fn zeta(&self) -> f64 {
        self.branches
            .iter()
            .map(|b| b.certificate.upper)
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InfiniteHorizonOptions {
    pub care: CareOptions,
    pub jsr: JsrOptions,
}

pub fn stabilizing_solution(
    model: &MjlsModel,
    polytope: &TpmPolytope,
    opts: &InfiniteHorizonOptions,
) -> Result<StabilizingSolution, CareError> {
    let solved: Vec<VertexCare> = polytope
        .vertices()
        .iter()
        .enumerate()
        .map(|(v, tpm)| solve_vertex_care(model, tpm, v + 1, &opts.care))
        .collect::<Result<_, _>>()?;

    let sets: Vec<&[DMatrix<f64>]> = solved.iter().map(|s| s.x.as_slice()).collect();
    let verdicts = parsimonious_indices(&sets, PRUNE_TOL, |i| i);
    let discarded = verdicts
        .iter()
        .filter_map(|&(v, by)| by.map(|h| Discarded { vertex: v, dominated_by: h }))
        .collect();

    let retained: Vec<(usize, VertexCare)> = solved
        .into_iter()
        .enumerate()
        .filter(|(v, _)| verdicts[*v].1.is_none())
        .collect();
    let gain_sets: Vec<Vec<DMatrix<f64>>> = retained.iter().map(|(_, s)| s.k.clone()).collect();
    let certificates = verify_stabilizing(model, polytope, &gain_sets, &opts.jsr)?;

    let branches: Vec<CareBranch> = retained
        .into_iter()
        .zip(certificates)
        .map(|((vertex, s), certificate)| CareBranch {
            vertex,
            x: s.x,
            k: s.k,
            r: s.r,
            certificate,
            iterations: s.iterations,
            residual: s.residual,
        })
        .collect();
    let certified = branches.iter().all(CareBranch::certified);
    Ok(StabilizingSolution {
        branches,
        discarded,
        certified,
    })
}

/// `max_l x0ᵀ(Σ_i p_i X̂_i^(l))x0` and the selected branch.
pub fn infinite_cost(
    solution: &StabilizingSolution,
    x0: &DVector<f64>,
    mode: &ModeInfo,
) -> Result<CostEvaluation, CareError> {
    solution.require_certified()?;
    let first = &solution.branches[0];
    check_state(x0, first.x[0].nrows())?;
    check_mode(mode, first.x.len())?;
    let p = mode.weights(first.x.len());
    Ok(CostEvaluation::from_values(
        solution
            .branches
            .iter()
            .map(|b| quad_form(&b.weighted_x(&p), x0))
            .collect(),
    ))
}

/// Steady-state law `u = K̂_θ^(v̂) x` with `v̂` the branch attaining the cost.
pub fn steady_policy(
    solution: &StabilizingSolution,
    x: &DVector<f64>,
    theta: usize,
) -> Result<DVector<f64>, CareError> {
    let eval = infinite_cost(solution, x, &ModeInfo::Known(theta))?;
    Ok(&solution.branches[eval.argmax].k[theta] * x)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub horizon: usize,
    pub finite_cost: f64,
    pub infinite_cost: f64,
    /// `J_T − Ĵ_∞`, raw.
    pub gap: f64,
    /// `E(‖X̂_θ0^(v̂0)‖ + β ζᵀ max_j ‖Z_j‖) ‖x0‖²` with `β = n_x N`.
    pub lemma_bound: f64,
    pub beta: f64,
    pub zeta: f64,
}

pub fn convergence_report(
    model: &MjlsModel,
    polytope: &TpmPolytope,
    solution: &StabilizingSolution,
    z: &TerminalWeights,
    horizon: usize,
    x0: &DVector<f64>,
    mode: &ModeInfo,
) -> Result<ConvergenceReport, CareError> {
    let finite = solve_finite_horizon(model, polytope, z, horizon, &FiniteHorizonOptions::default())?;
    let jt = finite.cost(x0, mode)?;
    let jinf = infinite_cost(solution, x0, mode)?;
    let n = model.n_modes();
    let beta = (model.dims().nx * n) as f64;
    let zeta = solution.zeta();
    let p = mode.weights(n);
    let selected = &solution.branches[jinf.argmax];
    let x_term: f64 = p
        .iter()
        .zip(&selected.x)
        .map(|(pi, xi)| pi * spectral_norm(xi))
        .sum();
    let z_max = z.0.iter().map(spectral_norm).fold(0.0, f64::max);
    let lemma_bound =
        (x_term + beta * zeta.powi(horizon as i32) * z_max) * x0.norm_squared();
    Ok(ConvergenceReport {
        horizon,
        finite_cost: jt.value,
        infinite_cost: jinf.value,
        gap: jt.value - jinf.value,
        lemma_bound,
        beta,
        zeta,
    })
}

/// Filter gains `G_i` found constructively and their certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectabilityReport {
    /// Vertex (0-based) whose dual Riccati solution produced the gains.
    pub vertex: usize,
    pub gains: Vec<DMatrix<f64>>,
    pub certificate: JsrCertificate,
}

impl DetectabilityReport {
    pub fn detectable(&self) -> bool {
        self.certificate.certifies_stability()
    }
}

/// Dual data `(A_iᵀ, C_iᵀ)` with unit weights, whose Riccati gains transpose
/// into output-injection gains.
fn dual_model(model: &MjlsModel) -> MjlsModel {
    let d = model.dims();
    let modes = model
        .modes()
        .iter()
        .map(|m| {
            let mut c = DMatrix::zeros(d.nx + d.nz, d.nx);
            c.view_mut((0, 0), (d.nx, d.nx)).fill_with_identity();
            let mut dd = DMatrix::zeros(d.nx + d.nz, d.nz);
            dd.view_mut((d.nx, 0), (d.nz, d.nz)).fill_with_identity();
            ModeMatrices::new(m.a.transpose(), m.c.transpose(), c, dd)
        })
        .collect();
    MjlsModel::new(modes).expect("dual dimensions are consistent")
}

/// Mean-square detectability by synthesis: for each vertex in turn, solve the
/// dual Riccati equations, form `G_i = K_iᵀ`, and certify `A_i + G_i C_i`
/// over the polytope. Returns the first certified attempt, or the attempt
/// with the smallest upper bound.
pub fn check_detectability(
    model: &MjlsModel,
    polytope: &TpmPolytope,
    opts: &InfiniteHorizonOptions,
) -> Result<DetectabilityReport, CareError> {
    let dual = dual_model(model);
    let mut best: Option<DetectabilityReport> = None;
    let mut last_err = None;
    for (v, tpm) in polytope.vertices().iter().enumerate() {
        let sol = match solve_vertex_care(&dual, tpm, v + 1, &opts.care) {
            Ok(s) => s,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let gains: Vec<DMatrix<f64>> = sol.k.iter().map(|k| k.transpose()).collect();
        let certificate = jsr_bounds(&lift_filter(model, polytope, &gains)?, &opts.jsr)?;
        let report = DetectabilityReport {
            vertex: v,
            gains,
            certificate,
        };
        if report.detectable() {
            return Ok(report);
        }
        if best.as_ref().is_none_or(|b| certificate.upper < b.certificate.upper) {
            best = Some(report);
        }
    }
    match (best, last_err) {
        (Some(b), _) => Ok(b),
        (None, Some(e)) => Err(e),
        (None, None) => unreachable!("polytope has at least one vertex"),
    }
}

/// Row-major (de)serialization of per-mode matrix sequences.
pub(crate) mod matrix_seq {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<Vec<f64>>> = m.iter().map(to_rows).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
        let rows = Vec::<Vec<Vec<f64>>>::deserialize(d)?;
        rows.iter()
            .map(|r| {
                crate::linalg::from_rows(r)
                    .ok_or_else(|| serde::de::Error::custom("ragged matrix rows"))
            })
            .collect()
    }
}
