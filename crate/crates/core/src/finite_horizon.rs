//! Finite-horizon min-max control by backward coupled Riccati recursion.
//!
//! Each backward step applies the coupled Riccati operator once per
//! (polytope vertex, surviving branch) pair. Candidates that are dominated in
//! the positive-semidefinite order for every mode can never attain the
//! worst-case cost and are pruned, leaving a parsimonious set.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{min_sym_eigenvalue, quad_form, spectral_norm, sym_eigenvalues, symmetrize};
use crate::model::{propagate_distribution, MjlsModel, ModeInfo, TerminalWeights, TpmPolytope};

/// Brackets with a condition number at or above this are treated as singular.
pub const MAX_BRACKET_CONDITION: f64 = 1e12;
/// Default cap on candidates generated at one step.
pub const DEFAULT_BRANCH_BUDGET: usize = 10_000;
/// Relative slack of the dominance test, scaled by `1 + max_i ‖X_i‖`.
pub const PRUNE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FiniteHorizonError {
    #[error(
        "singular Riccati bracket D'D + B'(sum_j p_ij X_j)B at step {step}, vertex {vertex}, \
         branch {branch}, mode {mode} (condition {condition:.3e})"
    )]
    SingularBracket {
        step: usize,
        vertex: usize,
        branch: usize,
        mode: usize,
        condition: f64,
    },
    #[error("branch budget exceeded at step {step}: {count} candidates > {budget}")]
    BranchBudget {
        step: usize,
        count: usize,
        budget: usize,
    },
    #[error("horizon must be at least 1")]
    EmptyHorizon,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("empty branch set")]
    EmptySet,
}

/// Failure of one coupled Riccati evaluation, before step context is attached.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BracketFailure {
    /// 0-based mode.
    pub mode: usize,
    pub condition: f64,
}

/// Output of one application of the coupled Riccati operator.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiUpdate {
    pub x: Vec<DMatrix<f64>>,
    pub k: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
}

fn bracket_condition(m: &DMatrix<f64>) -> f64 {
    let ev = sym_eigenvalues(m);
    let (lo, hi) = (ev[0], ev[ev.len() - 1]);
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// One step of the coupled Riccati operator for a fixed transition matrix:
///
/// ```text
/// E_i = Σ_j p_ij X_j
/// R_i = (D_iᵀD_i + B_iᵀ E_i B_i)⁻¹
/// K_i = −R_i B_iᵀ E_i A_i
/// X_i = C_iᵀC_i + A_iᵀ E_i A_i + A_iᵀ E_i B_i K_i
/// ```
pub fn riccati_update(
    model: &MjlsModel,
    tpm: &DMatrix<f64>,
    x_next: &[DMatrix<f64>],
) -> Result<RiccatiUpdate, BracketFailure> {
    let n = model.n_modes();
    let nx = model.dims().nx;
    let mut out = RiccatiUpdate {
        x: Vec::with_capacity(n),
        k: Vec::with_capacity(n),
        r: Vec::with_capacity(n),
    };
    for (i, m) in model.modes().iter().enumerate() {
        let weights: Vec<f64> = (0..n).map(|j| tpm[(i, j)]).collect();
        let e = crate::linalg::weighted_sum(&weights, x_next, nx, nx);
        let eb = &e * &m.b;
        let bracket = symmetrize(&(m.d.transpose() * &m.d + m.b.transpose() * &eb));
        let condition = if bracket.is_empty() { 1.0 } else { bracket_condition(&bracket) };
        if condition.is_nan() || condition >= MAX_BRACKET_CONDITION {
            return Err(BracketFailure { mode: i, condition });
        }
        let r = symmetrize(
            &bracket
                .clone()
                .try_inverse()
                .ok_or(BracketFailure { mode: i, condition })?,
        );
        let k = -(&r * eb.transpose() * &m.a);
        let at = m.a.transpose();
        let x = &m.c.transpose() * &m.c + &at * &e * &m.a + &at * &eb * &k;
        out.x.push(symmetrize(&x));
        out.k.push(k);
        out.r.push(r);
    }
    Ok(out)
}

/// One candidate solution of the backward recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiBranch {
    pub x: Vec<DMatrix<f64>>,
    /// Per-mode gains; empty for the terminal branch.
    pub k: Vec<DMatrix<f64>>,
    /// Per-mode inverse brackets; empty for the terminal branch.
    pub r: Vec<DMatrix<f64>>,
    /// Vertices (0-based) that produced each backward step, most recent first.
    pub lineage: Vec<usize>,
}

impl RiccatiBranch {
    /// `Σ_i p_i X_i`.
    pub fn weighted_x(&self, weights: &[f64]) -> DMatrix<f64> {
        let nx = self.x[0].nrows();
        crate::linalg::weighted_sum(weights, &self.x, nx, nx)
    }
}

/// Surviving branches at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsimoniousSet {
    pub step: usize,
    pub branches: Vec<RiccatiBranch>,
    /// Candidates generated at this step before pruning.
    pub candidate_count: usize,
    pub pruned_count: usize,
}

impl ParsimoniousSet {
    /// The single terminal branch `X_i(T) = Z_i`.
    pub fn terminal(z: &TerminalWeights, horizon: usize) -> Self {
        Self {
            step: horizon,
            branches: vec![RiccatiBranch {
                x: z.0.clone(),
                k: Vec::new(),
                r: Vec::new(),
                lineage: Vec::new(),
            }],
            candidate_count: 1,
            pruned_count: 0,
        }
    }

    /// Unpruned set holding every candidate.
    pub fn unpruned(step: usize, candidates: Vec<RiccatiBranch>) -> Self {
        let candidate_count = candidates.len();
        Self {
            step,
            branches: candidates,
            candidate_count,
            pruned_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.branches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }
}

/// Candidates for step `next.step − 1`, ordered vertex-major then by parent.
pub fn cdre_step(
    next: &ParsimoniousSet,
    model: &MjlsModel,
    polytope: &TpmPolytope,
) -> Result<Vec<RiccatiBranch>, FiniteHorizonError> {
    let step = next.step.saturating_sub(1);
    let mut out = Vec::with_capacity(polytope.n_vertices() * next.len());
    for (v, tpm) in polytope.vertices().iter().enumerate() {
        for (l, parent) in next.branches.iter().enumerate() {
            let upd = riccati_update(model, tpm, &parent.x).map_err(|f| {
                FiniteHorizonError::SingularBracket {
                    step,
                    vertex: v + 1,
                    branch: l + 1,
                    mode: f.mode + 1,
                    condition: f.condition,
                }
            })?;
            let mut lineage = Vec::with_capacity(parent.lineage.len() + 1);
            lineage.push(v);
            lineage.extend_from_slice(&parent.lineage);
            out.push(RiccatiBranch {
                x: upd.x,
                k: upd.k,
                r: upd.r,
                lineage,
            });
        }
    }
    Ok(out)
}

/// `X_i^(hi) − X_i^(lo) ⪰ −tol·I` for every mode.
pub(crate) fn dominates(hi: &[DMatrix<f64>], lo: &[DMatrix<f64>], tol: f64) -> bool {
    let diagonal_ok = hi.iter().zip(lo).all(|(h, l)| {
        (0..h.nrows()).all(|r| h[(r, r)] - l[(r, r)] >= -tol)
    });
    diagonal_ok
        && hi
            .iter()
            .zip(lo)
            .all(|(h, l)| min_sym_eigenvalue(&(h - l)) >= -tol)
}

/// Indices of the items to keep under PSD dominance. Among mutually
/// dominating items the one with the smallest `rank` survives.
pub(crate) fn parsimonious_indices<K: Ord + Sync>(
    sets: &[&[DMatrix<f64>]],
    rel_tol: f64,
    rank: impl Fn(usize) -> K + Sync,
) -> Vec<(usize, Option<usize>)> {
    let n = sets.len();
    let scale: Vec<f64> = sets
        .iter()
        .map(|s| s.iter().map(spectral_norm).fold(0.0, f64::max))
        .collect();
    let tol = |a: usize, b: usize| rel_tol * (1.0 + scale[a].max(scale[b]));
    // (index, dominator) for every item; dominator is None when retained
    let mut verdicts: Vec<(usize, Option<usize>)> = (0..n)
        .into_par_iter()
        .map(|l| {
            let by = (0..n).find(|&h| {
                h != l
                    && dominates(sets[h], sets[l], tol(h, l))
                    && (rank(h) < rank(l) || !dominates(sets[l], sets[h], tol(h, l)))
            });
            (l, by)
        })
        .collect();
    if verdicts.iter().all(|(_, by)| by.is_some()) && n > 0 {
        // tolerance cycles only; keep the best ranked item
        let best = (0..n).min_by_key(|&i| rank(i)).unwrap_or(0);
        verdicts[best].1 = None;
    }
    verdicts
}

/// Discards every candidate dominated by another in the PSD order for all
/// modes, keeping the first (lexicographically smallest lineage) among
/// equivalent ones. Order of the survivors follows the candidate order.
pub fn prune_parsimonious(candidates: Vec<RiccatiBranch>, rel_tol: f64) -> ParsimoniousSet {
    let step_hint = 0;
    let candidate_count = candidates.len();
    let keep: Vec<bool> = {
        let sets: Vec<&[DMatrix<f64>]> = candidates.iter().map(|b| b.x.as_slice()).collect();
        parsimonious_indices(&sets, rel_tol, |i| candidates[i].lineage.as_slice())
            .into_iter()
            .map(|(_, by)| by.is_none())
            .collect()
    };
    let branches: Vec<RiccatiBranch> = candidates
        .into_iter()
        .zip(keep)
        .filter_map(|(b, k)| k.then_some(b))
        .collect();
    ParsimoniousSet {
        step: step_hint,
        pruned_count: candidate_count - branches.len(),
        candidate_count,
        branches,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiniteHorizonOptions {
    pub prune: bool,
    /// Dominance tolerance relative to `1 + max_i ‖X_i‖`.
    pub prune_tol: f64,
    pub branch_budget: usize,
}

impl Default for FiniteHorizonOptions {
    fn default() -> Self {
        Self {
            prune: true,
            prune_tol: PRUNE_TOL,
            branch_budget: DEFAULT_BRANCH_BUDGET,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StepProfile {
    pub step: usize,
    pub candidates: usize,
    pub retained: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteHorizonSolution {
    pub horizon: usize,
    /// Sets for `k = T−1` down to `0`.
    pub sets: Vec<ParsimoniousSet>,
    pub terminal: TerminalWeights,
}

impl FiniteHorizonSolution {
    /// Set for time step `k < T`.
    pub fn set_at(&self, k: usize) -> &ParsimoniousSet {
        &self.sets[self.horizon - 1 - k]
    }

    pub fn terminal_set(&self) -> ParsimoniousSet {
        ParsimoniousSet::terminal(&self.terminal, self.horizon)
    }

    /// Optimal cost `J_T` at step 0.
    pub fn cost(&self, x0: &DVector<f64>, mode: &ModeInfo) -> Result<CostEvaluation, FiniteHorizonError> {
        cost_to_go(self.set_at(0), x0, mode)
    }

    /// Cost at step `k` with the mode distribution propagated from `p0`
    /// through each branch's own producing vertex, `p^(v)(k) = p0 P_vᵏ`.
    pub fn a_priori_cost(
        &self,
        polytope: &TpmPolytope,
        k: usize,
        x: &DVector<f64>,
        p0: &[f64],
    ) -> Result<CostEvaluation, FiniteHorizonError> {
        let set = self.set_at(k);
        let branch_values: Vec<f64> = set
            .branches
            .iter()
            .map(|b| {
                let tpm = polytope.vertex(b.lineage[0]);
                let p = (0..k).fold(p0.to_vec(), |p, _| propagate_distribution(&p, tpm));
                quad_form(&b.weighted_x(&p), x)
            })
            .collect();
        Ok(CostEvaluation::from_values(branch_values))
    }
}

pub fn solve_finite_horizon(
    model: &MjlsModel,
    polytope: &TpmPolytope,
    z: &TerminalWeights,
    horizon: usize,
    opts: &FiniteHorizonOptions,
) -> Result<FiniteHorizonSolution, FiniteHorizonError> {
    if horizon == 0 {
        return Err(FiniteHorizonError::EmptyHorizon);
    }
    let nx = model.dims().nx;
    if z.0.len() != model.n_modes() || z.0.iter().any(|m| m.shape() != (nx, nx)) {
        return Err(FiniteHorizonError::Dimension(format!(
            "terminal weights must be {} matrices of size {nx}x{nx}",
            model.n_modes()
        )));
    }
    if polytope.n_modes() != model.n_modes() {
        return Err(FiniteHorizonError::Dimension(format!(
            "polytope has {} modes, model has {}",
            polytope.n_modes(),
            model.n_modes()
        )));
    }
    let mut sets = Vec::with_capacity(horizon);
    let mut next = ParsimoniousSet::terminal(z, horizon);
    for step in (0..horizon).rev() {
        let count = polytope.n_vertices() * next.len();
        if count > opts.branch_budget {
            return Err(FiniteHorizonError::BranchBudget {
                step,
                count,
                budget: opts.branch_budget,
            });
        }
        let candidates = cdre_step(&next, model, polytope)?;
        let mut set = if opts.prune {
            prune_parsimonious(candidates, opts.prune_tol)
        } else {
            ParsimoniousSet::unpruned(step, candidates)
        };
        set.step = step;
        sets.push(set);
        next = sets.last().expect("just pushed").clone();
    }
    Ok(FiniteHorizonSolution {
        horizon,
        sets,
        terminal: z.clone(),
    })
}

/// Worst-case quadratic cost over a set of branches.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostEvaluation {
    pub value: f64,
    /// Index of the maximizing branch; lowest index on ties.
    pub argmax: usize,
    pub branch_values: Vec<f64>,
}

impl CostEvaluation {
    pub(crate) fn from_values(branch_values: Vec<f64>) -> Self {
        let mut argmax = 0;
        for (i, &v) in branch_values.iter().enumerate() {
            if v > branch_values[argmax] {
                argmax = i;
            }
        }
        Self {
            value: branch_values.get(argmax).copied().unwrap_or(0.0),
            argmax,
            branch_values,
        }
    }
}

pub(crate) fn check_state(x: &DVector<f64>, nx: usize) -> Result<(), FiniteHorizonError> {
    if x.len() != nx {
        return Err(FiniteHorizonError::Dimension(format!(
            "state has length {}, expected {nx}",
            x.len()
        )));
    }
    Ok(())
}

pub(crate) fn check_mode(mode: &ModeInfo, n: usize) -> Result<(), FiniteHorizonError> {
    mode.check(n)
        .map_err(|e| FiniteHorizonError::Dimension(e.to_string()))
}

/// `max_l xᵀ(Σ_i p_i X_i^(l))x` with `p` the indicator of a known mode or the
/// supplied distribution.
pub fn cost_to_go(
    set: &ParsimoniousSet,
    x: &DVector<f64>,
    mode: &ModeInfo,
) -> Result<CostEvaluation, FiniteHorizonError> {
    let first = set.branches.first().ok_or(FiniteHorizonError::EmptySet)?;
    check_state(x, first.x[0].nrows())?;
    check_mode(mode, first.x.len())?;
    let p = mode.weights(first.x.len());
    let values = set
        .branches
        .iter()
        .map(|b| quad_form(&b.weighted_x(&p), x))
        .collect();
    Ok(CostEvaluation::from_values(values))
}

/// `u = K_θ x` using the branch that attains the cost-to-go.
pub fn optimal_input(
    set: &ParsimoniousSet,
    x: &DVector<f64>,
    theta: usize,
) -> Result<DVector<f64>, FiniteHorizonError> {
    let eval = cost_to_go(set, x, &ModeInfo::Known(theta))?;
    let branch = &set.branches[eval.argmax];
    let k = branch
        .k
        .get(theta)
        .ok_or_else(|| FiniteHorizonError::Dimension("terminal set carries no gains".into()))?;
    Ok(k * x)
}

/// Candidate and retained counts per step, from `k = T−1` down to `0`.
pub fn branch_profile(solution: &FiniteHorizonSolution) -> Vec<StepProfile> {
    solution
        .sets
        .iter()
        .map(|s| StepProfile {
            step: s.step,
            candidates: s.candidate_count,
            retained: s.len(),
        })
        .collect()
}

/// Largest value of `count` over the profile and the latest step attaining it.
pub fn profile_peak(profile: &[StepProfile], count: impl Fn(&StepProfile) -> usize) -> (usize, usize) {
    profile
        .iter()
        .fold((0, 0), |(best, at), p| {
            let c = count(p);
            if c > best {
                (c, p.step)
            } else {
                (best, at)
            }
        })
}

/// One-step cost `‖z‖² + Σ_j p_j max_l x'ᵀ X_j^(l) x'` for a given input and
/// transition row, where `x' = A_θ x + B_θ u` and the `X^(l)` are the branches
/// of the next step.
pub fn one_step_cost(
    model: &MjlsModel,
    x: &DVector<f64>,
    theta: usize,
    u: &DVector<f64>,
    row: &[f64],
    next: &ParsimoniousSet,
) -> f64 {
    let m = model.mode(theta);
    let z = &m.c * x + &m.d * u;
    let xn = &m.a * x + &m.b * u;
    let future: f64 = row
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let worst = next
                .branches
                .iter()
                .map(|b| quad_form(&b.x[j], &xn))
                .fold(f64::NEG_INFINITY, f64::max);
            p * worst
        })
        .sum();
    z.norm_squared() + future
}
