//! Second-moment lifting and joint-spectral-radius certificates.
//!
//! For per-mode matrices `M_i` and a transition matrix `P_v`, the lifted
//! matrix `(P_vᵀ ⊗ I)(⊕_i M_i ⊗ M_i)` maps the stacked second moments
//! `vec E(x_k x_kᵀ 1{θ_k = i})` one step forward. Mean-square stability
//! under every admissible transition sequence is equivalent to the joint
//! spectral radius of the family `{Λ_v}` being below one.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{spectral_norm, spectral_radius, LinalgError};
use crate::model::{MjlsModel, TpmPolytope};
use crate::precond;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StabilityError {
    #[error("gain for mode {mode} is {rows}x{cols}, expected {expected_rows}x{expected_cols}")]
    GainDimension {
        mode: usize,
        rows: usize,
        cols: usize,
        expected_rows: usize,
        expected_cols: usize,
    },
    #[error("expected {expected} per-mode gains, got {found}")]
    GainCount { expected: usize, found: usize },
    #[error("empty matrix family")]
    EmptyFamily,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LiftedKind {
    /// Built from the open-loop `A_i`.
    OpenLoop,
    /// Built from `A_i + B_i K_i`.
    ClosedLoop,
    /// Built from `A_i + G_i C_i`.
    Filter,
}

/// One lifted matrix per polytope vertex, all of order `N·n_x²`.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedFamily {
    pub kind: LiftedKind,
    pub matrices: Vec<DMatrix<f64>>,
    /// The per-mode matrices `M_i` the family was lifted from.
    pub modes: Vec<DMatrix<f64>>,
}

impl LiftedFamily {
    pub fn order(&self) -> usize {
        self.matrices.first().map_or(0, DMatrix::nrows)
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }
}

fn lift(polytope: &TpmPolytope, per_mode: &[DMatrix<f64>], kind: LiftedKind) -> LiftedFamily {
    let blocks: Vec<DMatrix<f64>> = per_mode.iter().map(|m| m.kronecker(m)).collect();
    let b = blocks.first().map_or(0, DMatrix::nrows);
    let n = per_mode.len();
    let matrices = polytope
        .vertices()
        .iter()
        .map(|p| {
            let mut out = DMatrix::zeros(n * b, n * b);
            // block (r, c) of (Pᵀ ⊗ I)·blockdiag is p_cr · (M_c ⊗ M_c)
            for r in 0..n {
                for (c, block) in blocks.iter().enumerate() {
                    let w = p[(c, r)];
                    if w != 0.0 {
                        out.view_mut((r * b, c * b), (b, b)).copy_from(&(block * w));
                    }
                }
            }
            out
        })
        .collect();
    LiftedFamily {
        kind,
        matrices,
        modes: per_mode.to_vec(),
    }
}

pub fn lift_open_loop(model: &MjlsModel, polytope: &TpmPolytope) -> LiftedFamily {
    let a: Vec<_> = model.modes().iter().map(|m| m.a.clone()).collect();
    lift(polytope, &a, LiftedKind::OpenLoop)
}

fn check_gains(
    gains: &[DMatrix<f64>],
    n_modes: usize,
    rows: usize,
    cols: usize,
) -> Result<(), StabilityError> {
    if gains.len() != n_modes {
        return Err(StabilityError::GainCount {
            expected: n_modes,
            found: gains.len(),
        });
    }
    for (i, g) in gains.iter().enumerate() {
        if g.nrows() != rows || g.ncols() != cols {
            return Err(StabilityError::GainDimension {
                mode: i + 1,
                rows: g.nrows(),
                cols: g.ncols(),
                expected_rows: rows,
                expected_cols: cols,
            });
        }
    }
    Ok(())
}

/// Closed-loop matrices `A_i + B_i K_i`.
pub fn closed_loop_matrices(
    model: &MjlsModel,
    gains: &[DMatrix<f64>],
) -> Result<Vec<DMatrix<f64>>, StabilityError> {
    let d = model.dims();
    check_gains(gains, model.n_modes(), d.nu, d.nx)?;
    Ok(model
        .modes()
        .iter()
        .zip(gains)
        .map(|(m, k)| &m.a + &m.b * k)
        .collect())
}

pub fn lift_closed_loop(
    model: &MjlsModel,
    polytope: &TpmPolytope,
    gains: &[DMatrix<f64>],
) -> Result<LiftedFamily, StabilityError> {
    let gamma = closed_loop_matrices(model, gains)?;
    Ok(lift(polytope, &gamma, LiftedKind::ClosedLoop))
}

pub fn lift_filter(
    model: &MjlsModel,
    polytope: &TpmPolytope,
    filter_gains: &[DMatrix<f64>],
) -> Result<LiftedFamily, StabilityError> {
    let d = model.dims();
    check_gains(filter_gains, model.n_modes(), d.nx, d.nz)?;
    let f: Vec<_> = model
        .modes()
        .iter()
        .zip(filter_gains)
        .map(|(m, g)| &m.a + g * &m.c)
        .collect();
    Ok(lift(polytope, &f, LiftedKind::Filter))
}

/// Bounds on the joint spectral radius of a finite family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JsrCertificate {
    pub lower: f64,
    pub upper: f64,
    /// Longest product length explored.
    pub depth: usize,
    pub converged: bool,
}

impl JsrCertificate {
    /// Certifies a joint spectral radius strictly below one.
    pub fn certifies_stability(&self) -> bool {
        self.upper < 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JsrOptions {
    pub max_depth: usize,
    pub gap: f64,
    /// Cap on the number of live products kept at one depth.
    pub max_frontier: usize,
}

impl Default for JsrOptions {
    fn default() -> Self {
        Self {
            max_depth: 12,
            gap: 1e-4,
            max_frontier: 200_000,
        }
    }
}

/// A product `exp(log_scale) · scaled` with `‖scaled‖ = 1`.
struct Node {
    scaled: DMatrix<f64>,
    log_scale: f64,
    /// `min_i ‖prefix_i‖^{1/i}` over the prefixes of this product.
    bound: f64,
}

fn node(m: DMatrix<f64>, parent_log: f64, parent_bound: f64, len: usize) -> Node {
    let norm = spectral_norm(&m);
    if norm == 0.0 || !norm.is_finite() {
        return Node {
            scaled: m,
            log_scale: f64::NEG_INFINITY,
            bound: if norm == 0.0 { 0.0 } else { parent_bound },
        };
    }
    let log_scale = parent_log + norm.ln();
    let bound = parent_bound.min((log_scale / len as f64).exp());
    Node {
        scaled: m / norm,
        log_scale,
        bound,
    }
}

fn node_radius(n: &Node, len: usize) -> Result<f64, LinalgError> {
    if n.log_scale == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    let rho = spectral_radius(&n.scaled)?;
    if rho == 0.0 {
        return Ok(0.0);
    }
    Ok(((rho.ln() + n.log_scale) / len as f64).exp())
}

/// Joint-spectral-radius bounds of a lifted family.
///
/// Norms are taken after a block-diagonal similarity `⊕_i c_i (T_i ⊗ T_i)`
/// tuned to the per-mode matrices, which keeps the upper bound close to the
/// spectral radius when the `M_i` are far from normal. The plain Euclidean
/// norm is used when the tuned one is no better.
pub fn jsr_bounds(
    family: &LiftedFamily,
    opts: &JsrOptions,
) -> Result<JsrCertificate, StabilityError> {
    if family.is_empty() {
        return Err(StabilityError::EmptyFamily);
    }
    match precond::tune(&family.modes, &family.matrices) {
        Some(pc) => {
            let transformed: Vec<_> = family.matrices.iter().map(|m| pc.apply(m)).collect();
            jsr_bounds_of(&transformed, opts)
        }
        None => jsr_bounds_of(&family.matrices, opts),
    }
}

/// Branch-and-bound bounds on the joint spectral radius, in the Euclidean norm.
///
/// Products are explored breadth-first. The lower bound is the largest
/// `ρ(Π)^{1/m}` found. Every infinite product has a prefix whose normalized
/// norm is at most the smallest prefix bound of its explored ancestor, so the
/// largest such bound over the leaves of the explored tree is an upper bound.
/// A product is not extended once its bound is within `gap` of the lower bound.
pub fn jsr_bounds_of(
    matrices: &[DMatrix<f64>],
    opts: &JsrOptions,
) -> Result<JsrCertificate, StabilityError> {
    if matrices.is_empty() {
        return Err(StabilityError::EmptyFamily);
    }
    let max_depth = opts.max_depth.max(1);
    let mut lower = 0.0_f64;
    let mut pruned_max = 0.0_f64;
    let mut frontier: Vec<Node> = matrices
        .iter()
        .map(|m| node(m.clone(), 0.0, f64::INFINITY, 1))
        .collect();
    let mut depth = 1;
    loop {
        let radii: Vec<f64> = frontier
            .par_iter()
            .map(|n| node_radius(n, depth))
            .collect::<Result<_, _>>()?;
        lower = radii.into_iter().fold(lower, f64::max);

        let live_max = frontier.iter().map(|n| n.bound).fold(0.0, f64::max);
        let mut upper = pruned_max.max(live_max).max(lower);

        let threshold = lower + opts.gap;
        let (pruned, live): (Vec<Node>, Vec<Node>) =
            frontier.into_iter().partition(|n| n.bound <= threshold);
        pruned_max = pruned.iter().map(|n| n.bound).fold(pruned_max, f64::max);
        if live.is_empty() {
            upper = pruned_max.max(lower);
        }

        let converged = upper - lower <= opts.gap;
        let budget_hit = live.len() * matrices.len() > opts.max_frontier;
        if converged || live.is_empty() || depth >= max_depth || budget_hit {
            return Ok(JsrCertificate {
                lower,
                upper,
                depth,
                converged,
            });
        }

        depth += 1;
        frontier = live
            .par_iter()
            .flat_map_iter(|parent| {
                matrices.iter().map(move |a| {
                    node(a * &parent.scaled, parent.log_scale, parent.bound, depth)
                })
            })
            .collect();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Stable,
    Unstable,
    Undecided,
}

impl Verdict {
    /// Stable iff the upper bound is below one; unstable once the lower bound
    /// reaches one (the boundary counts as unstable).
    pub fn from_certificate(c: &JsrCertificate) -> Self {
        if c.upper < 1.0 {
            Verdict::Stable
        } else if c.lower >= 1.0 {
            Verdict::Unstable
        } else {
            Verdict::Undecided
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MssReport {
    pub verdict: Verdict,
    pub certificate: JsrCertificate,
    /// `ρ(Λ_v)` per vertex.
    pub vertex_radii: Vec<f64>,
}

/// Mean-square stability of the autonomous system `x_{k+1} = A_θ x_k`.
pub fn is_mss(
    model: &MjlsModel,
    polytope: &TpmPolytope,
    opts: &JsrOptions,
) -> Result<MssReport, StabilityError> {
    let family = lift_open_loop(model, polytope);
    family_report(&family, opts)
}

pub fn family_report(
    family: &LiftedFamily,
    opts: &JsrOptions,
) -> Result<MssReport, StabilityError> {
    let vertex_radii = family
        .matrices
        .iter()
        .map(spectral_radius)
        .collect::<Result<Vec<_>, _>>()?;
    let certificate = jsr_bounds(family, opts)?;
    Ok(MssReport {
        verdict: Verdict::from_certificate(&certificate),
        certificate,
        vertex_radii,
    })
}

/// One certificate per gain set; a set stabilizes iff its upper bound is below one.
pub fn verify_stabilizing(
    model: &MjlsModel,
    polytope: &TpmPolytope,
    gain_sets: &[Vec<DMatrix<f64>>],
    opts: &JsrOptions,
) -> Result<Vec<JsrCertificate>, StabilityError> {
    gain_sets
        .iter()
        .map(|gains| {
            let family = lift_closed_loop(model, polytope, gains)?;
            jsr_bounds(&family, opts)
        })
        .collect()
}
