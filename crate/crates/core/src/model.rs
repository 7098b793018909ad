//! Problem data for a Markov jump linear system whose transition matrix
//! ranges over a polytope of stochastic matrices, and its JSON file format.
//!
//! Mode and vertex indices are 0-based in the API and 1-based in files,
//! reports and error messages.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{from_rows, min_sym_eigenvalue, spectral_norm, to_rows};

/// Tolerance on row sums and negative entries of stochastic data.
pub const TOL_STOCH: f64 = 1e-9;
/// Relative tolerance on `‖CᵀD‖ / (‖C‖‖D‖)`.
pub const TOL_ORTH: f64 = 1e-8;
/// Relative eigenvalue slack when checking positive semidefiniteness of inputs.
pub const TOL_PSD: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("mode {mode}: missing field {field}")]
    MissingField { mode: usize, field: &'static str },
    #[error("dimension mismatch: {field} is {found} but {against} requires {expected}")]
    Dimension {
        field: String,
        found: String,
        against: String,
        expected: String,
    },
    #[error("invalid initial condition: {0}")]
    Initial(String),
    #[error("problem data violates {} invariant(s):\n{0}", .0.violations.len())]
    Invalid(ValidationReport),
}

fn shape(m: &DMatrix<f64>) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

/// State, input and output dimensions shared by all modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub nu: usize,
    pub nz: usize,
}

/// System matrices of one operational mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeMatrices {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl ModeMatrices {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Self {
        Self { a, b, c, d }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            nx: self.a.nrows(),
            nu: self.b.ncols(),
            nz: self.c.nrows(),
        }
    }

    /// `‖CᵀD‖`, zero under the orthogonality assumption.
    pub fn orthogonality_residual(&self) -> f64 {
        spectral_norm(&(self.c.transpose() * &self.d))
    }
}

/// Per-mode system matrices with common dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct MjlsModel {
    modes: Vec<ModeMatrices>,
    dims: Dims,
}

impl MjlsModel {
    pub fn new(modes: Vec<ModeMatrices>) -> Result<Self, ProblemError> {
        let first = modes.first().ok_or_else(|| ProblemError::Dimension {
            field: "modes".into(),
            found: "empty".into(),
            against: "n_modes".into(),
            expected: ">= 1".into(),
        })?;
        let dims = first.dims();
        for (i, m) in modes.iter().enumerate() {
            let checks = [
                ("A", &m.a, dims.nx, dims.nx, "nx x nx"),
                ("B", &m.b, dims.nx, dims.nu, "nx x nu"),
                ("C", &m.c, dims.nz, dims.nx, "nz x nx"),
                ("D", &m.d, dims.nz, dims.nu, "nz x nu"),
            ];
            for (name, mat, r, c, rule) in checks {
                if mat.nrows() != r || mat.ncols() != c {
                    return Err(ProblemError::Dimension {
                        field: format!("modes[{}].{name}", i + 1),
                        found: shape(mat),
                        against: format!("dims (nx={}, nu={}, nz={})", dims.nx, dims.nu, dims.nz),
                        expected: format!("{r}x{c} ({rule})"),
                    });
                }
            }
        }
        Ok(Self { modes, dims })
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn modes(&self) -> &[ModeMatrices] {
        &self.modes
    }

    pub fn mode(&self, i: usize) -> &ModeMatrices {
        &self.modes[i]
    }
}

/// Vertices of the polytope containing every admissible transition matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TpmPolytope {
    vertices: Vec<DMatrix<f64>>,
}

impl TpmPolytope {
    /// Checks shapes only; stochasticity is reported by [`validate_model`].
    pub fn new(vertices: Vec<DMatrix<f64>>) -> Result<Self, ProblemError> {
        let n = vertices
            .first()
            .ok_or_else(|| ProblemError::Dimension {
                field: "tpm_vertices".into(),
                found: "empty".into(),
                against: "polytope".into(),
                expected: "at least one vertex".into(),
            })?
            .nrows();
        for (v, p) in vertices.iter().enumerate() {
            if p.nrows() != n || p.ncols() != n {
                return Err(ProblemError::Dimension {
                    field: format!("tpm_vertices[{}]", v + 1),
                    found: shape(p),
                    against: "tpm_vertices[1]".into(),
                    expected: format!("{n}x{n}"),
                });
            }
        }
        Ok(Self { vertices })
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_modes(&self) -> usize {
        self.vertices[0].nrows()
    }

    pub fn vertices(&self) -> &[DMatrix<f64>] {
        &self.vertices
    }

    pub fn vertex(&self, v: usize) -> &DMatrix<f64> {
        &self.vertices[v]
    }

    /// Polytope spanned by a subset of the vertices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self, ProblemError> {
        Self::new(indices.iter().map(|&v| self.vertices[v].clone()).collect())
    }

    /// Convex combination `Σ_v λ_v P_v`.
    pub fn mixture(&self, weights: &[f64]) -> DMatrix<f64> {
        let n = self.n_modes();
        crate::linalg::weighted_sum(weights, &self.vertices, n, n)
    }
}

/// Mode information available at a time step.
#[derive(Debug, Clone, PartialEq)]
pub enum ModeInfo {
    /// Observed mode (0-based).
    Known(usize),
    /// Probability distribution over modes.
    Distribution(DVector<f64>),
}

impl ModeInfo {
    /// Probability weights over `n` modes; the indicator vector for a known mode.
    pub fn weights(&self, n: usize) -> Vec<f64> {
        match self {
            ModeInfo::Known(i) => (0..n).map(|j| if j == *i { 1.0 } else { 0.0 }).collect(),
            ModeInfo::Distribution(p) => p.iter().copied().collect(),
        }
    }

    pub fn check(&self, n: usize) -> Result<(), ProblemError> {
        match self {
            ModeInfo::Known(i) if *i >= n => Err(ProblemError::Initial(format!(
                "mode {} out of range 1..={n}",
                i + 1
            ))),
            ModeInfo::Known(_) => Ok(()),
            ModeInfo::Distribution(p) => {
                if p.len() != n {
                    return Err(ProblemError::Initial(format!(
                        "distribution has {} entries, expected {n}",
                        p.len()
                    )));
                }
                if p.iter().any(|&w| w < 0.0 || !w.is_finite()) {
                    return Err(ProblemError::Initial(
                        "distribution has a negative entry".into(),
                    ));
                }
                let s = p.sum();
                if (s - 1.0).abs() > TOL_STOCH {
                    return Err(ProblemError::Initial(format!(
                        "distribution sums to {s}, expected 1"
                    )));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialCondition {
    pub x0: DVector<f64>,
    pub mode: ModeInfo,
}

/// Terminal cost weights `Z_i`, one per mode.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalWeights(pub Vec<DMatrix<f64>>);

impl TerminalWeights {
    pub fn zeros(n_modes: usize, nx: usize) -> Self {
        Self(vec![DMatrix::zeros(nx, nx); n_modes])
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.0
    }
}

/// Propagates a mode distribution one step: `p_j(k+1) = Σ_i p_i(k) p_ij`.
pub fn propagate_distribution(p: &[f64], tpm: &DMatrix<f64>) -> Vec<f64> {
    let n = tpm.ncols();
    (0..n)
        .map(|j| p.iter().enumerate().map(|(i, pi)| pi * tpm[(i, j)]).sum())
        .collect()
}

/// One broken invariant found by [`validate_model`].
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Orthogonality { mode: usize, residual: f64, tolerance: f64 },
    ControlWeight { mode: usize, min_eigenvalue: f64 },
    ModeCount { vertex: usize, size: usize, expected: usize },
    NegativeProbability { vertex: usize, row: usize, col: usize, value: f64 },
    RowStochastic { vertex: usize, row: usize, sum: f64 },
    TerminalWeight { mode: usize, detail: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Orthogonality { mode, residual, tolerance } => write!(
                f,
                "orthogonality, mode {}: |C'D| = {residual:.3e} exceeds {tolerance:.3e}",
                mode + 1
            ),
            Violation::ControlWeight { mode, min_eigenvalue } => write!(
                f,
                "control weight, mode {}: D'D has eigenvalue {min_eigenvalue:.3e}",
                mode + 1
            ),
            Violation::ModeCount { vertex, size, expected } => write!(
                f,
                "mode count, vertex {}: {size}x{size} but the model has {expected} modes",
                vertex + 1
            ),
            Violation::NegativeProbability { vertex, row, col, value } => write!(
                f,
                "nonnegative, vertex {}, row {}, column {}: entry {value}",
                vertex + 1,
                row + 1,
                col + 1
            ),
            Violation::RowStochastic { vertex, row, sum } => write!(
                f,
                "row-stochastic, vertex {}, row {}: sum {sum}",
                vertex + 1,
                row + 1
            ),
            Violation::TerminalWeight { mode, detail } => {
                write!(f, "terminal weight, mode {}: {detail}", mode + 1)
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// `‖C_iᵀD_i‖` per mode.
    pub orthogonality_residuals: Vec<f64>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        for v in &self.violations {
            writeln!(f, "  {v}")?;
        }
        Ok(())
    }
}

/// Reports every violated invariant of the model and polytope. Never fails.
pub fn validate_model(model: &MjlsModel, polytope: &TpmPolytope) -> ValidationReport {
    let mut report = ValidationReport::default();
    for (i, m) in model.modes().iter().enumerate() {
        let residual = m.orthogonality_residual();
        report.orthogonality_residuals.push(residual);
        let scale = spectral_norm(&m.c) * spectral_norm(&m.d);
        let tolerance = TOL_ORTH * scale;
        if residual > tolerance {
            report.violations.push(Violation::Orthogonality {
                mode: i,
                residual,
                tolerance,
            });
        }
        let dtd = m.d.transpose() * &m.d;
        let min_eig = min_sym_eigenvalue(&dtd);
        if min_eig < -TOL_PSD * (1.0 + spectral_norm(&dtd)) {
            report.violations.push(Violation::ControlWeight {
                mode: i,
                min_eigenvalue: min_eig,
            });
        }
    }
    for (v, p) in polytope.vertices().iter().enumerate() {
        if p.nrows() != model.n_modes() {
            report.violations.push(Violation::ModeCount {
                vertex: v,
                size: p.nrows(),
                expected: model.n_modes(),
            });
        }
        for r in 0..p.nrows() {
            for c in 0..p.ncols() {
                if p[(r, c)] < -TOL_STOCH {
                    report.violations.push(Violation::NegativeProbability {
                        vertex: v,
                        row: r,
                        col: c,
                        value: p[(r, c)],
                    });
                }
            }
            let sum: f64 = p.row(r).sum();
            if (sum - 1.0).abs() > TOL_STOCH {
                report
                    .violations
                    .push(Violation::RowStochastic { vertex: v, row: r, sum });
            }
        }
    }
    report
}

/// Symmetry and PSD check of terminal weights against the model.
pub fn validate_terminal(model: &MjlsModel, z: &TerminalWeights) -> Vec<Violation> {
    let nx = model.dims().nx;
    let mut out = Vec::new();
    if z.0.len() != model.n_modes() {
        out.push(Violation::TerminalWeight {
            mode: z.0.len().min(model.n_modes()),
            detail: format!("{} matrices for {} modes", z.0.len(), model.n_modes()),
        });
        return out;
    }
    for (i, zi) in z.0.iter().enumerate() {
        if zi.nrows() != nx || zi.ncols() != nx {
            out.push(Violation::TerminalWeight {
                mode: i,
                detail: format!("shape {} expected {nx}x{nx}", shape(zi)),
            });
            continue;
        }
        let scale = 1.0 + spectral_norm(zi);
        let asym = spectral_norm(&(zi - zi.transpose()));
        if asym > 1e-10 * scale {
            out.push(Violation::TerminalWeight {
                mode: i,
                detail: format!("asymmetry {asym:.3e}"),
            });
        }
        let min_eig = min_sym_eigenvalue(zi);
        if min_eig < -TOL_PSD * scale {
            out.push(Violation::TerminalWeight {
                mode: i,
                detail: format!("eigenvalue {min_eig:.3e} < 0"),
            });
        }
    }
    out
}

/// A complete problem as stored in a problem file.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub model: MjlsModel,
    pub polytope: TpmPolytope,
    pub terminal: Option<TerminalWeights>,
    pub initial: Option<InitialCondition>,
}

impl Problem {
    /// Terminal weights, defaulting to zero when the file has none.
    pub fn terminal_or_zero(&self) -> TerminalWeights {
        self.terminal.clone().unwrap_or_else(|| {
            TerminalWeights::zeros(self.model.n_modes(), self.model.dims().nx)
        })
    }

    /// Full validation: model, polytope and terminal weights.
    pub fn validate(&self) -> ValidationReport {
        let mut report = validate_model(&self.model, &self.polytope);
        if let Some(z) = &self.terminal {
            report.violations.extend(validate_terminal(&self.model, z));
        }
        report
    }

    /// Same problem restricted to a subset of polytope vertices (0-based).
    pub fn with_vertices(&self, indices: &[usize]) -> Result<Self, ProblemError> {
        Ok(Self {
            polytope: self.polytope.select(indices)?,
            ..self.clone()
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self, ProblemError> {
        let file: ProblemFile = serde_json::from_str(text).map_err(|e| ProblemError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        file.into_problem()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&ProblemFile::from_problem(self))
            .expect("problem data is always serializable")
    }
}

/// Reads and parses a problem file without checking the stochastic and
/// orthogonality invariants (see [`load_problem`] for the checked variant).
pub fn parse_problem(path: impl AsRef<Path>) -> Result<Problem, ProblemError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ProblemError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Problem::from_json_str(&text)
}

/// Reads, parses and validates a problem file.
pub fn load_problem(path: impl AsRef<Path>) -> Result<Problem, ProblemError> {
    let problem = parse_problem(path)?;
    let report = problem.validate();
    if !report.is_valid() {
        return Err(ProblemError::Invalid(report));
    }
    Ok(problem)
}

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Serialize, Deserialize)]
struct ProblemFile {
    n_modes: usize,
    dims: Dims,
    modes: Vec<ModeFile>,
    tpm_vertices: Vec<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    terminal_weights: Option<Vec<Rows>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    initial: Option<InitialFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[allow(non_snake_case)]
struct ModeFile {
    A: Option<Rows>,
    B: Option<Rows>,
    C: Option<Rows>,
    D: Option<Rows>,
}

#[derive(Debug, Serialize, Deserialize)]
struct InitialFile {
    x0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    theta0: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p0: Option<Vec<f64>>,
}

fn matrix_field(
    rows: Option<Rows>,
    mode: usize,
    field: &'static str,
    expected: (usize, usize),
    rule: &str,
) -> Result<DMatrix<f64>, ProblemError> {
    let rows = rows.ok_or(ProblemError::MissingField { mode, field })?;
    let ragged = || ProblemError::Dimension {
        field: format!("modes[{mode}].{field}"),
        found: "ragged rows".into(),
        against: format!("dims ({rule})"),
        expected: format!("{}x{}", expected.0, expected.1),
    };
    let m = from_rows(&rows).ok_or_else(ragged)?;
    // an empty row list carries no column count
    let (r, c) = if rows.is_empty() { (0, expected.1) } else { (m.nrows(), m.ncols()) };
    if (r, c) != expected {
        return Err(ProblemError::Dimension {
            field: format!("modes[{mode}].{field}"),
            found: format!("{r}x{c}"),
            against: format!("dims ({rule})"),
            expected: format!("{}x{}", expected.0, expected.1),
        });
    }
    Ok(if rows.is_empty() { DMatrix::zeros(expected.0, expected.1) } else { m })
}

impl ProblemFile {
    fn into_problem(self) -> Result<Problem, ProblemError> {
        let Dims { nx, nu, nz } = self.dims;
        if self.n_modes == 0 {
            return Err(ProblemError::Dimension {
                field: "n_modes".into(),
                found: "0".into(),
                against: "model".into(),
                expected: ">= 1".into(),
            });
        }
        if self.modes.len() != self.n_modes {
            return Err(ProblemError::Dimension {
                field: "modes".into(),
                found: format!("{} entries", self.modes.len()),
                against: "n_modes".into(),
                expected: format!("{} entries", self.n_modes),
            });
        }
        let mut modes = Vec::with_capacity(self.n_modes);
        for (idx, m) in self.modes.into_iter().enumerate() {
            let i = idx + 1;
            modes.push(ModeMatrices {
                a: matrix_field(m.A, i, "A", (nx, nx), "nx x nx")?,
                b: matrix_field(m.B, i, "B", (nx, nu), "nx x nu")?,
                c: matrix_field(m.C, i, "C", (nz, nx), "nz x nx")?,
                d: matrix_field(m.D, i, "D", (nz, nu), "nz x nu")?,
            });
        }
        let model = MjlsModel::new(modes)?;

        let mut vertices = Vec::with_capacity(self.tpm_vertices.len());
        for (v, rows) in self.tpm_vertices.iter().enumerate() {
            let p = from_rows(rows).filter(|p| p.nrows() == self.n_modes && p.ncols() == self.n_modes);
            vertices.push(p.ok_or_else(|| ProblemError::Dimension {
                field: format!("tpm_vertices[{}]", v + 1),
                found: format!(
                    "{}x{}",
                    rows.len(),
                    rows.first().map_or(0, Vec::len)
                ),
                against: "n_modes".into(),
                expected: format!("{0}x{0}", self.n_modes),
            })?);
        }
        let polytope = TpmPolytope::new(vertices)?;

        let terminal = match self.terminal_weights {
            None => None,
            Some(zs) => {
                if zs.len() != self.n_modes {
                    return Err(ProblemError::Dimension {
                        field: "terminal_weights".into(),
                        found: format!("{} matrices", zs.len()),
                        against: "n_modes".into(),
                        expected: format!("{} matrices", self.n_modes),
                    });
                }
                let mut mats = Vec::with_capacity(zs.len());
                for (i, rows) in zs.iter().enumerate() {
                    let z = from_rows(rows).filter(|z| z.nrows() == nx && z.ncols() == nx);
                    mats.push(z.ok_or_else(|| ProblemError::Dimension {
                        field: format!("terminal_weights[{}]", i + 1),
                        found: format!("{}x{}", rows.len(), rows.first().map_or(0, Vec::len)),
                        against: "dims.nx".into(),
                        expected: format!("{nx}x{nx}"),
                    })?);
                }
                Some(TerminalWeights(mats))
            }
        };

        let initial = match self.initial {
            None => None,
            Some(init) => {
                if init.x0.len() != nx {
                    return Err(ProblemError::Dimension {
                        field: "initial.x0".into(),
                        found: format!("length {}", init.x0.len()),
                        against: "dims.nx".into(),
                        expected: format!("length {nx}"),
                    });
                }
                let mode = match (init.theta0, init.p0) {
                    (Some(t), None) if t >= 1 => ModeInfo::Known(t - 1),
                    (Some(t), None) => {
                        return Err(ProblemError::Initial(format!(
                            "theta0 = {t}; modes are numbered from 1"
                        )))
                    }
                    (None, Some(p)) => ModeInfo::Distribution(DVector::from_vec(p)),
                    _ => {
                        return Err(ProblemError::Initial(
                            "exactly one of theta0 and p0 is required".into(),
                        ))
                    }
                };
                mode.check(self.n_modes)?;
                Some(InitialCondition {
                    x0: DVector::from_vec(init.x0),
                    mode,
                })
            }
        };

        Ok(Problem {
            model,
            polytope,
            terminal,
            initial,
        })
    }

    fn from_problem(p: &Problem) -> Self {
        Self {
            n_modes: p.model.n_modes(),
            dims: p.model.dims(),
            modes: p
                .model
                .modes()
                .iter()
                .map(|m| ModeFile {
                    A: Some(to_rows(&m.a)),
                    B: Some(to_rows(&m.b)),
                    C: Some(to_rows(&m.c)),
                    D: Some(to_rows(&m.d)),
                })
                .collect(),
            tpm_vertices: p.polytope.vertices().iter().map(to_rows).collect(),
            terminal_weights: p.terminal.as_ref().map(|z| z.0.iter().map(to_rows).collect()),
            initial: p.initial.as_ref().map(|ic| InitialFile {
                x0: ic.x0.iter().copied().collect(),
                theta0: match ic.mode {
                    ModeInfo::Known(i) => Some(i + 1),
                    ModeInfo::Distribution(_) => None,
                },
                p0: match &ic.mode {
                    ModeInfo::Known(_) => None,
                    ModeInfo::Distribution(p) => Some(p.iter().copied().collect()),
                },
            }),
        }
    }
}
