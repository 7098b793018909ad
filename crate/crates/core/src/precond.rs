//! Block-diagonal similarity for lifted second-moment families.
//!
//! For per-mode matrices `M_i` the basis `T_i` brings `M_i` close to a
//! block-diagonal normal form (real Schur form, normalized 2×2 rotation
//! blocks, partial Sylvester decoupling, geometric row scaling). The lifted
//! preconditioner is `⊕_i c_i (T_i ⊗ T_i)`; the per-mode parameters are
//! tuned by a compass search on the largest vertex norm.

use nalgebra::{DMatrix, Schur};

use crate::linalg::{spectral_norm, SCHUR_MAX_ITER};

/// Real Schur data with 2×2 blocks brought to `[[α, β], [−β, α]]`.
struct ModeForm {
    /// Orthogonal Schur vectors times the block normalizer.
    basis: DMatrix<f64>,
    basis_inv: DMatrix<f64>,
    /// Block-diagonalizing unit upper triangular factor, if well conditioned.
    decouple: Option<DMatrix<f64>>,
    /// Start index of each diagonal block.
    block_of_row: Vec<usize>,
}

impl ModeForm {
    fn identity(n: usize) -> Self {
        Self {
            basis: DMatrix::identity(n, n),
            basis_inv: DMatrix::identity(n, n),
            decouple: None,
            block_of_row: (0..n).collect(),
        }
    }

    fn new(m: &DMatrix<f64>) -> Self {
        let n = m.nrows();
        if n < 2 {
            return Self::identity(n);
        }
        let Some(schur) = Schur::try_new(m.clone(), f64::EPSILON, SCHUR_MAX_ITER) else {
            return Self::identity(n);
        };
        let (q, mut u) = schur.unpack();
        let tiny = 1e-13 * u.norm().max(f64::MIN_POSITIVE);

        let mut blocks = Vec::new();
        let mut i = 0;
        while i < n {
            if i + 1 < n && u[(i + 1, i)].abs() > tiny {
                blocks.push((i, 2));
                i += 2;
            } else {
                blocks.push((i, 1));
                i += 1;
            }
        }
        for (bi, &(s, _)) in blocks.iter().enumerate() {
            let end = blocks.get(bi + 1).map_or(n, |b| b.0);
            for r in end..n {
                for c in s..end {
                    u[(r, c)] = 0.0;
                }
            }
        }

        // eigenvector p + iq of a 2×2 block gives the rotation-scaling basis [p q]
        let mut normalizer = DMatrix::identity(n, n);
        for &(s, size) in &blocks {
            if size == 2 {
                let (a, b, c, d) = (u[(s, s)], u[(s, s + 1)], u[(s + 1, s)], u[(s + 1, s + 1)]);
                let alpha = 0.5 * (a + d);
                let disc = (a - d) * (a - d) + 4.0 * b * c;
                if disc >= 0.0 || b == 0.0 {
                    continue;
                }
                let beta = 0.5 * (-disc).sqrt();
                normalizer[(s, s)] = b;
                normalizer[(s + 1, s)] = alpha - a;
                normalizer[(s, s + 1)] = 0.0;
                normalizer[(s + 1, s + 1)] = beta;
            }
        }
        let Some(normalizer_inv) = normalizer.clone().try_inverse() else {
            return Self::identity(n);
        };
        let w = &normalizer_inv * &u * &normalizer;
        let basis = &q * &normalizer;
        let basis_inv = &normalizer_inv * q.transpose();

        let mut block_of_row = vec![0; n];
        for (bi, &(s, size)) in blocks.iter().enumerate() {
            block_of_row[s..s + size].fill(bi);
        }
        Self {
            basis,
            basis_inv,
            decouple: decoupler(&w, &blocks),
            block_of_row,
        }
    }

    /// Similarity `T` with `T M T⁻¹` in the tuned coordinates, and its inverse.
    fn transform(&self, t: f64, delta: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.basis.nrows();
        let (y, y_inv) = match &self.decouple {
            Some(full) => {
                let id = DMatrix::identity(n, n);
                let y = &id + (full - &id) * t;
                match y.clone().try_inverse() {
                    Some(inv) => (y, inv),
                    None => (id.clone(), id),
                }
            }
            None => (DMatrix::identity(n, n), DMatrix::identity(n, n)),
        };
        let scale = DMatrix::from_fn(n, n, |r, c| {
            if r == c {
                delta.powi(self.block_of_row[r] as i32)
            } else {
                0.0
            }
        });
        let scale_inv = DMatrix::from_fn(n, n, |r, c| if r == c { 1.0 / scale[(r, r)] } else { 0.0 });
        let forward = &scale_inv * &y_inv * &self.basis_inv;
        let backward = &self.basis * y * scale;
        (forward, backward)
    }
}

/// Unit block upper triangular `Y` with `Y⁻¹ W Y` block diagonal.
fn decoupler(w: &DMatrix<f64>, blocks: &[(usize, usize)]) -> Option<DMatrix<f64>> {
    let n = w.nrows();
    let mut y = DMatrix::identity(n, n);
    for k in 1..blocks.len() {
        let (sk, nk) = blocks[k];
        let wkk = w.view((sk, sk), (nk, nk)).into_owned();
        for j in (0..k).rev() {
            let (sj, nj) = blocks[j];
            let wjj = w.view((sj, sj), (nj, nj)).into_owned();
            let mut rhs = DMatrix::zeros(nj, nk);
            for &(sl, nl) in &blocks[j + 1..=k] {
                rhs -= w.view((sj, sl), (nj, nl)) * y.view((sl, sk), (nl, nk));
            }
            // W_jj Y − Y W_kk = rhs
            let op = DMatrix::identity(nk, nk).kronecker(&wjj)
                - wkk.transpose().kronecker(&DMatrix::identity(nj, nj));
            let sol = op.lu().solve(&DMatrix::from_column_slice(nj * nk, 1, rhs.as_slice()))?;
            if sol.iter().any(|v| !v.is_finite()) {
                return None;
            }
            y.view_mut((sj, sk), (nj, nk))
                .copy_from_slice(sol.as_slice());
        }
    }
    (y.norm() < 1e6).then_some(y)
}

#[derive(Clone)]
struct Params {
    t: Vec<f64>,
    delta: Vec<f64>,
    weight: Vec<f64>,
}

/// Lifted similarity `T` and its inverse.
pub(crate) struct Preconditioner {
    pub forward: DMatrix<f64>,
    pub backward: DMatrix<f64>,
}

impl Preconditioner {
    pub fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        &self.forward * m * &self.backward
    }
}

fn assemble(forms: &[ModeForm], p: &Params) -> Preconditioner {
    let parts: Vec<_> = forms
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let (t, t_inv) = f.transform(p.t[i], p.delta[i]);
            (t.kronecker(&t) * p.weight[i], t_inv.kronecker(&t_inv) / p.weight[i])
        })
        .collect();
    let total: usize = parts.iter().map(|(t, _)| t.nrows()).sum();
    let mut forward = DMatrix::zeros(total, total);
    let mut backward = DMatrix::zeros(total, total);
    let mut at = 0;
    for (t, t_inv) in parts {
        let b = t.nrows();
        forward.view_mut((at, at), (b, b)).copy_from(&t);
        backward.view_mut((at, at), (b, b)).copy_from(&t_inv);
        at += b;
    }
    Preconditioner { forward, backward }
}

fn objective(forms: &[ModeForm], p: &Params, family: &[DMatrix<f64>]) -> f64 {
    let pc = assemble(forms, p);
    let v = family
        .iter()
        .map(|m| spectral_norm(&pc.apply(m)))
        .fold(0.0, f64::max);
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

fn compass_search(forms: &[ModeForm], family: &[DMatrix<f64>], start: Params) -> (f64, Params) {
    let n = forms.len();
    let mut best = start;
    let mut value = objective(forms, &best, family);
    let mut step: f64 = 4.0;
    while step > 1.0005 {
        let mut improved = false;
        for coord in 0..3 {
            for i in 0..n {
                for up in [true, false] {
                    let mut trial = best.clone();
                    let f = if up { step } else { 1.0 / step };
                    match coord {
                        0 => trial.t[i] = (trial.t[i] + 0.5 * f.log(4.0)).clamp(0.0, 1.0),
                        1 => trial.delta[i] = (trial.delta[i] * f).min(1.0),
                        _ => trial.weight[i] *= f,
                    }
                    let v = objective(forms, &trial, family);
                    if v < value - 1e-15 {
                        value = v;
                        best = trial;
                        improved = true;
                    }
                }
            }
        }
        if !improved {
            step = step.sqrt();
        }
    }
    (value, best)
}

/// Tuned block-diagonal preconditioner, or `None` when it does not beat the
/// plain Euclidean norm on the family.
pub(crate) fn tune(per_mode: &[DMatrix<f64>], family: &[DMatrix<f64>]) -> Option<Preconditioner> {
    let n = per_mode.len();
    if n == 0 || family.is_empty() {
        return None;
    }
    let order: usize = per_mode.iter().map(|m| m.nrows() * m.nrows()).sum();
    if family.iter().any(|m| m.nrows() != order || m.ncols() != order) {
        return None;
    }
    let forms: Vec<ModeForm> = per_mode.iter().map(ModeForm::new).collect();
    let starts = [
        Params { t: vec![0.0; n], delta: vec![0.1; n], weight: vec![1.0; n] },
        Params { t: vec![1.0; n], delta: vec![1.0; n], weight: vec![1.0; n] },
    ];
    let (value, params) = starts
        .into_iter()
        .map(|s| compass_search(&forms, family, s))
        .min_by(|a, b| a.0.total_cmp(&b.0))?;
    let plain = family.iter().map(spectral_norm).fold(0.0, f64::max);
    (value < plain).then(|| assemble(&forms, &params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::spectral_radius;

    #[test]
    fn complex_block_becomes_normal() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -0.31, 1.008]);
        let form = ModeForm::new(&m);
        let (t, t_inv) = form.transform(1.0, 1.0);
        let n = spectral_norm(&(&t * &m * &t_inv));
        assert!((n - spectral_radius(&m).unwrap()).abs() < 1e-12, "{n}");
    }

    #[test]
    fn real_eigenvalues_decouple() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.1273, 0.6611]);
        let form = ModeForm::new(&m);
        let (t, t_inv) = form.transform(1.0, 1.0);
        let n = spectral_norm(&(&t * &m * &t_inv));
        assert!((n - spectral_radius(&m).unwrap()).abs() < 1e-12, "{n}");
    }

    #[test]
    fn three_by_three_mixed_blocks() {
        let m = DMatrix::from_row_slice(3, 3, &[0.2, 1.5, -0.3, -0.7, 0.1, 2.0, 0.05, 0.0, 0.4]);
        let form = ModeForm::new(&m);
        let (t, t_inv) = form.transform(1.0, 1.0);
        assert!((&t * &t_inv - DMatrix::identity(3, 3)).norm() < 1e-9);
        let n = spectral_norm(&(&t * &m * &t_inv));
        assert!((n - spectral_radius(&m).unwrap()).abs() < 1e-9, "{n}");
    }
}
