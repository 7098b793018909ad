#![allow(dead_code)]

use mjls::model::ModeMatrices;
use mjls::{MjlsModel, TerminalWeights, TpmPolytope};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

pub fn uniform_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(-scale..scale))
}

/// Positive semidefinite `L Lᵀ`.
pub fn psd(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<f64> {
    let l = uniform_matrix(rng, n, n, scale);
    &l * l.transpose()
}

/// Modes with `C = [C̄; 0]`, `D = [0; d]`, so `CᵀD = 0` and `DᵀD > 0`.
pub fn model(rng: &mut ChaCha8Rng, n_modes: usize, nx: usize, a_scale: f64) -> MjlsModel {
    let modes = (0..n_modes)
        .map(|_| {
            let a = uniform_matrix(rng, nx, nx, a_scale);
            let b = DMatrix::from_fn(nx, 1, |_, _| {
                let v: f64 = rng.gen_range(0.2..1.0);
                if rng.gen_bool(0.5) { v } else { -v }
            });
            let mut c = DMatrix::zeros(nx + 1, nx);
            c.view_mut((0, 0), (nx, nx)).copy_from(&uniform_matrix(rng, nx, nx, 1.0));
            let mut d = DMatrix::zeros(nx + 1, 1);
            d[(nx, 0)] = rng.gen_range(0.5..1.5);
            ModeMatrices::new(a, b, c, d)
        })
        .collect();
    MjlsModel::new(modes).expect("consistent dimensions")
}

pub fn stochastic_row(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

pub fn polytope(rng: &mut ChaCha8Rng, n_modes: usize, n_vertices: usize) -> TpmPolytope {
    let vertices = (0..n_vertices)
        .map(|_| {
            let rows: Vec<f64> = (0..n_modes).flat_map(|_| stochastic_row(rng, n_modes)).collect();
            DMatrix::from_row_slice(n_modes, n_modes, &rows)
        })
        .collect();
    TpmPolytope::new(vertices).expect("stochastic vertices")
}

pub fn terminal(rng: &mut ChaCha8Rng, n_modes: usize, nx: usize) -> TerminalWeights {
    TerminalWeights((0..n_modes).map(|_| psd(rng, nx, 1.0)).collect())
}

/// Points `w` of the standard simplex in `dim` coordinates on a grid of
/// resolution `1/m`, in lexicographic order.
pub fn simplex_grid(dim: usize, m: usize) -> Vec<Vec<f64>> {
    fn fill(prefix: &mut Vec<usize>, left: usize, dim: usize, m: usize, out: &mut Vec<Vec<f64>>) {
        if prefix.len() + 1 == dim {
            prefix.push(left);
            out.push(prefix.iter().map(|&c| c as f64 / m as f64).collect());
            prefix.pop();
            return;
        }
        for c in 0..=left {
            prefix.push(c);
            fill(prefix, left - c, dim, m, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    fill(&mut Vec::new(), m, dim, m, &mut out);
    out
}

/// `count` simplex points (one when `dim == 1`): the coarsest grid with
/// enough points, truncated.
pub fn simplex_points(dim: usize, count: usize) -> Vec<Vec<f64>> {
    if dim == 1 {
        return vec![vec![1.0]];
    }
    let mut m = 1;
    loop {
        let grid = simplex_grid(dim, m);
        if grid.len() >= count {
            return grid.into_iter().take(count).collect();
        }
        m += 1;
    }
}

pub fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}
