//! Small dense helpers shared across modules.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng as _;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::rng::Rng;

pub fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    let (r, c) = a.dim();
    DMatrix::from_fn(r, c, |i, j| a[[i, j]])
}

pub fn from_na(a: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), a.ncols()), |(i, j)| a[(i, j)])
}

/// Haar-distributed orthogonal matrix: Q from the QR factorization of a
/// standard Gaussian matrix, with columns multiplied by sign(R_ii).
pub fn haar_orthogonal(n: usize, rng: &mut Rng) -> Array2<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    from_na(&q)
}

/// Matrix whose columns are independent flat-Dirichlet draws.
pub fn dirichlet_columns(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    let mut a = Array2::<f64>::zeros((rows, cols));
    for j in 0..cols {
        let mut s = 0.0;
        for i in 0..rows {
            let e: f64 = Exp1.sample(rng);
            a[[i, j]] = e;
            s += e;
        }
        for i in 0..rows {
            a[[i, j]] /= s;
        }
    }
    a
}

/// Uniform integer in `0..n`.
pub fn uniform_index(n: usize, rng: &mut Rng) -> usize {
    rng.random_range(0..n)
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_categorical(p: ArrayView1<f64>, rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            last = i;
            acc += pi;
            if u < acc {
                return i;
            }
        }
    }
    last
}

pub fn gaussian_vec(n: usize, sigma: f64, rng: &mut Rng) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| {
        let z: f64 = StandardNormal.sample(rng);
        sigma * z
    })
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `max |A^T A - I|`.
pub fn orthogonality_defect(a: &Array2<f64>) -> f64 {
    let g = a.t().dot(a);
    let n = g.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[[i, j]] - target).abs());
        }
    }
    worst
}

/// Largest singular value.
pub fn spectral_norm(a: &Array2<f64>) -> f64 {
    to_na(a).singular_values().max()
}

/// Induced 1-norm: largest absolute column sum.
pub fn col_abs_sum_norm(a: &Array2<f64>) -> f64 {
    a.columns()
        .into_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Largest deviation of a column sum from 1, or `inf` on a negative entry.
pub fn column_stochastic_defect(a: &Array2<f64>) -> f64 {
    if a.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return f64::INFINITY;
    }
    a.columns()
        .into_iter()
        .map(|c| (c.sum() - 1.0).abs())
        .fold(0.0, f64::max)
}
