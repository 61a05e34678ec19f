use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::nn_core::gelu;

const GRID: usize = 101;
const MAX_DOUBLINGS: u32 = 60;

/// Four-unit GeLU approximation of `a * b`:
/// `(sqrt(2 pi) lambda^2 / 8) [g(x) + g(-x) - g(y) - g(-y)]` with
/// `x = (a + b) / lambda`, `y = (a - b) / lambda`.
pub fn gelu_product(a: f64, b: f64, lambda: f64) -> f64 {
    let x = (a + b) / lambda;
    let y = (a - b) / lambda;
    product_scale(lambda) * ((gelu(x) + gelu(-x)) - (gelu(y) + gelu(-y)))
}

fn product_scale(lambda: f64) -> f64 {
    (2.0 * std::f64::consts::PI).sqrt() * lambda * lambda / 8.0
}

fn grid(m: f64, k: usize) -> impl Iterator<Item = f64> {
    (0..k).map(move |i| -m + 2.0 * m * i as f64 / (k - 1) as f64)
}

/// Max `|f(a, b) - a b|` over a 101 x 101 grid of `[-M, M]^2`.
pub fn product_grid_error(m: f64, lambda: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for a in grid(m, GRID) {
        for b in grid(m, GRID) {
            worst = worst.max((gelu_product(a, b, lambda) - a * b).abs());
        }
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProductCert {
    pub m: f64,
    pub eps: f64,
    pub lambda: f64,
    pub grid_error: f64,
    pub doublings: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProductMlp {
    pub cert: ProductCert,
}

impl ProductMlp {
    pub fn lambda(&self) -> f64 {
        self.cert.lambda
    }

    pub fn apply(&self, a: f64, b: f64) -> f64 {
        gelu_product(a, b, self.cert.lambda)
    }

    /// `(W_a: 2 x 4, W_b: 4 x 1)` acting on `[a, b]`.
    pub fn ffn(&self) -> (Array2<f64>, Array2<f64>) {
        let l = self.cert.lambda;
        let k = product_scale(l);
        let w_a = ndarray::array![[1.0, -1.0, 1.0, -1.0], [1.0, -1.0, -1.0, 1.0]] / l;
        let w_b = ndarray::array![[k], [k], [-k], [-k]];
        (w_a, w_b)
    }
}

/// Double `lambda` from 1 until the grid error on `[-M, M]^2` is at most `eps`.
pub fn build_product_mlp(m: f64, eps: f64) -> Result<ProductMlp> {
    if !(m > 0.0 && eps > 0.0) {
        return Err(Error::param(format!("need M > 0 and eps > 0, got {m}, {eps}")));
    }
    let mut lambda = 1.0;
    for doublings in 0..=MAX_DOUBLINGS {
        let err = product_grid_error(m, lambda);
        if err <= eps {
            return Ok(ProductMlp { cert: ProductCert { m, eps, lambda, grid_error: err, doublings } });
        }
        lambda *= 2.0;
    }
    Err(Error::Calibration(format!("product cell on [-{m}, {m}] did not reach {eps:e}")))
}

/// Max `|GeLU(c y) / c - ReLU(y)|` over `[-M, M]`, sampled uniformly and
/// densely near the origin where the gap peaks.
pub fn relu_sim_gap(c: f64, m: f64) -> f64 {
    let near = (0..=800).map(|k| 8.0 * k as f64 / 800.0 / c).filter(|&y| y <= m);
    let pts: Vec<f64> = grid(m, 1001).chain(near.flat_map(|y| [y, -y])).collect();
    pts.into_iter()
        .map(|y| (gelu(c * y) / c - y.max(0.0)).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReluSimCert {
    pub m: f64,
    pub eps: f64,
    pub scale: f64,
    pub gap: f64,
    pub doublings: u32,
}

pub fn calibrate_relu_sim_scale(m: f64, eps: f64) -> Result<ReluSimCert> {
    if !(m > 0.0 && eps > 0.0) {
        return Err(Error::param("need M > 0 and eps > 0"));
    }
    let mut c = 1.0;
    for doublings in 0..=MAX_DOUBLINGS {
        let gap = relu_sim_gap(c, m);
        if gap <= eps {
            return Ok(ReluSimCert { m, eps, scale: c, gap, doublings });
        }
        c *= 2.0;
    }
    Err(Error::Calibration(format!("GeLU/ReLU gap on [-{m}, {m}] did not reach {eps:e}")))
}

/// Two-layer GeLU network on `[vec(A), vec(B), 1]` returning
/// `[-vec(A), vec((A - I) B), 0]`: `n^3` product cells plus `2 n^2`
/// sign-flip units. `vec` is row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MatMulMlp {
    pub n: usize,
    /// Bound on the entries of `A - I` and `B`.
    pub m: f64,
    pub eps: f64,
    pub cell: ProductCert,
    pub relu: ReluSimCert,
    /// `(2 n^2 + 1) x width`
    pub w_a: Array2<f64>,
    /// `width x (2 n^2 + 1)`
    pub w_b: Array2<f64>,
}

pub fn build_matmul_mlp(n: usize, m: f64, eps: f64) -> Result<MatMulMlp> {
    MatMulMlp::build(n, m, eps, eps)
}

impl MatMulMlp {
    pub fn build(n: usize, m: f64, eps: f64, relu_eps: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::param("n must be positive"));
        }
        let cell = build_product_mlp(m, eps / n as f64)?.cert;
        let relu = calibrate_relu_sim_scale(m, relu_eps)?;
        let nn = n * n;
        let width = 4 * nn * n + 2 * nn;
        let io = 2 * nn + 1;
        let one = 2 * nn;
        let (l, k, c) = (cell.lambda, product_scale(cell.lambda), relu.scale);
        let mut w_a = Array2::zeros((io, width));
        let mut w_b = Array2::zeros((width, io));
        for i in 0..n {
            for kk in 0..n {
                let a = i * n + kk;
                let delta = if i == kk { 1.0 } else { 0.0 };
                for j in 0..n {
                    let b = nn + kk * n + j;
                    let u = 4 * ((i * n + kk) * n + j);
                    // units see +-(a' + b) and +-(a' - b), a' = a - delta
                    for (off, sa, sb) in [(0, 1.0, 1.0), (1, -1.0, -1.0), (2, 1.0, -1.0), (3, -1.0, 1.0)] {
                        w_a[[a, u + off]] = sa / l;
                        w_a[[b, u + off]] = sb / l;
                        w_a[[one, u + off]] = -sa * delta / l;
                    }
                    let out = nn + i * n + j;
                    w_b[[u, out]] = k;
                    w_b[[u + 1, out]] = k;
                    w_b[[u + 2, out]] = -k;
                    w_b[[u + 3, out]] = -k;
                }
            }
        }
        let base = 4 * nn * n;
        for q in 0..nn {
            w_a[[q, base + 2 * q]] = c;
            w_a[[q, base + 2 * q + 1]] = -c;
            w_b[[base + 2 * q, q]] = -1.0 / c;
            w_b[[base + 2 * q + 1, q]] = 1.0 / c;
        }
        Ok(MatMulMlp { n, m, eps, cell, relu, w_a, w_b })
    }

    pub fn width(&self) -> usize {
        self.w_a.ncols()
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.w_a.t().dot(x).mapv(gelu).dot(&self.w_b)
    }

    /// Returns `(-A, (A - I) B)` as computed by the network.
    pub fn apply(&self, a: &Array2<f64>, b: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let n = self.n;
        let nn = n * n;
        let mut x = Array1::zeros(2 * nn + 1);
        for (q, v) in a.iter().enumerate() {
            x[q] = *v;
        }
        for (q, v) in b.iter().enumerate() {
            x[nn + q] = *v;
        }
        x[2 * nn] = 1.0;
        let y = self.forward(&x);
        let neg_a = Array2::from_shape_fn((n, n), |(i, j)| y[i * n + j]);
        let prod = Array2::from_shape_fn((n, n), |(i, j)| y[nn + i * n + j]);
        (neg_a, prod)
    }

    /// Place the network inside a width-`d` residual stream: `A` read from
    /// (and negated into) `a_off..`, `B` read from and `(A - I) B` added to
    /// `b_off..`, constant 1 at `one`.
    pub fn embed(&self, d: usize, a_off: usize, b_off: usize, one: usize) -> (Array2<f64>, Array2<f64>) {
        let nn = self.n * self.n;
        let map = |q: usize| {
            if q < nn {
                a_off + q
            } else if q < 2 * nn {
                b_off + q - nn
            } else {
                one
            }
        };
        let width = self.width();
        let mut w_a = Array2::zeros((d, width));
        let mut w_b = Array2::zeros((width, d));
        for q in 0..2 * nn + 1 {
            w_a.row_mut(map(q)).assign(&self.w_a.row(q));
            w_b.column_mut(map(q)).assign(&self.w_b.column(q));
        }
        (w_a, w_b)
    }
}
