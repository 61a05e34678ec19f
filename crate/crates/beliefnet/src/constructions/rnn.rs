use ndarray::{Array1, Array2};

use super::LinearRecurrence;
use crate::error::{Error, Result};
use crate::nn_core::{PrecisionMode, RnnWeights};

/// Exact gated RNN for `b_t = A_{o_t} b_{t-1}` on one-hot inputs.
///
/// Hidden state is `m` blocks of size `n`; block `o` holds
/// `A_o b_{t-1} + alpha/2` when `o` is observed and is cut to zero by the
/// ReLU otherwise. The decoder sums the blocks and subtracts `alpha/2`.
/// Returns the weights and `alpha = 4 ||b0||_2`.
pub fn build_rnn_theorem1(rec: &LinearRecurrence) -> Result<(RnnWeights, f64)> {
    let (n, m) = (rec.n(), rec.m());
    let alpha = 4.0 * rec.b0.dot(&rec.b0).sqrt();
    if alpha == 0.0 {
        return Err(Error::param("b0 must be nonzero"));
    }
    let half = alpha / 2.0;
    // every reachable b_t must satisfy ||b_t||_inf < alpha / 2
    let (r1, r2) = rec.norm_bounds();
    let l1 = rec.b0.iter().map(|x| x.abs()).sum::<f64>();
    let tol = 1.0 + 1e-9;
    if !(r2 <= tol || (r1 <= tol && l1 < half)) {
        return Err(Error::Unsupported("operators are not norm-bounded by 1; the gate margin is not guaranteed".into()));
    }
    let d = n * m;
    let mut w1 = Array2::zeros((d, m));
    let mut w2 = Array2::zeros((d, d));
    let mut b = Array1::zeros(d);
    for (o, a) in rec.mats.iter().enumerate() {
        let row_sums = a.sum_axis(ndarray::Axis(1));
        for r in 0..n {
            w1[[o * n + r, o]] = alpha;
            b[o * n + r] = -half - half * row_sums[r];
            for o2 in 0..m {
                for c in 0..n {
                    w2[[o * n + r, o2 * n + c]] = a[[r, c]];
                }
            }
        }
    }
    let mut h0 = Array1::zeros(d);
    for r in 0..n {
        h0[r] = rec.b0[r] + half;
    }
    let mut dec_w = Array2::zeros((n, d));
    for o in 0..m {
        for r in 0..n {
            dec_w[[r, o * n + r]] = 1.0;
        }
    }
    let w = RnnWeights { w1, w2, b, h0, dec_w, dec_b: Array1::from_elem(n, -half), precision: PrecisionMode::off() };
    w.check()?;
    Ok((w, alpha))
}

/// Largest pre-activation among the blocks that were not selected, over
/// the whole run. Negative means every gate closed exactly.
pub fn theorem1_gate_margin(w: &RnnWeights, m: usize, obs: &[usize]) -> Result<f64> {
    let d = w.hidden();
    if m == 0 || d % m != 0 {
        return Err(Error::shape("hidden width is not a multiple of m"));
    }
    let n = d / m;
    let mut h = w.h0.clone();
    let mut worst = f64::NEG_INFINITY;
    for &o in obs {
        if o >= m {
            return Err(Error::param(format!("observation {o} out of range")));
        }
        let pre = w.w1.column(o).to_owned() + w.w2.dot(&h) + &w.b;
        for (i, &p) in pre.iter().enumerate() {
            if i / n != o {
                worst = worst.max(p);
            }
        }
        h = pre.mapv(|v| v.max(0.0));
    }
    Ok(worst)
}
