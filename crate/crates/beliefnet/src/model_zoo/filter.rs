//! Exact inference: forward filtering, an enumeration oracle, and the Kalman
//! predictor for the linear-Gaussian model.

use nalgebra::{DMatrix, DVector};
use ndarray::Array1;

use super::{HmmInstance, LdsInstance};
use crate::error::{Error, Result};

/// Largest `n^T` the enumeration oracle accepts.
pub const BRUTE_FORCE_LIMIT: u128 = 10_000_000;

/// `diag(O(o | .)) P b / |.|_1`.
pub fn belief_update(model: &HmmInstance, b: &Array1<f64>, o: usize) -> Result<Array1<f64>> {
    if o >= model.m {
        return Err(Error::param(format!("observation {o} out of range (m = {})", model.m)));
    }
    if b.len() != model.n {
        return Err(Error::shape(format!("belief has length {}, expected {}", b.len(), model.n)));
    }
    let mut v = model.p.dot(b);
    v *= &model.o.row(o);
    let z = v.sum();
    if !(z > 0.0) {
        return Err(Error::ImpossibleObservation { index: 0, obs: o });
    }
    v /= z;
    Ok(v)
}

/// Beliefs `b_1, ..., b_T` folded from the point mass at `s0`.
pub fn belief_sequence(model: &HmmInstance, obs: &[usize]) -> Result<Vec<Array1<f64>>> {
    let mut b = model.initial_belief();
    let mut out = Vec::with_capacity(obs.len());
    for (t, &o) in obs.iter().enumerate() {
        b = belief_update(model, &b, o).map_err(|e| match e {
            Error::ImpossibleObservation { obs, .. } => Error::ImpossibleObservation { index: t, obs },
            other => other,
        })?;
        out.push(b.clone());
    }
    Ok(out)
}

/// Filtering marginals by enumerating every hidden path of every prefix.
pub fn brute_force_posterior(model: &HmmInstance, obs: &[usize]) -> Result<Vec<Array1<f64>>> {
    let n = model.n;
    let t_len = obs.len();
    let fits = (n as u128).checked_pow(t_len as u32).is_some_and(|p| p <= BRUTE_FORCE_LIMIT);
    if !fits {
        return Err(Error::Capacity(format!("{n}^{t_len} hidden paths exceed the enumeration limit")));
    }
    if let Some(&o) = obs.iter().find(|&&o| o >= model.m) {
        return Err(Error::param(format!("observation {o} out of range")));
    }
    let mut out = Vec::with_capacity(t_len);
    for t in 1..=t_len {
        let mut marg = Array1::<f64>::zeros(n);
        let mut path = vec![0usize; t];
        loop {
            let mut w = 1.0;
            let mut prev = model.s0;
            for (k, &s) in path.iter().enumerate() {
                w *= model.p[[s, prev]] * model.o[[obs[k], s]];
                if w == 0.0 {
                    break;
                }
                prev = s;
            }
            marg[path[t - 1]] += w;
            // odometer increment
            let mut k = 0;
            while k < t {
                path[k] += 1;
                if path[k] < n {
                    break;
                }
                path[k] = 0;
                k += 1;
            }
            if k == t {
                break;
            }
        }
        let z = marg.sum();
        if !(z > 0.0) {
            return Err(Error::ImpossibleObservation { index: t - 1, obs: obs[t - 1] });
        }
        marg /= z;
        out.push(marg);
    }
    Ok(out)
}

/// Law of the next observation, `O P b`.
pub fn next_obs_dist(model: &HmmInstance, b: &Array1<f64>) -> Array1<f64> {
    model.o.dot(&model.p.dot(b))
}

fn to_dvec(v: &Array1<f64>) -> DVector<f64> {
    DVector::from_iterator(v.len(), v.iter().copied())
}

fn to_arr(v: &DVector<f64>) -> Array1<f64> {
    Array1::from_iter(v.iter().copied())
}

/// Kalman recursion from the known start `x0` (zero initial covariance).
/// Returns `len(ys) + 1` predictive means: entry `t` is `E[y_{t+1} | y_1..y_t]`.
fn kalman_all(model: &LdsInstance, ys: &[Array1<f64>]) -> Result<Vec<Array1<f64>>> {
    let n = model.n;
    let a = crate::linalg::to_na(&model.a);
    let b = crate::linalg::to_na(&model.b);
    let q = DMatrix::<f64>::identity(n, n) * model.sigma_state.powi(2);
    let r = DMatrix::<f64>::identity(n, n) * model.sigma_obs.powi(2);
    let mut mu = to_dvec(&model.x0);
    let mut sigma = DMatrix::<f64>::zeros(n, n);
    let mut out = Vec::with_capacity(ys.len() + 1);
    for (t, y) in ys.iter().enumerate() {
        if y.len() != n {
            return Err(Error::shape(format!("y_{t} has length {}, expected {n}", y.len())));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite observation at step {t}")));
        }
        let mu_pred = &a * &mu;
        let sig_pred = &a * &sigma * a.transpose() + &q;
        let y_pred = &b * &mu_pred;
        out.push(to_arr(&y_pred));
        if sig_pred.iter().all(|&v| v == 0.0) {
            mu = mu_pred;
            sigma = sig_pred;
            continue;
        }
        let s = &b * &sig_pred * b.transpose() + &r;
        let chol = s
            .cholesky()
            .ok_or_else(|| Error::Numeric(format!("innovation covariance not positive definite at step {t}")))?;
        // K = Sigma_pred B^T S^{-1}, via S K^T = B Sigma_pred
        let kt = chol.solve(&(&b * &sig_pred));
        let k = kt.transpose();
        let innov = to_dvec(y) - &y_pred;
        mu = &mu_pred + &k * innov;
        let ikb = DMatrix::<f64>::identity(n, n) - &k * &b;
        // Joseph form keeps the covariance symmetric positive semidefinite.
        sigma = &ikb * &sig_pred * ikb.transpose() + &k * &r * k.transpose();
    }
    let y_pred = &b * (&a * &mu);
    out.push(to_arr(&y_pred));
    Ok(out)
}

/// `E[y_t | y_<t]` for `t = 1..T`; the first entry is `B A x0`.
pub fn kalman_predictive_means(model: &LdsInstance, ys: &[Array1<f64>]) -> Result<Vec<Array1<f64>>> {
    let mut all = kalman_all(model, ys)?;
    all.pop();
    Ok(all)
}

/// `E[y_{t+1} | y_1..y_t]` for `t = 1..T`, the per-step regression target.
pub fn kalman_next_means(model: &LdsInstance, ys: &[Array1<f64>]) -> Result<Vec<Array1<f64>>> {
    let mut all = kalman_all(model, ys)?;
    all.remove(0);
    Ok(all)
}
