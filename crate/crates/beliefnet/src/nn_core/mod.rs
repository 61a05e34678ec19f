//! Dense forward primitives: ReLU RNN, decoder-only causal Transformer,
//! stable softmax, layer norm, and the finite-precision rounding hook.

mod checkpoint;
mod rnn;
mod transformer;

pub use checkpoint::{network_from_doc, network_to_doc, Checkpoint, Network, OutputHead};
pub use rnn::{rnn_forward, RnnWeights};
pub use transformer::{
    attention_forward, dropout_mask, ffn_forward, transformer_forward, transformer_trace, HeadTrace, HeadWeights,
    LayerTrace, LayerWeights, Mode, TfConfig, TfTrace, TransformerWeights, PE_TABLE_LEN,
};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Relu => x.max(0.0),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_prime(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            _ => Err(Error::parse(format!("unknown activation `{s}`"))),
        }
    }
}

/// Standard normal CDF.
pub fn phi_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Exact GeLU, `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    x * phi_cdf(x)
}

pub fn gelu_prime(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf(x) + x * pdf
}

/// Max-subtracted softmax; `-inf` entries get probability 0.
pub fn stable_softmax(z: &[f64]) -> Result<Vec<f64>> {
    let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY || mx.is_nan() {
        return Err(Error::EmptySupport);
    }
    let e: Vec<f64> = z.iter().map(|&x| (x - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / s).collect())
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(z: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = z.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let p = stable_softmax(row.as_slice().expect("standard layout"))?;
        row.assign(&ArrayView1::from(&p));
    }
    Ok(out)
}

/// `(x - mean) / sqrt(var + 1e-5) * gain + bias`.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) * rstd * g + b)
        .collect()
}

/// Row-wise layer norm returning the normalized (pre-gain) rows and `1/std`.
pub fn layer_norm_rows(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, Array2<f64>, Vec<f64>) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstds = Vec::with_capacity(x.nrows());
    for mut row in xhat.axis_iter_mut(Axis(0)) {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * rstd);
        rstds.push(rstd);
    }
    let y = &xhat * gain + bias;
    (y, xhat, rstds)
}

/// Finite-precision mode: significands rounded to `mantissa_bits` fraction bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PrecisionMode {
    pub enabled: bool,
    pub mantissa_bits: u32,
}

impl PrecisionMode {
    pub fn bits(mantissa_bits: u32) -> Result<Self> {
        if !(1..=52).contains(&mantissa_bits) {
            return Err(Error::param(format!("mantissa bits {mantissa_bits} outside 1..=52")));
        }
        Ok(PrecisionMode { enabled: true, mantissa_bits })
    }

    pub fn off() -> Self {
        PrecisionMode::default()
    }

    #[inline]
    pub fn q(&self, x: f64) -> f64 {
        quantize(x, *self)
    }
}

/// Round the significand of `x` to `mode.mantissa_bits` bits, ties to even.
pub fn quantize(x: f64, mode: PrecisionMode) -> f64 {
    if !mode.enabled || mode.mantissa_bits >= 52 || x == 0.0 || !x.is_finite() {
        return x;
    }
    let shift = 52 - mode.mantissa_bits.max(1);
    let u = x.to_bits();
    let mask = (1u64 << shift) - 1;
    let half = 1u64 << (shift - 1);
    let low = u & mask;
    let mut hi = u & !mask;
    if low > half || (low == half && (hi >> shift) & 1 == 1) {
        // a carry out of the significand bumps the exponent, which is the
        // correct rounding of 1.11..1 x 2^e to 1.0 x 2^(e+1)
        hi += 1u64 << shift;
    }
    f64::from_bits(hi)
}

/// `a . b`, rounding every product and partial sum when precision is on.
pub fn matmul(a: &Array2<f64>, b: &Array2<f64>, prec: PrecisionMode) -> Array2<f64> {
    if !prec.enabled {
        return a.dot(b);
    }
    let (r, k) = a.dim();
    let c = b.ncols();
    let mut out = Array2::zeros((r, c));
    for i in 0..r {
        for j in 0..c {
            let mut acc = 0.0;
            for t in 0..k {
                acc = prec.q(acc + prec.q(a[[i, t]] * b[[t, j]]));
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Round every entry in place.
pub fn quantize_all(a: &mut Array2<f64>, prec: PrecisionMode) {
    if prec.enabled {
        a.mapv_inplace(|x| prec.q(x));
    }
}
