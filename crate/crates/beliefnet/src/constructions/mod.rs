//! Explicit weight constructions for belief tracking and their numeric checks.
//!
//! * [`build_rnn_theorem1`]: exact RNN for linear recurrences with one-hot
//!   gating, width `n m`.
//! * [`build_tf_theorem2`]: log-depth Transformer that multiplies transition
//!   matrices by divide and conquer.
//! * [`build_norm_mlp_theorem3`]: deep MLP that rescales and then
//!   l1-normalizes an unnormalized belief.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::linalg::{col_abs_sum_norm, spectral_norm};
use crate::model_zoo::{HmmInstance, MatMulInstance, ModelInstance};
use crate::nn_core::Activation;

mod norm;
mod product;
mod rnn;
mod transformer;

pub use norm::{
    build_norm_mlp_theorem3, clamp_p, norm_mlp_forward, NormMlpWeights, StochasticPipeline,
};
pub use product::{
    build_matmul_mlp, build_product_mlp, calibrate_relu_sim_scale, gelu_product, product_grid_error,
    relu_sim_gap, MatMulMlp, ProductCert, ProductMlp, ReluSimCert,
};
pub use rnn::{build_rnn_theorem1, theorem1_gate_margin};
pub use transformer::{
    augment_input, build_tf_theorem2, build_tf_theorem2_with, cot_block_input, exact_lambdas,
    theorem2_eta, theorem2_gamma, verify_construction, ConstructionReport, Theorem2, Theorem2Layout,
    Theorem2Options,
};

/// Default cap on the magnitude of any constructed weight.
pub const MAGNITUDE_CAP: f64 = 1e12;

/// Scalars that pin down a construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstructionParams {
    /// Horizon.
    pub t: usize,
    pub n: usize,
    /// Depth `ceil(log2 T)`.
    pub l: usize,
    pub gamma: f64,
    pub eta: f64,
    pub lambda: f64,
    pub relu_sim_scale: f64,
    pub alpha_rnn: f64,
}

impl ConstructionParams {
    pub fn check(&self) -> Result<()> {
        let pos = [self.gamma, self.eta, self.lambda, self.relu_sim_scale, self.alpha_rnn];
        if pos.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::Validation(format!("non-positive construction scalar in {self:?}")));
        }
        if self.l != depth_for(self.t) {
            return Err(Error::Validation(format!("depth {} != ceil(log2 {})", self.l, self.t)));
        }
        Ok(())
    }
}

/// `ceil(log2 t)` for `t >= 1`.
pub fn depth_for(t: usize) -> usize {
    (usize::BITS - (t.max(1) - 1).leading_zeros()) as usize
}

/// `b_t = A_{o_t} ... A_{o_1} b0`: the common input of the Theorem-1 and
/// Theorem-2 builders.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRecurrence {
    pub mats: Vec<Array2<f64>>,
    pub b0: Array1<f64>,
}

impl LinearRecurrence {
    pub fn new(mats: Vec<Array2<f64>>, b0: Array1<f64>) -> Result<Self> {
        let n = b0.len();
        if mats.is_empty() || n == 0 {
            return Err(Error::param("empty recurrence"));
        }
        if mats.iter().any(|a| a.dim() != (n, n)) {
            return Err(Error::shape(format!("operators must be {n}x{n}")));
        }
        Ok(LinearRecurrence { mats, b0 })
    }

    pub fn n(&self) -> usize {
        self.b0.len()
    }

    pub fn m(&self) -> usize {
        self.mats.len()
    }

    pub fn from_matmul(mm: &MatMulInstance) -> Self {
        LinearRecurrence { mats: mm.a.clone(), b0: mm.b0.clone() }
    }

    /// Support indicators of `diag(O_o) P` for an HMM whose normalized belief
    /// stays a point mass: every column of every operator has at most one
    /// nonzero. Deterministic HMMs and lifted deterministic automata qualify.
    pub fn from_belief_deterministic(hmm: &HmmInstance) -> Result<Self> {
        let mut mats = Vec::with_capacity(hmm.m);
        for o in 0..hmm.m {
            let a = hmm.observation_operator(o);
            for (s, col) in a.columns().into_iter().enumerate() {
                if col.iter().filter(|&&x| x != 0.0).count() > 1 {
                    return Err(Error::Unsupported(format!(
                        "stochastic transition: operator {o} spreads state {s} over several states"
                    )));
                }
            }
            mats.push(a.mapv(|x| if x != 0.0 { 1.0 } else { 0.0 }));
        }
        Ok(LinearRecurrence { mats, b0: hmm.initial_belief() })
    }

    /// Unnormalized operators `diag(O_o) P`; beliefs need a final l1 division.
    pub fn unnormalized(hmm: &HmmInstance) -> Self {
        LinearRecurrence { mats: (0..hmm.m).map(|o| hmm.observation_operator(o)).collect(), b0: hmm.initial_belief() }
    }

    /// MatMul instances directly; discrete families through the
    /// point-mass rule of [`Self::from_belief_deterministic`].
    pub fn from_model(model: &ModelInstance) -> Result<Self> {
        match model {
            ModelInstance::MatMul(mm) => Ok(Self::from_matmul(mm)),
            ModelInstance::Lds(_) => Err(Error::Unsupported("continuous observations".into())),
            other => Self::from_belief_deterministic(&other.as_hmm().expect("discrete family")),
        }
    }

    /// Exact recursion; entry `t` is `b_{t+1}`.
    pub fn run(&self, obs: &[usize]) -> Result<Vec<Array1<f64>>> {
        let mut b = self.b0.clone();
        let mut out = Vec::with_capacity(obs.len());
        for &o in obs {
            let a = self.mats.get(o).ok_or_else(|| Error::param(format!("observation {o} out of range")))?;
            b = a.dot(&b);
            out.push(b.clone());
        }
        Ok(out)
    }

    /// Smallest of the induced 1- and 2-norm bounds shared by all operators.
    /// When it is at most 1, every product has entries in `[-1, 1]`.
    pub fn contraction_bound(&self) -> f64 {
        let (r1, r2) = self.norm_bounds();
        r1.min(r2)
    }

    /// Largest induced 1-norm and largest spectral norm over the operators.
    pub fn norm_bounds(&self) -> (f64, f64) {
        let r1 = self.mats.iter().map(col_abs_sum_norm).fold(0.0, f64::max);
        let r2 = self.mats.iter().map(spectral_norm).fold(0.0, f64::max);
        (r1, r2)
    }
}

/// One fully connected layer `act(W x + b)`; `W` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub act: Activation,
}

impl DenseLayer {
    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        let act = self.act;
        (self.w.dot(x) + &self.b).mapv(|v| act.apply(v))
    }
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, &x| if x.is_finite() { m.max(x.abs()) } else { f64::INFINITY })
}
