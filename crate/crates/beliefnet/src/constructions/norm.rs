use ndarray::{s, Array1, Array2};

use super::product::{build_product_mlp, ProductCert};
use super::transformer::{build_tf_theorem2_with, Theorem2, Theorem2Options};
use super::{depth_for, DenseLayer, LinearRecurrence};
use crate::error::{Error, Result};
use crate::model_zoo::HmmInstance;
use crate::nn_core::Activation;

/// Budget for the geometric-series truncation.
const SERIES_TARGET: f64 = 1e-7;
/// Per-product budget of the phase-2 cells.
const PHASE2_CELL_EPS: f64 = 1e-8;
/// Budget of the phase-1 cells. Their Taylor error is relative to the product.
const STAGE_CELL_EPS: f64 = 1e-8;
/// Bound on phase-2 cell inputs: `x <= 1`, `0 <= y <= 5/6`, plus slack.
const PHASE2_M: f64 = 1.5;

/// `min(max(x, 0), 1)` written as `ReLU(1 - ReLU(1 - x))`.
pub fn clamp_p(x: f64) -> f64 {
    (1.0 - (1.0 - x).max(0.0)).max(0.0)
}

/// One rescaling stage: if `v >= tau + 1` multiply by `f`, if `v <= tau`
/// keep, in between a mix. `u` bounds `v` on entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage {
    pub tau: f64,
    pub f: f64,
    pub u: f64,
}

/// Depth-`O(log T)` MLP mapping an unnormalized positive vector to its
/// l1-normalization.
///
/// Phase 1 multiplies by `C^T` (`C = 1/c_l`) and then shrinks the mass by
/// clamp-gated factors `c_l^(floor(T/2^(k+1)))` and finally by halvings until
/// it lies in `[1/4, 3/2]`. The gate multiplies `min(z, tau + 1)` by the clamp
/// value with a product cell, so every coordinate gets the same factor. Phase 2 multiplies `(2/3) b` by
/// `prod_j (1 + c^(2^j)) = sum_{i < 2^k} c^i`, `c = 1 - 2 ||b||_1 / 3`,
/// with GeLU product cells.
#[derive(Debug, Clone, PartialEq)]
pub struct NormMlpWeights {
    pub n: usize,
    pub t: usize,
    pub c_l: f64,
    /// `1 / c_l`.
    pub c_scale: f64,
    /// Number of series-doubling steps.
    pub k: usize,
    pub stages: Vec<Stage>,
    pub phase1: Vec<DenseLayer>,
    pub phase2: Vec<DenseLayer>,
    /// Reads the phase-1 vector off the last phase-1 layer.
    pub mid_w: Array2<f64>,
    pub mid_b: Array1<f64>,
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
    /// Cell used by the phase-1 stages, on `[-1, 1]`.
    pub stage_cell: ProductCert,
    /// Cell used by phase 2.
    pub cell: ProductCert,
}

/// Stack of dense layers plus an affine readout of the current logical
/// variables from the last layer's units.
struct Stack {
    layers: Vec<DenseLayer>,
    read_w: Array2<f64>,
    read_b: Array1<f64>,
}

impl Stack {
    fn new(read_w: Array2<f64>) -> Self {
        let rows = read_w.nrows();
        Stack { layers: Vec::new(), read_w, read_b: Array1::zeros(rows) }
    }

    /// `pre` is `units x vars` over the logical variables; the new readout maps
    /// the units to the next logical variables.
    fn push(&mut self, pre: Array2<f64>, pre_b: Array1<f64>, act: Activation, read_w: Array2<f64>, read_b: Array1<f64>) {
        let w = pre.dot(&self.read_w);
        let b = pre.dot(&self.read_b) + pre_b;
        self.layers.push(DenseLayer { w, b, act });
        self.read_w = read_w;
        self.read_b = read_b;
    }
}

/// Rows `2i, 2i+1` of a pass-through block carry `+x_i, -x_i`; the readout is
/// `x_i = unit_{2i} - unit_{2i+1}` for both ReLU and GeLU.
fn pass_pre(n: usize, vars: usize, first: usize) -> Array2<f64> {
    let mut p = Array2::zeros((2 * n, vars));
    for i in 0..n {
        p[[2 * i, first + i]] = 1.0;
        p[[2 * i + 1, first + i]] = -1.0;
    }
    p
}

fn pass_read(n: usize, units: usize) -> Array2<f64> {
    let mut r = Array2::zeros((n, units));
    for i in 0..n {
        r[[i, 2 * i]] = 1.0;
        r[[i, 2 * i + 1]] = -1.0;
    }
    r
}

fn stack_rows(blocks: &[Array2<f64>]) -> Array2<f64> {
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths")
}

/// Four GeLU units at `base..base + 4` computing `(s_a x_a) x_b` and adding
/// `scale` times it to readout row `out`.
#[allow(clippy::too_many_arguments)]
fn product_cell(
    pre: &mut Array2<f64>,
    read: &mut Array2<f64>,
    base: usize,
    (a, sa): (usize, f64),
    b: usize,
    out: usize,
    scale: f64,
    lam: f64,
) {
    let kappa = (2.0 * std::f64::consts::PI).sqrt() * lam * lam / 8.0;
    for (off, pa, pb) in [(0, 1.0, 1.0), (1, -1.0, -1.0), (2, 1.0, -1.0), (3, -1.0, 1.0)] {
        pre[[base + off, a]] += pa * sa / lam;
        pre[[base + off, b]] += pb / lam;
    }
    for (off, sg) in [(0, 1.0), (1, 1.0), (2, -1.0), (3, -1.0)] {
        read[[out, base + off]] += sg * scale * kappa;
    }
}

fn stages_for(n: usize, t: usize, c_l: f64) -> Vec<Stage> {
    let big = 1.0 / c_l;
    let mut u = n as f64 * big.powi(t as i32) * (1.0 + 1e-9);
    let mut out = Vec::new();
    let mut k = 0;
    loop {
        let e = t >> (k + 1);
        if e == 0 {
            break;
        }
        let tau = big.powi(e as i32);
        let f = c_l.powi(e as i32);
        out.push(Stage { tau, f, u });
        u = (f * u).max(tau + 1.0);
        k += 1;
    }
    while u > 1.5 {
        out.push(Stage { tau: 0.5, f: 0.5, u });
        u = (0.5 * u).max(1.5);
    }
    out
}

pub fn build_norm_mlp_theorem3(n: usize, t: usize, c_l: f64) -> Result<NormMlpWeights> {
    if !(c_l > 0.0 && c_l < 1.0) {
        return Err(Error::param(format!("c_l = {c_l} outside (0, 1)")));
    }
    if n == 0 || t == 0 {
        return Err(Error::param("n and T must be positive"));
    }
    let big = 1.0 / c_l;
    if t as f64 * big.log10() + (n as f64).log10() > 150.0 {
        return Err(Error::Capacity(format!("C_l^T = {big}^{t} is beyond the float range used here")));
    }
    let stages = stages_for(n, t, c_l);

    let stage_cell = build_product_mlp(1.0, STAGE_CELL_EPS)?.cert;
    let mut st = Stack::new(Array2::eye(n) * big.powi(t as i32));
    for sg in &stages {
        let cap = sg.tau + 1.0;
        // A: z+-, r_i = ReLU(z_i - cap), u1 = ReLU(cap - v), u2 = ReLU(tau - v)
        let ones = Array2::from_elem((1, n), -1.0);
        let pre = stack_rows(&[pass_pre(n, n, 0), Array2::eye(n), ones.clone(), ones]);
        let mut pre_b = Array1::zeros(3 * n + 2);
        pre_b.slice_mut(s![2 * n..3 * n]).fill(-cap);
        pre_b[3 * n] = cap;
        pre_b[3 * n + 1] = sg.tau;
        let mut read = Array2::zeros((2 * n + 2, 3 * n + 2));
        read.slice_mut(s![..n, ..]).assign(&pass_read(n, 3 * n + 2));
        for i in 0..n + 2 {
            read[[n + i, 2 * n + i]] = 1.0;
        }
        st.push(pre, pre_b, Activation::Relu, read, Array1::zeros(2 * n + 2));

        // B: z+-, r, q = ReLU(u1 - u2) = 1 - p(v - tau); w = z - r = min(z, cap)
        let mut pre = Array2::zeros((3 * n + 1, 2 * n + 2));
        pre.slice_mut(s![..2 * n, ..]).assign(&pass_pre(n, 2 * n + 2, 0));
        for i in 0..n {
            pre[[2 * n + i, n + i]] = 1.0;
        }
        pre[[3 * n, 2 * n]] = 1.0;
        pre[[3 * n, 2 * n + 1]] = -1.0;
        let mut read = Array2::zeros((2 * n + 1, 3 * n + 1));
        let zr = pass_read(n, 3 * n + 1);
        read.slice_mut(s![..n, ..]).assign(&zr);
        read.slice_mut(s![n..2 * n, ..]).assign(&zr);
        for i in 0..n {
            read[[n + i, 2 * n + i]] = -1.0;
        }
        read[[2 * n, 3 * n]] = 1.0;
        st.push(pre, Array1::zeros(3 * n + 1), Activation::Relu, read, Array1::zeros(2 * n + 1));

        // C (GeLU): z+- and cells for (w_i / cap) q; z' = f z + (1 - f) cap (w / cap) q
        let units = 2 * n + 4 * n;
        let mut pre = Array2::zeros((units, 2 * n + 1));
        pre.slice_mut(s![..2 * n, ..]).assign(&pass_pre(n, 2 * n + 1, 0));
        let mut read = pass_read(n, units) * sg.f;
        for i in 0..n {
            product_cell(&mut pre, &mut read, 2 * n + 4 * i, (n + i, 1.0 / cap), 2 * n, i, (1.0 - sg.f) * cap, stage_cell.lambda);
        }
        st.push(pre, Array1::zeros(units), Activation::Gelu, read, Array1::zeros(n));
    }
    let phase1 = std::mem::take(&mut st.layers);
    let (mid_w, mid_b) = (st.read_w.clone(), st.read_b.clone());

    // logical (x, y) = ((2/3) z, 1 - (2/3) sum z)
    let mut to_xy = Array2::zeros((n + 1, n));
    for i in 0..n {
        to_xy[[i, i]] = 2.0 / 3.0;
        to_xy[[n, i]] = -2.0 / 3.0;
    }
    st.read_w = to_xy.dot(&st.read_w);
    st.read_b = to_xy.dot(&st.read_b);
    st.read_b[n] += 1.0;

    let k = series_depth(SERIES_TARGET);
    let cell = build_product_mlp(PHASE2_M, PHASE2_CELL_EPS)?.cert;
    let lam = cell.lambda;
    let units = 2 * n + 4 * (n + 1);
    for _ in 0..k {
        let mut pre = Array2::zeros((units, n + 1));
        pre.slice_mut(s![..2 * n, ..]).assign(&pass_pre(n, n + 1, 0));
        let mut read = Array2::zeros((n + 1, units));
        read.slice_mut(s![..n, ..]).assign(&pass_read(n, units));
        for c in 0..=n {
            // cell c multiplies (x_c or y) by y
            product_cell(&mut pre, &mut read, 2 * n + 4 * c, (c.min(n), 1.0), n, c, 1.0, lam);
        }
        st.push(pre, Array1::zeros(units), Activation::Gelu, read, Array1::zeros(n + 1));
    }
    let out_w = st.read_w.slice(s![..n, ..]).to_owned();
    let out_b = st.read_b.slice(s![..n]).to_owned();
    Ok(NormMlpWeights {
        n,
        t,
        c_l,
        c_scale: big,
        k,
        stages,
        phase1,
        phase2: st.layers,
        mid_w,
        mid_b,
        out_w,
        out_b,
        stage_cell,
        cell,
    })
}

/// Smallest `k` with `6 (5/6)^(2^k) <= target`.
fn series_depth(target: f64) -> usize {
    let mut k = 0;
    while 6.0 * (5.0f64 / 6.0).powf(2f64.powi(k as i32)) > target {
        k += 1;
    }
    k
}

impl NormMlpWeights {
    /// Phase-1 vector `b_bar` with `||b_bar||_1` in `[1/4, 3/2]`.
    pub fn phase1_output(&self, x: &Array1<f64>) -> Array1<f64> {
        let h = self.phase1.iter().fold(x.clone(), |h, l| l.forward(&h));
        self.mid_w.dot(&h) + &self.mid_b
    }

    pub fn layer_count(&self) -> (usize, usize) {
        (self.phase1.len(), self.phase2.len())
    }

    pub fn max_weight(&self) -> f64 {
        self.phase1
            .iter()
            .chain(&self.phase2)
            .flat_map(|l| l.w.iter().chain(l.b.iter()))
            .fold(0.0f64, |m, x| m.max(x.abs()))
    }
}

pub fn norm_mlp_forward(w: &NormMlpWeights, x: &Array1<f64>) -> Result<Array1<f64>> {
    if x.len() != w.n {
        return Err(Error::shape(format!("input of length {} for n = {}", x.len(), w.n)));
    }
    let h = w.phase1.iter().chain(&w.phase2).fold(x.clone(), |h, l| l.forward(&h));
    let y = w.out_w.dot(&h) + &w.out_b;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite normalization output".into()));
    }
    Ok(y)
}

/// Divide-and-conquer Transformer on the unnormalized operators
/// `diag(O_o) P` followed by the normalization MLP at every position.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticPipeline {
    pub tf: Theorem2,
    pub norm: NormMlpWeights,
}

impl StochasticPipeline {
    /// `c_l` is the smallest emission probability, a lower bound on the
    /// per-step mass `||A_o b||_1` for any belief `b`.
    pub fn build(hmm: &HmmInstance, t: usize) -> Result<Self> {
        let c_l = hmm.o.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(c_l > 0.0) {
            return Err(Error::Unsupported("an emission probability is zero; no per-step mass bound".into()));
        }
        let rec = LinearRecurrence::unnormalized(hmm);
        let l = depth_for(t) as i32;
        let eta = (1.0 / ((8.0 * hmm.n as f64).powi(l + 1) * (4.0 * t as f64).exp())).max(1e-300);
        let opts = Theorem2Options {
            eta: Some(eta),
            mlp_eps: Some(1e-5),
            relu_eps: Some(1e-12),
            entry_bound: Some(2.0),
            belief_channel: false,
        };
        let tf = build_tf_theorem2_with(&rec, t, &opts)?;
        let norm = build_norm_mlp_theorem3(hmm.n, t, c_l.min(0.999))?;
        Ok(StochasticPipeline { tf, norm })
    }

    /// Normalized beliefs at `1..=len(obs)`.
    pub fn beliefs(&self, obs: &[usize]) -> Result<Vec<Array1<f64>>> {
        self.tf.run(obs)?.iter().map(|b| norm_mlp_forward(&self.norm, b)).collect()
    }
}
