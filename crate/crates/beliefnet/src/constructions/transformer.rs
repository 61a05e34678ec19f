use std::f64::consts::PI;

use ndarray::{Array1, Array2};

use super::product::{MatMulMlp, ProductCert, ReluSimCert};
use super::{depth_for, max_abs, ConstructionParams, LinearRecurrence, MAGNITUDE_CAP};
use crate::error::{Error, Result};
use crate::nn_core::{transformer_trace, Mode, TfConfig, TransformerWeights};
use crate::textfmt::TextDoc;

/// Largest `n` accepted; the MLP alone holds `2 (2n^2+6)(4n^3+2n^2)` weights
/// per layer.
const MAX_N: usize = 12;
/// Fallback per-product budget when the requested one is below the float
/// noise floor of the product cells.
const MLP_EPS_FLOOR: f64 = 1e-8;

/// `1 / ((8n)^(L+1) T)`.
pub fn theorem2_eta(n: usize, t: usize) -> f64 {
    let l = depth_for(t) as i32;
    1.0 / ((8.0 * n as f64).powi(l + 1) * t as f64)
}

/// `4 sqrt(2) T ln(2T / eta) / pi`.
pub fn theorem2_gamma(t: usize, eta: f64) -> f64 {
    4.0 * 2f64.sqrt() * t as f64 * (2.0 * t as f64 / eta).ln() / PI
}

/// Residual-stream layout `[scratch n^2 | 0 0 0 | vec(L) n^2 | sin cos 1]`.
///
/// The matrix slot holds transposed operators, `L_i = A_{o_i}^T`, so that
/// products in time order are plain left-to-right products.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Theorem2Layout {
    pub n: usize,
    pub m: usize,
    pub belief_channel: bool,
}

impl Theorem2Layout {
    pub fn d(&self) -> usize {
        2 * self.n * self.n + 6
    }

    pub fn scratch(&self, r: usize, c: usize) -> usize {
        r * self.n + c
    }

    pub fn lam_off(&self) -> usize {
        self.n * self.n + 3
    }

    pub fn lam(&self, r: usize, c: usize) -> usize {
        self.lam_off() + r * self.n + c
    }

    pub fn sin(&self) -> usize {
        2 * self.n * self.n + 3
    }

    pub fn cos(&self) -> usize {
        self.sin() + 1
    }

    pub fn one(&self) -> usize {
        self.sin() + 2
    }

    /// One-hot observations, BOS flag, `sin, cos, 1`, then the optional
    /// `n`-wide belief channel.
    pub fn input_dim(&self) -> usize {
        self.m + 4 + if self.belief_channel { self.n } else { 0 }
    }

    pub fn read_matrix(&self, row: ndarray::ArrayView1<f64>, scratch: bool) -> Array2<f64> {
        let n = self.n;
        Array2::from_shape_fn((n, n), |(r, c)| row[if scratch { self.scratch(r, c) } else { self.lam(r, c) }])
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Theorem2Options {
    pub eta: Option<f64>,
    /// l-inf budget of the matrix-product MLP; defaults to `eta`.
    pub mlp_eps: Option<f64>,
    /// GeLU/ReLU gap budget; defaults to `eta`.
    pub relu_eps: Option<f64>,
    /// Bound on the entries of `A - I` and `B` seen by the product cells.
    pub entry_bound: Option<f64>,
    /// Replace the BOS identity by a belief channel `b -> vec(1 b^T)` and
    /// decode with `e_1`; used for block chain-of-thought. The belief token
    /// is one more factor in the product, so only positions below `2^L`
    /// see it: a block of `b` observations needs horizon `b + 1`.
    pub belief_channel: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem2 {
    pub weights: TransformerWeights,
    pub params: ConstructionParams,
    pub layout: Theorem2Layout,
    pub mlp_eps: f64,
    pub mlp_eps_floored: bool,
    pub cell: ProductCert,
    pub relu: ReluSimCert,
    pub mlp_width: usize,
}

impl Theorem2 {
    pub fn max_weight(&self) -> f64 {
        self.weights.tensors().iter().map(|(_, _, v)| max_abs(v)).fold(0.0, f64::max)
    }

    /// Decoded outputs at positions `1..=len(obs)`.
    pub fn run(&self, obs: &[usize]) -> Result<Vec<Array1<f64>>> {
        let x = augment_input(obs, self.params.t, self.layout.m)?;
        let y = crate::nn_core::transformer_forward(&self.weights, &x, Mode::Eval, 0)?;
        Ok((1..y.nrows()).map(|i| y.row(i).to_owned()).collect())
    }
}

pub fn build_tf_theorem2(rec: &LinearRecurrence, t: usize) -> Result<Theorem2> {
    build_tf_theorem2_with(rec, t, &Theorem2Options::default())
}

pub fn build_tf_theorem2_with(rec: &LinearRecurrence, t: usize, opts: &Theorem2Options) -> Result<Theorem2> {
    let (n, m) = (rec.n(), rec.m());
    if t < 2 {
        return Err(Error::param("horizon must be at least 2"));
    }
    if n > MAX_N {
        return Err(Error::Capacity(format!("n = {n}: MLP width {} exceeds the desk limit (n <= {MAX_N})", 4 * n * n * n + 2 * n * n)));
    }
    if rec.contraction_bound() > 1.0 + 1e-9 {
        return Err(Error::Unsupported("operators are not norm-bounded by 1".into()));
    }
    let layout = Theorem2Layout { n, m, belief_channel: opts.belief_channel };
    let d = layout.d();
    let depth = depth_for(t);
    let eta = opts.eta.unwrap_or_else(|| theorem2_eta(n, t));
    let gamma = theorem2_gamma(t, eta);
    let entry_bound = opts.entry_bound.unwrap_or(2.0);
    let relu_eps = opts.relu_eps.unwrap_or(eta);
    let want = opts.mlp_eps.unwrap_or(eta);
    let (mlp, floored) = match MatMulMlp::build(n, entry_bound, want, relu_eps) {
        Ok(mlp) => (mlp, false),
        Err(Error::Calibration(_)) if opts.mlp_eps.is_none() && want < MLP_EPS_FLOOR => {
            (MatMulMlp::build(n, entry_bound, MLP_EPS_FLOOR, relu_eps)?, true)
        }
        Err(e) => return Err(e),
    };
    let width = mlp.width();
    let mut w = TransformerWeights::zeros(layout.input_dim(), d, 2, depth, width, n, false, TfConfig::construction())?;

    for (o, a) in rec.mats.iter().enumerate() {
        for r in 0..n {
            for c in 0..n {
                w.enc_w[[o, layout.lam(r, c)]] = a[[c, r]];
            }
        }
    }
    if !opts.belief_channel {
        for r in 0..n {
            w.enc_w[[m, layout.lam(r, r)]] = 1.0;
        }
    } else {
        for s in 0..n {
            for r in 0..n {
                w.enc_w[[m + 4 + s, layout.lam(r, s)]] = 1.0;
            }
        }
    }
    w.enc_w[[m + 1, layout.sin()]] = 1.0;
    w.enc_w[[m + 2, layout.cos()]] = 1.0;
    w.enc_w[[m + 3, layout.one()]] = 1.0;

    let (w_a, w_b) = mlp.embed(d, 0, layout.lam_off(), layout.one());
    for (li, layer) in w.layers.iter_mut().enumerate() {
        let theta = PI * (1u64 << li) as f64 / (4.0 * t as f64);
        let (st, ct) = theta.sin_cos();
        let h = &mut layer.heads[0];
        // q = gamma (sin(phi - theta), cos(phi - theta)), k = gamma (sin phi, cos phi)
        h.wq[[layout.sin(), 0]] = gamma * ct;
        h.wq[[layout.cos(), 0]] = -gamma * st;
        h.wq[[layout.cos(), 1]] = gamma * ct;
        h.wq[[layout.sin(), 1]] = gamma * st;
        h.wk[[layout.sin(), 0]] = gamma;
        h.wk[[layout.cos(), 1]] = gamma;
        for r in 0..n {
            for c in 0..n {
                h.wv[[layout.lam(r, c), r * n + c]] = 1.0;
                h.wo[[r * n + c, layout.scratch(r, c)]] = 1.0;
            }
        }
        layer.w_a = w_a.clone();
        layer.w_b = w_b.clone();
    }

    let read = if opts.belief_channel {
        let mut e = Array1::zeros(n);
        e[0] = 1.0;
        e
    } else {
        rec.b0.clone()
    };
    for r in 0..n {
        for s in 0..n {
            w.dec_w[[layout.lam(r, s), s]] = read[r];
        }
    }
    w.check()?;
    let params = ConstructionParams {
        t,
        n,
        l: depth,
        gamma,
        eta,
        lambda: mlp.cell.lambda,
        relu_sim_scale: mlp.relu.scale,
        alpha_rnn: 4.0 * rec.b0.dot(&rec.b0).sqrt().max(f64::MIN_POSITIVE),
    };
    Ok(Theorem2 {
        weights: w,
        params,
        layout,
        mlp_eps: if floored { MLP_EPS_FLOOR } else { want },
        mlp_eps_floored: floored,
        cell: mlp.cell,
        relu: mlp.relu,
        mlp_width: width,
    })
}

fn pe_row(i: usize, t: usize) -> (f64, f64) {
    (PI * i as f64 / (4.0 * t as f64)).sin_cos()
}

/// `(len+1) x (m+4)`: BOS row `e_m`, then one-hot observations; every row
/// ends with `(sin(pi i / 4T), cos(pi i / 4T), 1)`.
pub fn augment_input(obs: &[usize], t: usize, m: usize) -> Result<Array2<f64>> {
    block_rows(obs, t, m, None)
}

/// Block chain-of-thought input for the belief-channel variant: BOS row
/// carries `belief` in the trailing `n` columns.
pub fn cot_block_input(obs: &[usize], belief: &[f64], t: usize, m: usize) -> Result<Array2<f64>> {
    block_rows(obs, t, m, Some(belief))
}

fn block_rows(obs: &[usize], t: usize, m: usize, belief: Option<&[f64]>) -> Result<Array2<f64>> {
    if t == 0 || obs.len() > t {
        return Err(Error::param(format!("{} observations for horizon {t}", obs.len())));
    }
    let extra = belief.map_or(0, |b| b.len());
    let mut x = Array2::zeros((obs.len() + 1, m + 4 + extra));
    x[[0, m]] = 1.0;
    if let Some(b) = belief {
        for (s, &v) in b.iter().enumerate() {
            x[[0, m + 4 + s]] = v;
        }
    }
    for (i, &o) in obs.iter().enumerate() {
        if o >= m {
            return Err(Error::param(format!("observation {o} out of range")));
        }
        x[[i + 1, o]] = 1.0;
    }
    for i in 0..=obs.len() {
        let (s, c) = pe_row(i, t);
        x[[i, m + 1]] = s;
        x[[i, m + 2]] = c;
        x[[i, m + 3]] = 1.0;
    }
    Ok(x)
}

/// Exact `L_{i,l}` (transposed layout) for `l = 0..=depth` and every position.
pub fn exact_lambdas(rec: &LinearRecurrence, obs: &[usize], depth: usize) -> Result<Vec<Vec<Array2<f64>>>> {
    let n = rec.n();
    let mut level: Vec<Array2<f64>> = Vec::with_capacity(obs.len() + 1);
    level.push(Array2::eye(n));
    for &o in obs {
        let a = rec.mats.get(o).ok_or_else(|| Error::param(format!("observation {o} out of range")))?;
        level.push(a.t().to_owned());
    }
    let mut all = vec![level];
    for l in 1..=depth {
        let prev = &all[l - 1];
        let step = 1usize << (l - 1);
        let next = (0..prev.len()).map(|i| prev[i.saturating_sub(step)].dot(&prev[i])).collect();
        all.push(next);
    }
    Ok(all)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstructionReport {
    pub t: usize,
    pub n: usize,
    pub depth: usize,
    /// `eps_l`, l = 0..=L: max entry error of the matrix slot.
    pub per_layer_error: Vec<f64>,
    /// `(8n)^(l-L) / T`.
    pub bound: Vec<f64>,
    pub final_error: f64,
    pub final_bound: f64,
    /// Per layer, max l1 distance of head-1 rows from their one-hot target.
    pub attention_one_hot_gap: Vec<f64>,
    /// Per layer, max |scratch| left after the sign flip.
    pub scratch_residual: Vec<f64>,
    pub eta: f64,
    pub gamma: f64,
    pub d: usize,
    pub heads: usize,
    pub mlp_width: usize,
    pub mlp_eps: f64,
    pub mlp_eps_floored: bool,
    pub cell: ProductCert,
    pub relu: ReluSimCert,
    pub max_weight: f64,
    pub magnitude_cap: f64,
}

impl ConstructionReport {
    pub fn layer_ok(&self) -> Vec<bool> {
        self.per_layer_error.iter().zip(&self.bound).map(|(e, b)| e <= b).collect()
    }

    pub fn final_ok(&self) -> bool {
        self.final_error <= self.final_bound
    }

    pub fn attention_ok(&self) -> bool {
        self.attention_one_hot_gap.iter().all(|&g| g <= self.eta)
    }

    pub fn magnitude_ok(&self) -> bool {
        self.max_weight.is_finite() && self.max_weight <= self.magnitude_cap
    }

    pub fn passed(&self) -> bool {
        self.layer_ok().iter().all(|&x| x) && self.final_ok() && self.attention_ok() && self.magnitude_ok()
    }

    /// `layer  eps_l  bound  pass/fail`, one line per layer.
    pub fn table(&self) -> String {
        let mut s = format!("{:>5}  {:>12}  {:>12}  {}\n", "layer", "eps", "bound", "status");
        for (l, ((e, b), ok)) in self.per_layer_error.iter().zip(&self.bound).zip(self.layer_ok()).enumerate() {
            s.push_str(&format!("{l:>5}  {e:>12.4e}  {b:>12.4e}  {}\n", if ok { "pass" } else { "FAIL" }));
        }
        s.push_str(&format!(
            "final  {:>12.4e}  {:>12.4e}  {}\n",
            self.final_error,
            self.final_bound,
            if self.final_ok() { "pass" } else { "FAIL" }
        ));
        s
    }

    pub fn to_doc(&self) -> TextDoc {
        let mut d = TextDoc::new("construction-report");
        d.field("T", self.t)
            .field("n", self.n)
            .field("depth", self.depth)
            .field("final-error", crate::textfmt::fmt_f64(self.final_error))
            .field("final-bound", crate::textfmt::fmt_f64(self.final_bound))
            .field("eta", crate::textfmt::fmt_f64(self.eta))
            .field("gamma", crate::textfmt::fmt_f64(self.gamma))
            .field("d", self.d)
            .field("heads", self.heads)
            .field("mlp-width", self.mlp_width)
            .field("mlp-eps", crate::textfmt::fmt_f64(self.mlp_eps))
            .field("mlp-eps-floored", self.mlp_eps_floored)
            .field("lambda", crate::textfmt::fmt_f64(self.cell.lambda))
            .field("lambda-grid-error", crate::textfmt::fmt_f64(self.cell.grid_error))
            .field("lambda-doublings", self.cell.doublings)
            .field("relu-sim-scale", crate::textfmt::fmt_f64(self.relu.scale))
            .field("relu-sim-gap", crate::textfmt::fmt_f64(self.relu.gap))
            .field("max-weight", crate::textfmt::fmt_f64(self.max_weight))
            .field("magnitude-cap", crate::textfmt::fmt_f64(self.magnitude_cap))
            .field("passed", self.passed());
        d.vector("per-layer-error", &self.per_layer_error)
            .vector("bound", &self.bound)
            .vector("attention-one-hot-gap", &self.attention_one_hot_gap)
            .vector("scratch-residual", &self.scratch_residual);
        d
    }
}

/// Run the construction on `obs`, read the matrix slot after every layer and
/// compare against the exact divide-and-conquer products and the direct
/// recursion. Bound violations are reported, not raised.
pub fn verify_construction(rec: &LinearRecurrence, th: &Theorem2, obs: &[usize]) -> Result<ConstructionReport> {
    if th.layout.belief_channel {
        return Err(Error::Unsupported("belief-channel builds are checked through block chain-of-thought".into()));
    }
    let p = th.params;
    let x = augment_input(obs, p.t, th.layout.m)?;
    let trace = transformer_trace(&th.weights, &x, Mode::Eval, 0)?;
    let exact = exact_lambdas(rec, obs, p.l)?;
    let mut per_layer_error = Vec::with_capacity(p.l + 1);
    let mut scratch_residual = Vec::with_capacity(p.l);
    for (l, level) in exact.iter().enumerate() {
        let s = trace.stream_after(l);
        let mut worst: f64 = 0.0;
        let mut scratch: f64 = 0.0;
        for (i, lam) in level.iter().enumerate() {
            let got = th.layout.read_matrix(s.row(i), false);
            worst = worst.max((&got - lam).iter().fold(0.0, |m, v| m.max(v.abs())));
            scratch = scratch.max(max_abs(th.layout.read_matrix(s.row(i), true).as_slice().unwrap()));
        }
        per_layer_error.push(worst);
        if l > 0 {
            scratch_residual.push(scratch);
        }
    }
    let bound = (0..=p.l)
        .map(|l| (8.0 * p.n as f64).powi(l as i32 - p.l as i32) / p.t as f64)
        .collect();
    let mut attention_one_hot_gap = Vec::with_capacity(p.l);
    for l in 1..=p.l {
        let a = trace.attention(l - 1, 0);
        let step = 1usize << (l - 1);
        let mut worst: f64 = 0.0;
        for i in 0..a.nrows() {
            let target = i.saturating_sub(step);
            let gap: f64 = (0..a.ncols()).map(|j| (a[[i, j]] - if j == target { 1.0 } else { 0.0 }).abs()).sum();
            worst = worst.max(gap);
        }
        attention_one_hot_gap.push(worst);
    }
    let oracle = rec.run(obs)?;
    let final_error = oracle
        .iter()
        .enumerate()
        .map(|(i, b)| (&trace.output.row(i + 1) - b).iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .fold(0.0, f64::max);
    Ok(ConstructionReport {
        t: p.t,
        n: p.n,
        depth: p.l,
        per_layer_error,
        bound,
        final_error,
        final_bound: 1.0 / p.t as f64,
        attention_one_hot_gap,
        scratch_residual,
        eta: p.eta,
        gamma: p.gamma,
        d: th.weights.d(),
        heads: th.weights.num_heads(),
        mlp_width: th.mlp_width,
        mlp_eps: th.mlp_eps,
        mlp_eps_floored: th.mlp_eps_floored,
        cell: th.cell,
        relu: th.relu,
        max_weight: th.max_weight(),
        magnitude_cap: MAGNITUDE_CAP,
    })
}
