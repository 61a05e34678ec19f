use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;

use super::{layer_norm_rows, matmul, quantize_all, stable_softmax, Activation, PrecisionMode};
use crate::error::{Error, Result};
use crate::rng::{keyed, stream};

/// Rows in the learned positional table.
pub const PE_TABLE_LEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub heads: Vec<HeadWeights>,
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    /// `d x width`
    pub w_a: Array2<f64>,
    /// `width x d`
    pub w_b: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TfConfig {
    pub activation: Activation,
    pub use_pre_ln: bool,
    pub use_residual_attn: bool,
    pub use_residual_mlp: bool,
    pub use_final_ln: bool,
    pub dropout_rate: f64,
    pub precision: PrecisionMode,
}

impl TfConfig {
    /// Trained configuration: pre-LN, final LN, residuals, GeLU, dropout 0.1.
    pub fn trained() -> Self {
        TfConfig {
            activation: Activation::Gelu,
            use_pre_ln: true,
            use_residual_attn: true,
            use_residual_mlp: true,
            use_final_ln: true,
            dropout_rate: 0.1,
            precision: PrecisionMode::off(),
        }
    }

    /// Construction configuration: no LN, no dropout, residuals on.
    pub fn construction() -> Self {
        TfConfig {
            activation: Activation::Gelu,
            use_pre_ln: false,
            use_residual_attn: true,
            use_residual_mlp: true,
            use_final_ln: false,
            dropout_rate: 0.0,
            precision: PrecisionMode::off(),
        }
    }
}

/// Weights are stored for right-multiplication of `T x d` row sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerWeights {
    /// `input x d`
    pub enc_w: Array2<f64>,
    pub enc_b: Array1<f64>,
    /// Learned `PE_TABLE_LEN x d` table, or `None` in construction mode.
    pub pe: Option<Array2<f64>>,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    /// `d x output`
    pub dec_w: Array2<f64>,
    pub dec_b: Array1<f64>,
    pub cfg: TfConfig,
}

fn uniform_fill(a: &mut [f64], scale: f64, r: &mut crate::rng::Rng) {
    for x in a {
        *x = r.random_range(-scale..scale);
    }
}

impl TransformerWeights {
    #[allow(clippy::too_many_arguments)]
    pub fn zeros(
        input: usize,
        d: usize,
        heads: usize,
        layers: usize,
        width: usize,
        output: usize,
        learned_pe: bool,
        cfg: TfConfig,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::param(format!("{heads} heads do not divide width {d}")));
        }
        if layers == 0 {
            return Err(Error::param("need at least one layer"));
        }
        if !(0.0..1.0).contains(&cfg.dropout_rate) {
            return Err(Error::param("dropout rate must lie in [0, 1)"));
        }
        let dh = d / heads;
        let layer = LayerWeights {
            heads: (0..heads)
                .map(|_| HeadWeights {
                    wq: Array2::zeros((d, dh)),
                    wk: Array2::zeros((d, dh)),
                    wv: Array2::zeros((d, dh)),
                    wo: Array2::zeros((dh, d)),
                })
                .collect(),
            ln1_g: Array1::ones(d),
            ln1_b: Array1::zeros(d),
            ln2_g: Array1::ones(d),
            ln2_b: Array1::zeros(d),
            w_a: Array2::zeros((d, width)),
            w_b: Array2::zeros((width, d)),
        };
        Ok(TransformerWeights {
            enc_w: Array2::zeros((input, d)),
            enc_b: Array1::zeros(d),
            pe: learned_pe.then(|| Array2::zeros((PE_TABLE_LEN, d))),
            layers: vec![layer; layers],
            lnf_g: Array1::ones(d),
            lnf_b: Array1::zeros(d),
            dec_w: Array2::zeros((d, output)),
            dec_b: Array1::zeros(output),
            cfg,
        })
    }

    /// Uniform `+-1/sqrt(fan_in)` matrices, small positional table, unit LN gains.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        input: usize,
        d: usize,
        heads: usize,
        layers: usize,
        width: usize,
        output: usize,
        learned_pe: bool,
        cfg: TfConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut w = Self::zeros(input, d, heads, layers, width, output, learned_pe, cfg)?;
        let mut r = stream(seed, 0);
        let s_in = 1.0 / (input as f64).sqrt();
        let s_d = 1.0 / (d as f64).sqrt();
        uniform_fill(w.enc_w.as_slice_mut().unwrap(), s_in, &mut r);
        if let Some(pe) = w.pe.as_mut() {
            uniform_fill(pe.as_slice_mut().unwrap(), 0.1, &mut r);
        }
        for layer in &mut w.layers {
            for h in &mut layer.heads {
                let s_h = 1.0 / (h.wo.nrows() as f64).sqrt();
                uniform_fill(h.wq.as_slice_mut().unwrap(), s_d, &mut r);
                uniform_fill(h.wk.as_slice_mut().unwrap(), s_d, &mut r);
                uniform_fill(h.wv.as_slice_mut().unwrap(), s_d, &mut r);
                uniform_fill(h.wo.as_slice_mut().unwrap(), s_h, &mut r);
            }
            let s_w = 1.0 / (layer.w_a.ncols() as f64).sqrt();
            uniform_fill(layer.w_a.as_slice_mut().unwrap(), s_d, &mut r);
            uniform_fill(layer.w_b.as_slice_mut().unwrap(), s_w, &mut r);
        }
        uniform_fill(w.dec_w.as_slice_mut().unwrap(), s_d, &mut r);
        Ok(w)
    }

    pub fn d(&self) -> usize {
        self.enc_w.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.enc_w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.dec_w.ncols()
    }

    pub fn num_heads(&self) -> usize {
        self.layers[0].heads.len()
    }

    pub fn mlp_width(&self) -> usize {
        self.layers[0].w_a.ncols()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
        z
    }

    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut v: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        let mat = |a: &Array2<f64>| a.shape().to_vec();
        v.push(("enc_w".into(), mat(&self.enc_w), self.enc_w.as_slice().unwrap()));
        v.push(("enc_b".into(), vec![self.enc_b.len()], self.enc_b.as_slice().unwrap()));
        if let Some(pe) = &self.pe {
            v.push(("pe".into(), mat(pe), pe.as_slice().unwrap()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, hw) in layer.heads.iter().enumerate() {
                v.push((format!("l{l}.h{h}.wq"), mat(&hw.wq), hw.wq.as_slice().unwrap()));
                v.push((format!("l{l}.h{h}.wk"), mat(&hw.wk), hw.wk.as_slice().unwrap()));
                v.push((format!("l{l}.h{h}.wv"), mat(&hw.wv), hw.wv.as_slice().unwrap()));
                v.push((format!("l{l}.h{h}.wo"), mat(&hw.wo), hw.wo.as_slice().unwrap()));
            }
            let d = layer.ln1_g.len();
            v.push((format!("l{l}.ln1_g"), vec![d], layer.ln1_g.as_slice().unwrap()));
            v.push((format!("l{l}.ln1_b"), vec![d], layer.ln1_b.as_slice().unwrap()));
            v.push((format!("l{l}.ln2_g"), vec![d], layer.ln2_g.as_slice().unwrap()));
            v.push((format!("l{l}.ln2_b"), vec![d], layer.ln2_b.as_slice().unwrap()));
            v.push((format!("l{l}.w_a"), mat(&layer.w_a), layer.w_a.as_slice().unwrap()));
            v.push((format!("l{l}.w_b"), mat(&layer.w_b), layer.w_b.as_slice().unwrap()));
        }
        v.push(("lnf_g".into(), vec![self.lnf_g.len()], self.lnf_g.as_slice().unwrap()));
        v.push(("lnf_b".into(), vec![self.lnf_b.len()], self.lnf_b.as_slice().unwrap()));
        v.push(("dec_w".into(), mat(&self.dec_w), self.dec_w.as_slice().unwrap()));
        v.push(("dec_b".into(), vec![self.dec_b.len()], self.dec_b.as_slice().unwrap()));
        v
    }

    /// Mutable views in the same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        v.push(self.enc_w.as_slice_mut().unwrap());
        v.push(self.enc_b.as_slice_mut().unwrap());
        if let Some(pe) = self.pe.as_mut() {
            v.push(pe.as_slice_mut().unwrap());
        }
        for layer in &mut self.layers {
            for hw in &mut layer.heads {
                v.push(hw.wq.as_slice_mut().unwrap());
                v.push(hw.wk.as_slice_mut().unwrap());
                v.push(hw.wv.as_slice_mut().unwrap());
                v.push(hw.wo.as_slice_mut().unwrap());
            }
            v.push(layer.ln1_g.as_slice_mut().unwrap());
            v.push(layer.ln1_b.as_slice_mut().unwrap());
            v.push(layer.ln2_g.as_slice_mut().unwrap());
            v.push(layer.ln2_b.as_slice_mut().unwrap());
            v.push(layer.w_a.as_slice_mut().unwrap());
            v.push(layer.w_b.as_slice_mut().unwrap());
        }
        v.push(self.lnf_g.as_slice_mut().unwrap());
        v.push(self.lnf_b.as_slice_mut().unwrap());
        v.push(self.dec_w.as_slice_mut().unwrap());
        v.push(self.dec_b.as_slice_mut().unwrap());
        v
    }

    pub fn check(&self) -> Result<()> {
        let d = self.d();
        for (l, layer) in self.layers.iter().enumerate() {
            let bad = layer.w_a.nrows() != d
                || layer.w_b.ncols() != d
                || layer.w_b.nrows() != layer.w_a.ncols()
                || layer.ln1_g.len() != d
                || layer.heads.iter().any(|h| {
                    h.wq.nrows() != d
                        || h.wk.dim() != h.wq.dim()
                        || h.wv.nrows() != d
                        || h.wo.nrows() != h.wv.ncols()
                        || h.wo.ncols() != d
                });
            if bad {
                return Err(Error::shape(format!("layer {l} has inconsistent shapes")));
            }
        }
        if self.dec_w.nrows() != d || self.enc_b.len() != d || self.dec_b.len() != self.dec_w.ncols() {
            return Err(Error::shape("encoder/decoder shapes disagree with the width"));
        }
        Ok(())
    }
}

/// Inverted-dropout mask for one `(layer, site, position)`; entries are 0 or
/// `1/(1-rate)`.
pub fn dropout_mask(seed: u64, layer: usize, site: usize, pos: usize, d: usize, rate: f64) -> Array1<f64> {
    let mut r = keyed(seed, &[layer as u64, site as u64, pos as u64]);
    let keep = 1.0 / (1.0 - rate);
    Array1::from_shape_fn(d, |_| if r.random::<f64>() < rate { 0.0 } else { keep })
}

fn dropout_rows(seed: u64, layer: usize, site: usize, t_len: usize, d: usize, rate: f64) -> Array2<f64> {
    let mut m = Array2::zeros((t_len, d));
    for i in 0..t_len {
        m.row_mut(i).assign(&dropout_mask(seed, layer, site, i, d, rate));
    }
    m
}

#[derive(Debug, Clone)]
pub struct HeadTrace {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Row-stochastic causal attention pattern, `T x T`.
    pub attn: Array2<f64>,
    /// `attn . v`
    pub ctx: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub x_in: Array2<f64>,
    pub ln1: Option<(Array2<f64>, Vec<f64>)>,
    pub a_in: Array2<f64>,
    pub heads: Vec<HeadTrace>,
    pub attn_out: Array2<f64>,
    pub attn_mask: Option<Array2<f64>>,
    pub x_mid: Array2<f64>,
    pub ln2: Option<(Array2<f64>, Vec<f64>)>,
    pub m_in: Array2<f64>,
    pub pre: Array2<f64>,
    pub act: Array2<f64>,
    pub mlp_out: Array2<f64>,
    pub mlp_mask: Option<Array2<f64>>,
    pub x_out: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct TfTrace {
    pub input: Array2<f64>,
    pub emb_mask: Option<Array2<f64>>,
    pub layers: Vec<LayerTrace>,
    pub final_ln: Option<(Array2<f64>, Vec<f64>)>,
    pub dec_in: Array2<f64>,
    pub output: Array2<f64>,
}

fn attention_traced(layer: &LayerWeights, x: &Array2<f64>, prec: PrecisionMode) -> Result<(Array2<f64>, Vec<HeadTrace>)> {
    let (t_len, d) = x.dim();
    let mut out = Array2::zeros((t_len, d));
    let mut traces = Vec::with_capacity(layer.heads.len());
    for h in &layer.heads {
        let q = matmul(x, &h.wq, prec);
        let k = matmul(x, &h.wk, prec);
        let v = matmul(x, &h.wv, prec);
        let scores = matmul(&q, &k.t().to_owned(), prec);
        let mut attn = Array2::zeros((t_len, t_len));
        for i in 0..t_len {
            let row: Vec<f64> = (0..t_len)
                .map(|j| if j <= i { scores[[i, j]] } else { f64::NEG_INFINITY })
                .collect();
            let p = stable_softmax(&row)?;
            for j in 0..=i {
                attn[[i, j]] = prec.q(p[j]);
            }
        }
        let ctx = matmul(&attn, &v, prec);
        out += &matmul(&ctx, &h.wo, prec);
        traces.push(HeadTrace { q, k, v, attn, ctx });
    }
    quantize_all(&mut out, prec);
    Ok((out, traces))
}

/// Sum over heads of `softmax(X Wq (X Wk)^T + M) X Wv Wo` with the causal mask.
pub fn attention_forward(layer: &LayerWeights, x: &Array2<f64>, prec: PrecisionMode) -> Result<Array2<f64>> {
    if layer.heads.iter().any(|h| h.wq.nrows() != x.ncols()) {
        return Err(Error::shape("attention input width mismatch"));
    }
    Ok(attention_traced(layer, x, prec)?.0)
}

fn ffn_traced(layer: &LayerWeights, x: &Array2<f64>, act: Activation, prec: PrecisionMode) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let pre = matmul(x, &layer.w_a, prec);
    let mut a = pre.mapv(|v| act.apply(v));
    quantize_all(&mut a, prec);
    let out = matmul(&a, &layer.w_b, prec);
    (pre, a, out)
}

/// `act(X Wa) Wb`, no biases.
pub fn ffn_forward(layer: &LayerWeights, x: &Array2<f64>, act: Activation, prec: PrecisionMode) -> Result<Array2<f64>> {
    if x.ncols() != layer.w_a.nrows() {
        return Err(Error::shape("ffn input width mismatch"));
    }
    Ok(ffn_traced(layer, x, act, prec).2)
}

fn ln_q(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>, prec: PrecisionMode) -> (Array2<f64>, (Array2<f64>, Vec<f64>)) {
    let (mut y, xhat, rstd) = layer_norm_rows(x, g, b);
    quantize_all(&mut y, prec);
    (y, (xhat, rstd))
}

/// Full forward pass keeping every intermediate needed by the backward pass
/// and by construction verification.
pub fn transformer_trace(w: &TransformerWeights, input: &Array2<f64>, mode: Mode, seed: u64) -> Result<TfTrace> {
    w.check()?;
    let cfg = w.cfg;
    let prec = cfg.precision;
    let (t_len, width_in) = input.dim();
    if width_in != w.input_dim() {
        return Err(Error::shape(format!("input width {width_in} vs encoder width {}", w.input_dim())));
    }
    let d = w.d();
    let mut x = matmul(input, &w.enc_w, prec) + &w.enc_b;
    if let Some(pe) = &w.pe {
        if t_len > pe.nrows() {
            return Err(Error::shape(format!("sequence length {t_len} exceeds the positional table ({})", pe.nrows())));
        }
        x += &pe.slice(ndarray::s![..t_len, ..]);
    }
    quantize_all(&mut x, prec);
    let drop = mode == Mode::Train && cfg.dropout_rate > 0.0;
    let emb_mask = drop.then(|| dropout_rows(seed, 0, 0, t_len, d, cfg.dropout_rate));
    if let Some(m) = &emb_mask {
        x *= m;
    }
    let mut layers = Vec::with_capacity(w.layers.len());
    for (l, lw) in w.layers.iter().enumerate() {
        let x_in = x;
        let (a_in, ln1) = if cfg.use_pre_ln {
            let (y, c) = ln_q(&x_in, &lw.ln1_g, &lw.ln1_b, prec);
            (y, Some(c))
        } else {
            (x_in.clone(), None)
        };
        let (attn_out, heads) = attention_traced(lw, &a_in, prec)?;
        let attn_mask = drop.then(|| dropout_rows(seed, l + 1, 1, t_len, d, cfg.dropout_rate));
        let mut x_mid = match &attn_mask {
            Some(m) => &attn_out * m,
            None => attn_out.clone(),
        };
        if cfg.use_residual_attn {
            x_mid += &x_in;
        }
        quantize_all(&mut x_mid, prec);
        let (m_in, ln2) = if cfg.use_pre_ln {
            let (y, c) = ln_q(&x_mid, &lw.ln2_g, &lw.ln2_b, prec);
            (y, Some(c))
        } else {
            (x_mid.clone(), None)
        };
        let (pre, act, mlp_out) = ffn_traced(lw, &m_in, cfg.activation, prec);
        let mlp_mask = drop.then(|| dropout_rows(seed, l + 1, 2, t_len, d, cfg.dropout_rate));
        let mut x_out = match &mlp_mask {
            Some(m) => &mlp_out * m,
            None => mlp_out.clone(),
        };
        if cfg.use_residual_mlp {
            x_out += &x_mid;
        }
        quantize_all(&mut x_out, prec);
        x = x_out.clone();
        layers.push(LayerTrace {
            x_in,
            ln1,
            a_in,
            heads,
            attn_out,
            attn_mask,
            x_mid,
            ln2,
            m_in,
            pre,
            act,
            mlp_out,
            mlp_mask,
            x_out,
        });
    }
    let (dec_in, final_ln) = if cfg.use_final_ln {
        let (y, c) = ln_q(&x, &w.lnf_g, &w.lnf_b, prec);
        (y, Some(c))
    } else {
        (x, None)
    };
    let mut output = matmul(&dec_in, &w.dec_w, prec) + &w.dec_b;
    quantize_all(&mut output, prec);
    Ok(TfTrace { input: input.clone(), emb_mask, layers, final_ln, dec_in, output })
}

/// Encoder, optional learned PE, `L` blocks, optional final LN, decoder.
/// Dropout is active only in [`Mode::Train`].
pub fn transformer_forward(w: &TransformerWeights, input: &Array2<f64>, mode: Mode, seed: u64) -> Result<Array2<f64>> {
    Ok(transformer_trace(w, input, mode, seed)?.output)
}

impl TfTrace {
    /// Residual-stream state after block `l` (0 = embedding).
    pub fn stream_after(&self, l: usize) -> Array2<f64> {
        if l == 0 {
            match self.layers.first() {
                Some(t) => t.x_in.clone(),
                None => self.dec_in.clone(),
            }
        } else {
            self.layers[l - 1].x_out.clone()
        }
    }

    pub fn attention(&self, layer: usize, head: usize) -> &Array2<f64> {
        &self.layers[layer].heads[head].attn
    }

    pub fn positions(&self) -> usize {
        self.input.len_of(Axis(0))
    }
}
