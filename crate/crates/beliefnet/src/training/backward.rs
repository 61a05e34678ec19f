use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Axis, Zip};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn_core::{transformer_trace, LayerTrace, Mode, Network, RnnWeights, TfTrace, TransformerWeights};

/// Per-position training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Mean over positions and output coordinates of the squared error.
    Mse,
    /// Mean over positions of `-sum_k x_k log softmax(y)_k`.
    CrossEntropy,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::CrossEntropy => "ce",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "ce" => Ok(LossKind::CrossEntropy),
            _ => Err(Error::param(format!("unknown loss `{s}`"))),
        }
    }
}

/// Loss summed over the rows of `y` and its gradient, both scaled by `scale`.
pub fn loss_rows(y: &Array2<f64>, x: &Array2<f64>, kind: LossKind, scale: f64) -> Result<(f64, Array2<f64>)> {
    if y.dim() != x.dim() {
        return Err(Error::shape(format!("outputs {:?} vs targets {:?}", y.dim(), x.dim())));
    }
    match kind {
        LossKind::Mse => {
            let k = y.ncols() as f64;
            let diff = y - x;
            let loss = diff.iter().map(|d| d * d).sum::<f64>() * scale / k;
            Ok((loss, diff * (2.0 * scale / k)))
        }
        LossKind::CrossEntropy => {
            let mut loss = 0.0;
            let mut g = Array2::zeros(y.dim());
            for ((yr, xr), mut gr) in y.rows().into_iter().zip(x.rows()).zip(g.rows_mut()) {
                let mx = yr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + yr.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                let mass: f64 = xr.sum();
                for ((gv, &yv), &xv) in gr.iter_mut().zip(yr).zip(xr) {
                    if xv != 0.0 {
                        loss -= xv * (yv - lse);
                    }
                    *gv = scale * ((yv - lse).exp() * mass - xv);
                }
            }
            Ok((loss * scale, g))
        }
    }
}

fn check_batch(inputs: &[Array2<f64>], targets: &[Array2<f64>]) -> Result<usize> {
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(Error::shape(format!("{} inputs vs {} targets", inputs.len(), targets.len())));
    }
    let mut n = 0;
    for (x, y) in inputs.iter().zip(targets) {
        if x.nrows() != y.nrows() {
            return Err(Error::shape("input and target lengths differ"));
        }
        n += x.nrows();
    }
    if n == 0 {
        return Err(Error::shape("empty batch"));
    }
    Ok(n)
}

/// Mean loss over every position of the batch and the gradient of every
/// parameter, returned as a network of the same shape.
///
/// Transformers run in `mode`; in train mode sequence `i` uses dropout seed
/// `child_seed(seed, i)`, the same masks as the forward pass.
pub fn backward(
    net: &Network,
    inputs: &[Array2<f64>],
    targets: &[Array2<f64>],
    loss: LossKind,
    mode: Mode,
    seed: u64,
) -> Result<(f64, Network)> {
    let positions = check_batch(inputs, targets)?;
    let scale = 1.0 / positions as f64;
    let (value, grads) = match net {
        Network::Rnn(w) => {
            let (v, g) = rnn_backward(w, inputs, targets, loss, scale)?;
            (v, Network::Rnn(g))
        }
        Network::Transformer(w) => {
            let (v, g) = transformer_backward(w, inputs, targets, loss, scale, mode, seed)?;
            (v, Network::Transformer(g))
        }
    };
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {value}")));
    }
    Ok((value, grads))
}

fn rnn_backward(
    w: &RnnWeights,
    inputs: &[Array2<f64>],
    targets: &[Array2<f64>],
    loss: LossKind,
    scale: f64,
) -> Result<(f64, RnnWeights)> {
    w.check()?;
    if w.precision.enabled {
        return Err(Error::Unsupported("gradients are not defined in finite-precision mode".into()));
    }
    // sequences of equal length run as one batch
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, x) in inputs.iter().enumerate() {
        if x.ncols() != w.input_dim() || targets[i].ncols() != w.output_dim() {
            return Err(Error::shape("RNN batch widths disagree with the weights"));
        }
        groups.entry(x.nrows()).or_default().push(i);
    }
    let mut g = RnnWeights::zeros(w.input_dim(), w.hidden(), w.output_dim());
    let mut total = 0.0;
    for (t_len, idx) in groups {
        total += rnn_group(w, inputs, targets, &idx, t_len, loss, scale, &mut g)?;
    }
    Ok((total, g))
}

#[allow(clippy::too_many_arguments)]
fn rnn_group(
    w: &RnnWeights,
    inputs: &[Array2<f64>],
    targets: &[Array2<f64>],
    idx: &[usize],
    t_len: usize,
    loss: LossKind,
    scale: f64,
    g: &mut RnnWeights,
) -> Result<f64> {
    let bsz = idx.len();
    let d = w.hidden();
    let step_rows = |src: &[Array2<f64>], t: usize| -> Array2<f64> {
        let mut m = Array2::zeros((bsz, src[idx[0]].ncols()));
        for (r, &i) in idx.iter().enumerate() {
            m.row_mut(r).assign(&src[i].row(t));
        }
        m
    };
    let w1t = w.w1.t();
    let w2t = w.w2.t();
    let mut hs: Vec<Array2<f64>> = Vec::with_capacity(t_len + 1);
    hs.push(w.h0.broadcast((bsz, d)).unwrap().to_owned());
    let mut pres = Vec::with_capacity(t_len);
    let mut total = 0.0;
    let mut dys = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let x = step_rows(inputs, t);
        let pre = x.dot(&w1t) + hs[t].dot(&w2t) + &w.b;
        let h = pre.mapv(|v| v.max(0.0));
        let y = h.dot(&w.dec_w.t()) + &w.dec_b;
        let (l, dy) = loss_rows(&y, &step_rows(targets, t), loss, scale)?;
        total += l;
        dys.push(dy);
        pres.push(pre);
        hs.push(h);
    }
    let mut carry = Array2::<f64>::zeros((bsz, d));
    for t in (0..t_len).rev() {
        let dy = &dys[t];
        let h = &hs[t + 1];
        g.dec_w += &dy.t().dot(h);
        g.dec_b += &dy.sum_axis(Axis(0));
        let mut dpre = dy.dot(&w.dec_w) + &carry;
        Zip::from(&mut dpre).and(&pres[t]).for_each(|dp, &p| {
            if p <= 0.0 {
                *dp = 0.0;
            }
        });
        let x = step_rows(inputs, t);
        g.w1 += &dpre.t().dot(&x);
        g.w2 += &dpre.t().dot(&hs[t]);
        g.b += &dpre.sum_axis(Axis(0));
        carry = dpre.dot(&w.w2);
    }
    g.h0 += &carry.sum_axis(Axis(0));
    Ok(total)
}

/// Sequences handled by one worker before results are summed in index order.
const CHUNK: usize = 4;

fn transformer_backward(
    w: &TransformerWeights,
    inputs: &[Array2<f64>],
    targets: &[Array2<f64>],
    loss: LossKind,
    scale: f64,
    mode: Mode,
    seed: u64,
) -> Result<(f64, TransformerWeights)> {
    w.check()?;
    if w.cfg.precision.enabled {
        return Err(Error::Unsupported("gradients are not defined in finite-precision mode".into()));
    }
    let idx: Vec<usize> = (0..inputs.len()).collect();
    let parts: Vec<Result<(f64, TransformerWeights)>> = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = w.zeros_like();
            let mut total = 0.0;
            for &i in chunk {
                let s = crate::rng::child_seed(seed, i as u64);
                let tr = transformer_trace(w, &inputs[i], mode, s)?;
                let (l, dy) = loss_rows(&tr.output, &targets[i], loss, scale)?;
                total += l;
                sequence_backward(w, &tr, &dy, &mut g);
            }
            Ok((total, g))
        })
        .collect();
    let mut g = w.zeros_like();
    let mut total = 0.0;
    for p in parts {
        let (l, pg) = p?;
        total += l;
        add_into(&mut g, &pg);
    }
    Ok((total, g))
}

fn add_into(acc: &mut TransformerWeights, x: &TransformerWeights) {
    let src: Vec<Vec<f64>> = x.tensors().into_iter().map(|(_, _, v)| v.to_vec()).collect();
    for (dst, s) in acc.tensors_mut().into_iter().zip(src) {
        for (a, b) in dst.iter_mut().zip(s) {
            *a += b;
        }
    }
}

/// Gradients of `gain` and `bias` and the input gradient of a row-wise
/// layer norm with cached normalized rows and inverse deviations.
fn ln_backward(
    dy: &Array2<f64>,
    xhat: &Array2<f64>,
    rstd: &[f64],
    gain: &Array1<f64>,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    *dgain += &(dy * xhat).sum_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0));
    let dxhat = dy * gain;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.dim());
    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
        let dh = dxhat.row(i);
        let xh = xhat.row(i);
        let m1 = dh.sum() / d;
        let m2 = dh.dot(&xh) / d;
        Zip::from(&mut row).and(&dh).and(&xh).for_each(|o, &a, &b| *o = rstd[i] * (a - m1 - b * m2));
    }
    dx
}

fn sequence_backward(w: &TransformerWeights, tr: &TfTrace, dout: &Array2<f64>, g: &mut TransformerWeights) {
    let cfg = w.cfg;
    g.dec_w += &tr.dec_in.t().dot(dout);
    g.dec_b += &dout.sum_axis(Axis(0));
    let ddec = dout.dot(&w.dec_w.t());
    let mut dx = match &tr.final_ln {
        Some((xhat, rstd)) => ln_backward(&ddec, xhat, rstd, &w.lnf_g, &mut g.lnf_g, &mut g.lnf_b),
        None => ddec,
    };
    for l in (0..w.layers.len()).rev() {
        dx = layer_backward(w, l, &tr.layers[l], dx, g, cfg.activation);
    }
    if let Some(m) = &tr.emb_mask {
        dx *= m;
    }
    g.enc_w += &tr.input.t().dot(&dx);
    g.enc_b += &dx.sum_axis(Axis(0));
    if let Some(pe) = g.pe.as_mut() {
        let t_len = dx.nrows();
        let mut rows = pe.slice_mut(s![..t_len, ..]);
        rows += &dx;
    }
}

fn layer_backward(
    w: &TransformerWeights,
    l: usize,
    lt: &LayerTrace,
    dx_out: Array2<f64>,
    g: &mut TransformerWeights,
    act: crate::nn_core::Activation,
) -> Array2<f64> {
    let cfg = w.cfg;
    let lw = &w.layers[l];
    let gl = &mut g.layers[l];

    let dmlp = match &lt.mlp_mask {
        Some(m) => &dx_out * m,
        None => dx_out.clone(),
    };
    let mut dx_mid = if cfg.use_residual_mlp { dx_out } else { Array2::zeros(dmlp.dim()) };
    gl.w_b += &lt.act.t().dot(&dmlp);
    let mut dpre = dmlp.dot(&lw.w_b.t());
    Zip::from(&mut dpre).and(&lt.pre).for_each(|d, &p| *d *= act.derivative(p));
    gl.w_a += &lt.m_in.t().dot(&dpre);
    let dm_in = dpre.dot(&lw.w_a.t());
    dx_mid += &match &lt.ln2 {
        Some((xhat, rstd)) => ln_backward(&dm_in, xhat, rstd, &lw.ln2_g, &mut gl.ln2_g, &mut gl.ln2_b),
        None => dm_in,
    };

    let dattn = match &lt.attn_mask {
        Some(m) => &dx_mid * m,
        None => dx_mid.clone(),
    };
    let mut dx_in = if cfg.use_residual_attn { dx_mid } else { Array2::zeros(dattn.dim()) };
    let mut da_in = Array2::<f64>::zeros(lt.a_in.dim());
    for (h, ht) in lt.heads.iter().enumerate() {
        let hw = &lw.heads[h];
        let gh = &mut gl.heads[h];
        gh.wo += &ht.ctx.t().dot(&dattn);
        let dctx = dattn.dot(&hw.wo.t());
        let da = dctx.dot(&ht.v.t());
        let dv = ht.attn.t().dot(&dctx);
        let mut ds = Array2::zeros(da.dim());
        for i in 0..ds.nrows() {
            let a = ht.attn.row(i);
            let inner = a.dot(&da.row(i));
            for j in 0..=i {
                ds[[i, j]] = a[j] * (da[[i, j]] - inner);
            }
        }
        let dq = ds.dot(&ht.k);
        let dk = ds.t().dot(&ht.q);
        gh.wq += &lt.a_in.t().dot(&dq);
        gh.wk += &lt.a_in.t().dot(&dk);
        gh.wv += &lt.a_in.t().dot(&dv);
        da_in += &dq.dot(&hw.wq.t());
        da_in += &dk.dot(&hw.wk.t());
        da_in += &dv.dot(&hw.wv.t());
    }
    dx_in += &match &lt.ln1 {
        Some((xhat, rstd)) => ln_backward(&da_in, xhat, rstd, &lw.ln1_g, &mut gl.ln1_g, &mut gl.ln1_b),
        None => da_in,
    };
    dx_in
}
