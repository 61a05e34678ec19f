use ndarray::{Array1, Array2};
use rand::Rng as _;

use super::{matmul, quantize_all, PrecisionMode};
use crate::error::{Error, Result};
use crate::rng::stream;

/// `h_t = ReLU(W1 x_t + W2 h_{t-1} + b)`, `y_t = D h_t + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnWeights {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b: Array1<f64>,
    pub h0: Array1<f64>,
    pub dec_w: Array2<f64>,
    pub dec_b: Array1<f64>,
    pub precision: PrecisionMode,
}

impl RnnWeights {
    pub fn zeros(input: usize, d: usize, output: usize) -> Self {
        RnnWeights {
            w1: Array2::zeros((d, input)),
            w2: Array2::zeros((d, d)),
            b: Array1::zeros(d),
            h0: Array1::zeros(d),
            dec_w: Array2::zeros((output, d)),
            dec_b: Array1::zeros(output),
            precision: PrecisionMode::off(),
        }
    }

    /// Uniform `+-1/sqrt(fan_in)` initialization; `h0 = 0`.
    pub fn init(input: usize, d: usize, output: usize, seed: u64) -> Self {
        let mut r = stream(seed, 0);
        let mut w = Self::zeros(input, d, output);
        let mut fill = |a: &mut [f64], fan: usize| {
            let s = 1.0 / (fan as f64).sqrt();
            for x in a {
                *x = r.random_range(-s..s);
            }
        };
        fill(w.w1.as_slice_mut().unwrap(), input);
        fill(w.w2.as_slice_mut().unwrap(), d);
        fill(w.b.as_slice_mut().unwrap(), d);
        fill(w.dec_w.as_slice_mut().unwrap(), d);
        fill(w.dec_b.as_slice_mut().unwrap(), d);
        w
    }

    pub fn hidden(&self) -> usize {
        self.w2.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.dec_w.nrows()
    }

    pub fn check(&self) -> Result<()> {
        let d = self.hidden();
        let ok = self.w2.ncols() == d
            && self.w1.nrows() == d
            && self.b.len() == d
            && self.h0.len() == d
            && self.dec_w.ncols() == d
            && self.dec_b.len() == self.dec_w.nrows();
        if !ok {
            return Err(Error::shape("inconsistent RNN weight shapes"));
        }
        Ok(())
    }

    /// Named parameter tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        vec![
            ("w1", self.w1.shape().to_vec(), self.w1.as_slice().unwrap()),
            ("w2", self.w2.shape().to_vec(), self.w2.as_slice().unwrap()),
            ("b", vec![self.b.len()], self.b.as_slice().unwrap()),
            ("h0", vec![self.h0.len()], self.h0.as_slice().unwrap()),
            ("dec_w", self.dec_w.shape().to_vec(), self.dec_w.as_slice().unwrap()),
            ("dec_b", vec![self.dec_b.len()], self.dec_b.as_slice().unwrap()),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b.as_slice_mut().unwrap(),
            self.h0.as_slice_mut().unwrap(),
            self.dec_w.as_slice_mut().unwrap(),
            self.dec_b.as_slice_mut().unwrap(),
        ]
    }
}

/// Run the recursion over `inputs` (`T x input`); returns hidden states
/// (`T x d`) and outputs (`T x output`).
pub fn rnn_forward(w: &RnnWeights, inputs: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    w.check()?;
    if inputs.ncols() != w.input_dim() {
        return Err(Error::shape(format!("input width {} vs W1 width {}", inputs.ncols(), w.input_dim())));
    }
    let prec = w.precision;
    let t_len = inputs.nrows();
    let d = w.hidden();
    let mut hs = Array2::zeros((t_len, d));
    let mut h = w.h0.clone().insert_axis(ndarray::Axis(1));
    let w1t = w.w1.clone();
    for t in 0..t_len {
        let x = inputs.row(t).to_owned().insert_axis(ndarray::Axis(1));
        let mut pre = matmul(&w1t, &x, prec) + matmul(&w.w2, &h, prec);
        quantize_all(&mut pre, prec);
        pre.column_mut(0).zip_mut_with(&w.b, |p, &b| *p = prec.q(*p + b));
        pre.mapv_inplace(|v| v.max(0.0));
        hs.row_mut(t).assign(&pre.column(0));
        h = pre;
    }
    let mut ys = matmul(&hs, &w.dec_w.t().to_owned(), prec);
    for mut row in ys.rows_mut() {
        row.zip_mut_with(&w.dec_b, |y, &b| *y = prec.q(*y + b));
    }
    Ok((hs, ys))
}
