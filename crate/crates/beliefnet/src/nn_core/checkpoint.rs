//! Checkpoints: named tensors plus configuration flags in the versioned text
//! container.

use ndarray::{Array1, Array2};

use super::{
    rnn_forward, softmax_rows, transformer_forward, Activation, HeadWeights, Mode, PrecisionMode, RnnWeights,
    TfConfig, TransformerWeights,
};
use crate::error::{Error, Result};
use crate::textfmt::{fmt_f64, TextDoc};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputHead {
    /// Raw decoder outputs (regression targets).
    Linear,
    /// Row softmax of the decoder outputs (distribution targets).
    Softmax,
}

impl OutputHead {
    pub fn name(self) -> &'static str {
        match self {
            OutputHead::Linear => "linear",
            OutputHead::Softmax => "softmax",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    Rnn(RnnWeights),
    Transformer(TransformerWeights),
}

impl Network {
    pub fn input_dim(&self) -> usize {
        match self {
            Network::Rnn(w) => w.input_dim(),
            Network::Transformer(w) => w.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Network::Rnn(w) => w.output_dim(),
            Network::Transformer(w) => w.output_dim(),
        }
    }

    /// Raw outputs for one sequence in eval mode.
    pub fn forward(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        match self {
            Network::Rnn(w) => Ok(rnn_forward(w, input)?.1),
            Network::Transformer(w) => transformer_forward(w, input, Mode::Eval, 0),
        }
    }

    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        match self {
            Network::Rnn(w) => w.tensors().into_iter().map(|(n, s, v)| (n.to_string(), s, v)).collect(),
            Network::Transformer(w) => w.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Network::Rnn(w) => w.tensors_mut(),
            Network::Transformer(w) => w.tensors_mut(),
        }
    }

    pub fn zeros_like(&self) -> Network {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
        z
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, v)| v.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub head: OutputHead,
    /// Free-form metadata echoed into the file (model kind, seeds, ...).
    pub meta: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn new(network: Network, head: OutputHead) -> Self {
        Checkpoint { network, head, meta: Vec::new() }
    }

    /// Outputs after the head (probabilities for a softmax head).
    pub fn predict(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        let raw = self.network.forward(input)?;
        match self.head {
            OutputHead::Linear => Ok(raw),
            OutputHead::Softmax => softmax_rows(&raw),
        }
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_doc(&self) -> TextDoc {
        let mut d = network_to_doc(&self.network);
        d.field("head", self.head.name());
        for (k, v) in &self.meta {
            d.field(&format!("meta.{k}"), v);
        }
        d
    }

    pub fn from_doc(d: &TextDoc) -> Result<Self> {
        let network = network_from_doc(d)?;
        let head = match d.get_field("head")? {
            "linear" => OutputHead::Linear,
            "softmax" => OutputHead::Softmax,
            other => return Err(Error::parse(format!("unknown head `{other}`"))),
        };
        let meta = d
            .fields
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.clone())))
            .collect();
        Ok(Checkpoint { network, head, meta })
    }
}

fn put_precision(d: &mut TextDoc, p: PrecisionMode) {
    d.field("precision-enabled", p.enabled).field("precision-bits", p.mantissa_bits);
}

fn get_precision(d: &TextDoc) -> Result<PrecisionMode> {
    Ok(PrecisionMode { enabled: d.parse_field("precision-enabled")?, mantissa_bits: d.parse_field("precision-bits")? })
}

pub fn network_to_doc(net: &Network) -> TextDoc {
    let mut d = TextDoc::new("checkpoint");
    match net {
        Network::Rnn(w) => {
            d.field("network", "rnn");
            put_precision(&mut d, w.precision);
        }
        Network::Transformer(w) => {
            let c = w.cfg;
            d.field("network", "transformer")
                .field("layers", w.layers.len())
                .field("heads", w.num_heads())
                .field("activation", c.activation.name())
                .field("use-pre-ln", c.use_pre_ln)
                .field("use-learned-pe", w.pe.is_some())
                .field("use-residual-attn", c.use_residual_attn)
                .field("use-residual-mlp", c.use_residual_mlp)
                .field("use-final-ln", c.use_final_ln)
                .field("dropout-rate", fmt_f64(c.dropout_rate));
            put_precision(&mut d, c.precision);
        }
    }
    for (name, shape, vals) in net.tensors() {
        d.tensor(&name, shape, vals.to_vec());
    }
    d
}

fn mat(d: &TextDoc, name: &str) -> Result<Array2<f64>> {
    d.get_matrix(name)
}

fn vec1(d: &TextDoc, name: &str) -> Result<Array1<f64>> {
    Ok(Array1::from(d.get_vector(name)?))
}

pub fn network_from_doc(d: &TextDoc) -> Result<Network> {
    if d.kind != "checkpoint" {
        return Err(Error::parse(format!("expected a checkpoint, found `{}`", d.kind)));
    }
    match d.get_field("network")? {
        "rnn" => {
            let w = RnnWeights {
                w1: mat(d, "w1")?,
                w2: mat(d, "w2")?,
                b: vec1(d, "b")?,
                h0: vec1(d, "h0")?,
                dec_w: mat(d, "dec_w")?,
                dec_b: vec1(d, "dec_b")?,
                precision: get_precision(d)?,
            };
            w.check().map_err(|e| Error::parse(e.to_string()))?;
            Ok(Network::Rnn(w))
        }
        "transformer" => {
            let n_layers: usize = d.parse_field("layers")?;
            let n_heads: usize = d.parse_field("heads")?;
            let cfg = TfConfig {
                activation: Activation::parse(d.get_field("activation")?)?,
                use_pre_ln: d.parse_field("use-pre-ln")?,
                use_residual_attn: d.parse_field("use-residual-attn")?,
                use_residual_mlp: d.parse_field("use-residual-mlp")?,
                use_final_ln: d.parse_field("use-final-ln")?,
                dropout_rate: d.parse_field("dropout-rate")?,
                precision: get_precision(d)?,
            };
            let learned_pe: bool = d.parse_field("use-learned-pe")?;
            let mut layers = Vec::with_capacity(n_layers);
            for l in 0..n_layers {
                let heads = (0..n_heads)
                    .map(|h| {
                        Ok(HeadWeights {
                            wq: mat(d, &format!("l{l}.h{h}.wq"))?,
                            wk: mat(d, &format!("l{l}.h{h}.wk"))?,
                            wv: mat(d, &format!("l{l}.h{h}.wv"))?,
                            wo: mat(d, &format!("l{l}.h{h}.wo"))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                layers.push(super::LayerWeights {
                    heads,
                    ln1_g: vec1(d, &format!("l{l}.ln1_g"))?,
                    ln1_b: vec1(d, &format!("l{l}.ln1_b"))?,
                    ln2_g: vec1(d, &format!("l{l}.ln2_g"))?,
                    ln2_b: vec1(d, &format!("l{l}.ln2_b"))?,
                    w_a: mat(d, &format!("l{l}.w_a"))?,
                    w_b: mat(d, &format!("l{l}.w_b"))?,
                });
            }
            let w = TransformerWeights {
                enc_w: mat(d, "enc_w")?,
                enc_b: vec1(d, "enc_b")?,
                pe: if learned_pe { Some(mat(d, "pe")?) } else { None },
                layers,
                lnf_g: vec1(d, "lnf_g")?,
                lnf_b: vec1(d, "lnf_b")?,
                dec_w: mat(d, "dec_w")?,
                dec_b: vec1(d, "dec_b")?,
                cfg,
            };
            w.check().map_err(|e| Error::parse(e.to_string()))?;
            Ok(Network::Transformer(w))
        }
        other => Err(Error::parse(format!("unknown network `{other}`"))),
    }
}
