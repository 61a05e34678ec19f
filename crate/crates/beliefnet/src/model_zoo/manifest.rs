//! Model instances as versioned text manifests.

use ndarray::Array1;

use super::{
    CyclicDetInstance, HmmFamily, HmmInstance, LdsInstance, MatMulInstance, ModelInstance,
};
use crate::error::{Error, Result};
use crate::textfmt::TextDoc;

pub fn model_to_doc(model: &ModelInstance) -> TextDoc {
    let mut d = TextDoc::new("model");
    d.field("model-kind", model.kind_name());
    match model {
        ModelInstance::Hmm { hmm, family } => {
            d.field("n", hmm.n).field("m", hmm.m).field("s0", hmm.s0);
            match family {
                HmmFamily::Plain => {}
                HmmFamily::CyclicRnd { n, m, eps } => {
                    d.field("base-n", n).field("base-m", m).field("eps", crate::textfmt::fmt_f64(*eps));
                }
                HmmFamily::CyclicHard { n, m, alpha } => {
                    d.field("base-n", n)
                        .field("base-m", m)
                        .field("alpha", crate::textfmt::fmt_f64(*alpha))
                        .field("obs-encoding", "states:[0,n) base-obs:[n,n+m) signal:n+m");
                }
            }
            d.matrix("P", &hmm.p).matrix("O", &hmm.o);
        }
        ModelInstance::MatMul(mm) => {
            d.field("n", mm.n).field("m", mm.m);
            for (o, a) in mm.a.iter().enumerate() {
                d.matrix(&format!("A{o}"), a);
            }
            d.vector("b0", mm.b0.as_slice().expect("contiguous"));
        }
        ModelInstance::Lds(l) => {
            d.field("n", l.n)
                .field("sigma-state", crate::textfmt::fmt_f64(l.sigma_state))
                .field("sigma-obs", crate::textfmt::fmt_f64(l.sigma_obs));
            d.matrix("A", &l.a).matrix("B", &l.b);
            d.vector("x0", l.x0.as_slice().expect("contiguous"));
        }
        ModelInstance::CyclicDet(c) => {
            d.field("n", c.n).field("m", c.m).field("s0", c.s0);
            let flat: Vec<f64> = c.perms.iter().flatten().map(|&x| x as f64).collect();
            d.tensor("perms", vec![c.m, c.n], flat);
        }
    }
    d
}

pub fn model_from_doc(d: &TextDoc) -> Result<ModelInstance> {
    if d.kind != "model" {
        return Err(Error::parse(format!("expected a model manifest, found `{}`", d.kind)));
    }
    let kind = d.get_field("model-kind")?;
    let hmm = || -> Result<HmmInstance> {
        HmmInstance::new(d.get_matrix("P")?, d.get_matrix("O")?, d.parse_field("s0")?)
    };
    match kind {
        "hmm" => Ok(ModelInstance::Hmm { hmm: hmm()?, family: HmmFamily::Plain }),
        "cyclic-rnd" => Ok(ModelInstance::Hmm {
            hmm: hmm()?,
            family: HmmFamily::CyclicRnd {
                n: d.parse_field("base-n")?,
                m: d.parse_field("base-m")?,
                eps: d.parse_field("eps")?,
            },
        }),
        "cyclic-hard" => Ok(ModelInstance::Hmm {
            hmm: hmm()?,
            family: HmmFamily::CyclicHard {
                n: d.parse_field("base-n")?,
                m: d.parse_field("base-m")?,
                alpha: d.parse_field("alpha")?,
            },
        }),
        "matmul" => {
            let m: usize = d.parse_field("m")?;
            let a = (0..m).map(|o| d.get_matrix(&format!("A{o}"))).collect::<Result<Vec<_>>>()?;
            let b0 = Array1::from(d.get_vector("b0")?);
            Ok(ModelInstance::MatMul(MatMulInstance::new(a, b0)?))
        }
        "lds" => {
            let a = d.get_matrix("A")?;
            let b = d.get_matrix("B")?;
            let x0 = Array1::from(d.get_vector("x0")?);
            let n = x0.len();
            if a.dim() != (n, n) || b.dim() != (n, n) {
                return Err(Error::parse("LDS matrix shapes disagree with x0"));
            }
            Ok(ModelInstance::Lds(LdsInstance {
                n,
                a,
                b,
                sigma_state: d.parse_field("sigma-state")?,
                sigma_obs: d.parse_field("sigma-obs")?,
                x0,
            }))
        }
        "cyclic-det" => {
            let t = d.get_tensor("perms")?;
            if t.shape.len() != 2 {
                return Err(Error::parse("perms must be m x n"));
            }
            let n = t.shape[1];
            let perms = t
                .values
                .chunks(n.max(1))
                .map(|row| row.iter().map(|&x| x as usize).collect())
                .collect();
            Ok(ModelInstance::CyclicDet(CyclicDetInstance::new(perms, d.parse_field("s0")?)?))
        }
        other => Err(Error::parse(format!("unknown model kind `{other}`"))),
    }
}
