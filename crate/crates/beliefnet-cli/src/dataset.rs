//! Dataset directories: `model.txt` (manifest) plus `records.txt`
//! (trajectories), both in the versioned text container.

use std::path::Path;

use beliefnet::model_zoo::{model_from_doc, model_to_doc, ModelInstance, Seq, TargetKind, Trajectory};
use beliefnet::textfmt::{Tensor, TextDoc};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MODEL_FILE: &str = "model.txt";
pub const RECORDS_FILE: &str = "records.txt";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

pub fn parse_doc(path: &Path, text: &str) -> CliResult<TextDoc> {
    TextDoc::parse(text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

pub fn load_model(path: &Path) -> CliResult<(ModelInstance, String)> {
    let text = read_text(path)?;
    let doc = parse_doc(path, &text)?;
    let model = model_from_doc(&doc).map_err(|e| CliError::from(e).context(path.display()))?;
    Ok((model, sha256_hex(text.as_bytes())))
}

pub fn model_text(model: &ModelInstance) -> String {
    model_to_doc(model).to_text()
}

fn seq_tensor(name: String, s: &Seq) -> Tensor {
    match s {
        Seq::Discrete(v) => Tensor { name, shape: vec![v.len()], values: v.iter().map(|&x| x as f64).collect() },
        Seq::Continuous(v) => {
            let k = v.first().map_or(0, Vec::len);
            Tensor { name, shape: vec![v.len(), k], values: v.iter().flatten().copied().collect() }
        }
    }
}

fn tensor_seq(t: &Tensor) -> CliResult<Seq> {
    match t.shape.as_slice() {
        [_] => t
            .values
            .iter()
            .map(|&x| {
                if x >= 0.0 && x.fract() == 0.0 {
                    Ok(x as usize)
                } else {
                    Err(CliError::usage(format!("tensor `{}`: {x} is not an index", t.name)))
                }
            })
            .collect::<CliResult<Vec<_>>>()
            .map(Seq::Discrete),
        [_, k] => Ok(Seq::Continuous(t.values.chunks(*k.max(&1)).map(<[f64]>::to_vec).collect())),
        _ => Err(CliError::usage(format!("tensor `{}` has rank {}", t.name, t.shape.len()))),
    }
}

pub fn records_doc(trajs: &[Trajectory], t_len: usize, kind: TargetKind) -> TextDoc {
    let mut d = TextDoc::new("trajectories");
    d.field("count", trajs.len()).field("T", t_len).field("target-kind", kind.as_str());
    for (i, tr) in trajs.iter().enumerate() {
        d.tensors.push(seq_tensor(format!("obs.{i}"), &tr.obs));
        d.tensors.push(seq_tensor(format!("states.{i}"), &tr.states));
        let k = tr.targets.first().map_or(0, Vec::len);
        d.tensor(&format!("targets.{i}"), vec![tr.len(), k], tr.targets.iter().flatten().copied().collect());
    }
    d
}

pub fn records_from_doc(d: &TextDoc) -> CliResult<(Vec<Trajectory>, usize, TargetKind)> {
    if d.kind != "trajectories" {
        return Err(CliError::usage(format!("expected a trajectory file, found `{}`", d.kind)));
    }
    let count: usize = d.parse_field("count")?;
    let t_len: usize = d.parse_field("T")?;
    let kind = TargetKind::parse(d.get_field("target-kind")?)?;
    if d.tensors.len() != 3 * count {
        return Err(CliError::usage(format!("{} tensors for {count} trajectories", d.tensors.len())));
    }
    let mut out = Vec::with_capacity(count);
    for (i, ch) in d.tensors.chunks(3).enumerate() {
        let names = [format!("obs.{i}"), format!("states.{i}"), format!("targets.{i}")];
        if ch.iter().zip(&names).any(|(t, n)| &t.name != n) {
            return Err(CliError::usage(format!("trajectory {i}: tensors out of order")));
        }
        let tg = &ch[2];
        let (rows, k) = match tg.shape.as_slice() {
            [r, k] => (*r, *k),
            _ => return Err(CliError::usage(format!("targets.{i} is not a matrix"))),
        };
        if rows != t_len {
            return Err(CliError::usage(format!("trajectory {i} has length {rows}, expected {t_len}")));
        }
        let targets = tg.values.chunks(k.max(1)).map(<[f64]>::to_vec).collect();
        out.push(Trajectory { obs: tensor_seq(&ch[0])?, states: tensor_seq(&ch[1])?, targets, kind });
    }
    Ok((out, t_len, kind))
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub model: ModelInstance,
    pub trajs: Vec<Trajectory>,
    pub t: usize,
    pub kind: TargetKind,
    /// sha256 of `model.txt` followed by `records.txt`.
    pub digest: String,
}

pub fn dataset_digest(model_text: &[u8], records_text: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(model_text);
    h.update(records_text);
    hex::encode(h.finalize())
}

pub fn load_dataset(dir: &Path) -> CliResult<Dataset> {
    let mpath = dir.join(MODEL_FILE);
    let rpath = dir.join(RECORDS_FILE);
    let mtext = read_text(&mpath)?;
    let rtext = read_text(&rpath)?;
    let model = model_from_doc(&parse_doc(&mpath, &mtext)?).map_err(|e| CliError::from(e).context(mpath.display()))?;
    let (trajs, t, kind) = records_from_doc(&parse_doc(&rpath, &rtext)?).map_err(|e| e.context(rpath.display()))?;
    Ok(Dataset { model, trajs, t, kind, digest: dataset_digest(mtext.as_bytes(), rtext.as_bytes()) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use beliefnet::model_zoo::{gen_lds, gen_matmul, rollout_batch};

    #[test]
    fn records_roundtrip_bitwise() {
        for model in [ModelInstance::MatMul(gen_matmul(3, 2, 1).unwrap()), ModelInstance::Lds(gen_lds(2, 4).unwrap())] {
            let kind = model.default_kind();
            let trajs = rollout_batch(&model, 7, 5, 3, kind).unwrap();
            let text = records_doc(&trajs, 7, kind).to_text();
            let (back, t, k) = records_from_doc(&TextDoc::parse(&text).unwrap()).unwrap();
            assert_eq!((t, k), (7, kind));
            assert_eq!(back, trajs);
            assert_eq!(records_doc(&back, 7, kind).to_text(), text);
        }
    }

    #[test]
    fn empty_record_file() {
        let d = records_doc(&[], 10, TargetKind::Belief);
        let (back, t, _) = records_from_doc(&TextDoc::parse(&d.to_text()).unwrap()).unwrap();
        assert!(back.is_empty());
        assert_eq!(t, 10);
    }

    #[test]
    fn malformed_records_are_rejected() {
        let model = ModelInstance::MatMul(gen_matmul(2, 2, 1).unwrap());
        let trajs = rollout_batch(&model, 3, 2, 3, TargetKind::Belief).unwrap();
        let mut d = records_doc(&trajs, 3, TargetKind::Belief);
        d.tensors.swap(0, 1);
        assert!(records_from_doc(&d).is_err());
        let mut d = records_doc(&trajs, 3, TargetKind::Belief);
        d.tensors.pop();
        assert!(records_from_doc(&d).is_err());
    }

    #[test]
    fn digest_is_sha256() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
