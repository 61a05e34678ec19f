//! Evaluation losses, fit lengths and fresh-rollout evaluation.

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model_zoo::{rollout_with, HmmFamily, ModelInstance, Seq, Trajectory};
use crate::nn_core::Checkpoint;
use crate::rng::child_seed;

/// Default number of evaluation rollouts.
pub const DEFAULT_ROLLOUTS: usize = 256;
/// Thresholds reported by default.
pub const DEFAULT_EPS: [f64; 2] = [0.05, 0.1];

/// `p = 1`: half the l1 distance. `p = 2`: l2 distance, divided by
/// `max(1, ||target||_2)` when `relative`.
pub fn eval_loss_step(pred: &[f64], target: &[f64], p: u8, relative: bool) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape(format!("prediction of length {} vs target of length {}", pred.len(), target.len())));
    }
    match p {
        1 => Ok(pred.iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0),
        2 => {
            let d = pred.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if relative {
                let tn = target.iter().map(|v| v * v).sum::<f64>().sqrt();
                Ok(d / tn.max(1.0))
            } else {
                Ok(d)
            }
        }
        _ => Err(Error::param(format!("loss norm p = {p} is not 1 or 2"))),
    }
}

/// Largest `t` with `losses[s] < eps` for every `s < t`.
pub fn fit_length(losses: &[f64], eps: f64) -> usize {
    losses.iter().take_while(|&&l| l < eps).count()
}

/// Prefix rule over a masked loss list: absent steps neither break nor
/// extend the prefix, but the length still counts them.
pub fn fit_length_masked(losses: &[Option<f64>], eps: f64) -> usize {
    match losses.iter().position(|l| matches!(l, Some(v) if *v >= eps)) {
        Some(i) => i,
        None => losses.len(),
    }
}

/// Best fit length across a per-epoch history; the alternative to reading
/// only the final epoch.
pub fn best_over_epochs(fits: &[usize]) -> usize {
    fits.iter().copied().max().unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    All,
    /// Only steps whose next observation is a reveal emission (CyclicHMM-HARD).
    PredictionStage,
}

impl MaskKind {
    pub fn name(self) -> &'static str {
        match self {
            MaskKind::All => "all",
            MaskKind::PredictionStage => "prediction-stage",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(MaskKind::All),
            "prediction-stage" => Ok(MaskKind::PredictionStage),
            _ => Err(Error::param(format!("unknown mask `{s}`"))),
        }
    }

    /// Prediction-stage mask for CyclicHMM-HARD, all steps otherwise.
    pub fn default_for(model: &ModelInstance) -> Self {
        match model {
            ModelInstance::Hmm { family: HmmFamily::CyclicHard { .. }, .. } => MaskKind::PredictionStage,
            _ => MaskKind::All,
        }
    }
}

/// Per-step loss averaged over rollouts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub model_kind: String,
    pub t: usize,
    pub seed: u64,
    /// Index of the first rollout; rollout `i` uses seed `child_seed(seed, i)`.
    pub first: usize,
    pub rollouts: usize,
    pub mask: MaskKind,
    pub p: u8,
    pub relative: bool,
    /// `el_t` for `t = 1..=T`; `None` where no rollout had a defined target.
    pub per_step_loss: Vec<Option<f64>>,
    pub counts: Vec<usize>,
    pub fit_lengths: Vec<(f64, usize)>,
}

impl EvalReport {
    pub fn fit(&self, eps: f64) -> usize {
        fit_length_masked(&self.per_step_loss, eps)
    }

    /// `el_t` at 1-based step `t`.
    pub fn step(&self, t: usize) -> Option<f64> {
        self.per_step_loss.get(t.checked_sub(1)?).copied().flatten()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,mean_loss,count\n");
        for (i, (l, c)) in self.per_step_loss.iter().zip(&self.counts).enumerate() {
            match l {
                Some(v) => s.push_str(&format!("{},{},{}\n", i + 1, crate::textfmt::fmt_f64(*v), c)),
                None => s.push_str(&format!("{},,0\n", i + 1)),
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        let fits: Vec<_> = self
            .fit_lengths
            .iter()
            .map(|(e, l)| serde_json::json!({ "eps": e, "fit_length": l }))
            .collect();
        let v = serde_json::json!({
            "format-version": crate::textfmt::FORMAT_VERSION,
            "kind": "eval-report",
            "model-kind": self.model_kind,
            "T": self.t,
            "seed": self.seed,
            "first-rollout": self.first,
            "rollouts": self.rollouts,
            "mask": self.mask,
            "p": self.p,
            "relative": self.relative,
            "fit-rule": "prefix",
            "fit-lengths": fits,
        });
        serde_json::to_string_pretty(&v).expect("plain values")
    }
}

/// Anything that maps a trajectory of `model` to per-step predictions.
pub trait Predictor: Sync {
    fn predict(&self, model: &ModelInstance, traj: &Trajectory) -> Result<Array2<f64>>;
}

/// Returns the exact targets.
#[derive(Debug, Clone, Copy, Default)]
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, _model: &ModelInstance, traj: &Trajectory) -> Result<Array2<f64>> {
        targets_matrix(traj)
    }
}

impl Predictor for Checkpoint {
    fn predict(&self, model: &ModelInstance, traj: &Trajectory) -> Result<Array2<f64>> {
        let x = encode_inputs(model, traj, self.network.input_dim())?;
        Checkpoint::predict(self, &x)
    }
}

pub fn targets_matrix(traj: &Trajectory) -> Result<Array2<f64>> {
    let k = traj.targets.first().map_or(0, |r| r.len());
    let flat: Vec<f64> = traj.targets.iter().flatten().copied().collect();
    Array2::from_shape_vec((traj.len(), k), flat).map_err(|e| Error::shape(e.to_string()))
}

/// Observation rows: one-hot for discrete models, raw vectors otherwise.
pub fn encode_obs(obs: &Seq, obs_dim: usize) -> Result<Array2<f64>> {
    match obs {
        Seq::Discrete(v) => {
            let mut x = Array2::zeros((v.len(), obs_dim));
            for (t, &o) in v.iter().enumerate() {
                if o >= obs_dim {
                    return Err(Error::shape(format!("observation {o} outside one-hot width {obs_dim}")));
                }
                x[[t, o]] = 1.0;
            }
            Ok(x)
        }
        Seq::Continuous(v) => {
            if v.iter().any(|r| r.len() != obs_dim) {
                return Err(Error::shape("observation vector width mismatch"));
            }
            let flat: Vec<f64> = v.iter().flatten().copied().collect();
            Array2::from_shape_vec((v.len(), obs_dim), flat).map_err(|e| Error::shape(e.to_string()))
        }
    }
}

/// Network inputs for a trajectory. A width of `obs_dim + target_dim` means
/// a belief channel, filled with the time-0 target at the first position.
pub fn encode_inputs(model: &ModelInstance, traj: &Trajectory, input_dim: usize) -> Result<Array2<f64>> {
    let od = model.obs_dim();
    let x = encode_obs(&traj.obs, od)?;
    if input_dim == od {
        return Ok(x);
    }
    let k = model.target_dim(traj.kind)?;
    if input_dim != od + k {
        return Err(Error::shape(format!("network input width {input_dim} fits neither {od} nor {od} + {k}")));
    }
    let mut full = Array2::zeros((x.nrows(), input_dim));
    full.slice_mut(ndarray::s![.., ..od]).assign(&x);
    if x.nrows() > 0 {
        let b0 = model.initial_target(traj.kind)?;
        full.slice_mut(ndarray::s![0, od..]).assign(&ndarray::ArrayView1::from(&b0));
    }
    Ok(full)
}

/// Which steps of a CyclicHMM-HARD trajectory are scored under `mask`.
pub fn step_mask(model: &ModelInstance, traj: &Trajectory, mask: MaskKind) -> Result<Vec<bool>> {
    match mask {
        MaskKind::All => Ok(vec![true; traj.len()]),
        MaskKind::PredictionStage => {
            let ModelInstance::Hmm { hmm, family: HmmFamily::CyclicHard { .. } } = model else {
                return Err(Error::Task("the prediction-stage mask needs a CyclicHMM-HARD model".into()));
            };
            let na = hmm.n / 3;
            let states = traj.states.as_discrete().ok_or_else(|| Error::Task("missing hidden states".into()))?;
            // the next observation is a reveal iff the current state is a `*` state
            Ok(states.iter().map(|&s| (na..2 * na).contains(&s)).collect())
        }
    }
}

fn check_prediction(model: &ModelInstance, traj: &Trajectory, pred: &Array2<f64>) -> Result<()> {
    let k = model.target_dim(traj.kind)?;
    if pred.dim() != (traj.len(), k) {
        return Err(Error::Task(format!(
            "predictor returned {:?} for a {} task of shape ({}, {k})",
            pred.dim(),
            model.kind_name(),
            traj.len()
        )));
    }
    Ok(())
}

/// Per-step losses of one trajectory under `mask`.
pub fn trajectory_losses(
    pred: &dyn Predictor,
    model: &ModelInstance,
    traj: &Trajectory,
    mask: MaskKind,
) -> Result<Vec<Option<f64>>> {
    let y = pred.predict(model, traj)?;
    check_prediction(model, traj, &y)?;
    let keep = step_mask(model, traj, mask)?;
    let (p, rel) = model.eval_norm();
    (0..traj.len())
        .map(|t| {
            if keep[t] {
                let row = y.row(t).to_vec();
                eval_loss_step(&row, &traj.targets[t], p, rel).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect()
}

/// Evaluate on `e` fresh rollouts of length `t`.
pub fn eval_rollouts(
    pred: &dyn Predictor,
    model: &ModelInstance,
    e: usize,
    t: usize,
    seed: u64,
    mask: MaskKind,
) -> Result<EvalReport> {
    eval_rollouts_range(pred, model, 0, e, t, seed, mask)
}

/// Rollouts `first..first + count` of the seed family.
pub fn eval_rollouts_range(
    pred: &dyn Predictor,
    model: &ModelInstance,
    first: usize,
    count: usize,
    t: usize,
    seed: u64,
    mask: MaskKind,
) -> Result<EvalReport> {
    if count == 0 || t == 0 {
        return Err(Error::param("need at least one rollout of length at least 1"));
    }
    let kind = model.default_kind();
    let per: Vec<Result<Vec<Option<f64>>>> = (first..first + count)
        .into_par_iter()
        .map(|i| {
            let traj = rollout_with(model, t, child_seed(seed, i as u64), kind)?;
            trajectory_losses(pred, model, &traj, mask)
        })
        .collect();
    let mut sums = vec![0.0; t];
    let mut counts = vec![0usize; t];
    for r in per {
        for (s, l) in r?.into_iter().enumerate() {
            if let Some(v) = l {
                sums[s] += v;
                counts[s] += 1;
            }
        }
    }
    let per_step_loss: Vec<Option<f64>> =
        sums.iter().zip(&counts).map(|(&s, &c)| (c > 0).then(|| s / c as f64)).collect();
    let (p, relative) = model.eval_norm();
    let fit_lengths = DEFAULT_EPS.iter().map(|&e| (e, fit_length_masked(&per_step_loss, e))).collect();
    Ok(EvalReport {
        model_kind: model.kind_name().to_string(),
        t,
        seed,
        first,
        rollouts: count,
        mask,
        p,
        relative,
        per_step_loss,
        counts,
        fit_lengths,
    })
}
