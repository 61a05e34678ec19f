//! Trajectory sampling and target filling.

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{belief_sequence, kalman_next_means, next_obs_dist, HmmInstance, ModelInstance};
use crate::error::{Error, Result};
use crate::linalg::{gaussian_vec, sample_categorical, uniform_index};
use crate::rng::{child_seed, stream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    /// Filtering posterior (or the MatMul state vector).
    Belief,
    /// Law of the next observation.
    NextObs,
    /// Kalman predictive mean of the next observation.
    Kalman,
}

impl TargetKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TargetKind::Belief => "belief",
            TargetKind::NextObs => "nextobs",
            TargetKind::Kalman => "kalman",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "belief" => Ok(TargetKind::Belief),
            "nextobs" => Ok(TargetKind::NextObs),
            "kalman" => Ok(TargetKind::Kalman),
            _ => Err(Error::param(format!("unknown target kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Seq {
    Discrete(Vec<usize>),
    Continuous(Vec<Vec<f64>>),
}

impl Seq {
    pub fn len(&self) -> usize {
        match self {
            Seq::Discrete(v) => v.len(),
            Seq::Continuous(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn truncate(&mut self, t: usize) {
        match self {
            Seq::Discrete(v) => v.truncate(t),
            Seq::Continuous(v) => v.truncate(t),
        }
    }

    pub fn as_discrete(&self) -> Option<&[usize]> {
        match self {
            Seq::Discrete(v) => Some(v),
            Seq::Continuous(_) => None,
        }
    }
}

/// One sampled sequence. `targets[t]` is the target after seeing `obs[..=t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub obs: Seq,
    pub states: Seq,
    pub targets: Vec<Vec<f64>>,
    pub kind: TargetKind,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn truncated(&self, t: usize) -> Trajectory {
        let mut c = self.clone();
        c.obs.truncate(t);
        c.states.truncate(t);
        c.targets.truncate(t);
        c
    }
}

fn sample_hmm_path(hmm: &HmmInstance, t_len: usize, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let mut s = hmm.s0;
    let mut states = Vec::with_capacity(t_len);
    let mut obs = Vec::with_capacity(t_len);
    for _ in 0..t_len {
        s = sample_categorical(hmm.p.column(s), rng);
        let o = sample_categorical(hmm.o.column(s), rng);
        states.push(s);
        obs.push(o);
    }
    (states, obs)
}

fn hmm_targets(hmm: &HmmInstance, obs: &[usize], kind: TargetKind) -> Result<Vec<Vec<f64>>> {
    let beliefs = belief_sequence(hmm, obs)?;
    Ok(match kind {
        TargetKind::Belief => beliefs.into_iter().map(|b| b.to_vec()).collect(),
        TargetKind::NextObs => beliefs.iter().map(|b| next_obs_dist(hmm, b).to_vec()).collect(),
        TargetKind::Kalman => unreachable!("filtered by caller"),
    })
}

/// Roll out with the model's default target kind.
pub fn rollout(model: &ModelInstance, t_len: usize, seed: u64) -> Result<Trajectory> {
    rollout_with(model, t_len, seed, model.default_kind())
}

pub fn rollout_with(model: &ModelInstance, t_len: usize, seed: u64, kind: TargetKind) -> Result<Trajectory> {
    if t_len == 0 {
        return Err(Error::param("T must be at least 1"));
    }
    model.target_dim(kind)?;
    let mut rng = stream(seed, 0);
    match model {
        ModelInstance::Hmm { hmm, .. } => {
            let (states, obs) = sample_hmm_path(hmm, t_len, &mut rng);
            let targets = hmm_targets(hmm, &obs, kind)?;
            Ok(Trajectory { obs: Seq::Discrete(obs), states: Seq::Discrete(states), targets, kind })
        }
        ModelInstance::CyclicDet(c) => {
            let hmm = c.to_hmm();
            let (states, obs) = sample_hmm_path(&hmm, t_len, &mut rng);
            let targets = hmm_targets(&hmm, &obs, kind)?;
            Ok(Trajectory { obs: Seq::Discrete(obs), states: Seq::Discrete(states), targets, kind })
        }
        ModelInstance::MatMul(mm) => {
            let mut b = mm.b0.clone();
            let mut obs = Vec::with_capacity(t_len);
            let mut states = Vec::with_capacity(t_len);
            for _ in 0..t_len {
                let o = uniform_index(mm.m, &mut rng);
                b = mm.a[o].dot(&b);
                obs.push(o);
                states.push(b.to_vec());
            }
            Ok(Trajectory {
                obs: Seq::Discrete(obs),
                targets: states.clone(),
                states: Seq::Continuous(states),
                kind,
            })
        }
        ModelInstance::Lds(l) => {
            let mut x = l.x0.clone();
            let mut xs = Vec::with_capacity(t_len);
            let mut ys: Vec<Array1<f64>> = Vec::with_capacity(t_len);
            for _ in 0..t_len {
                x = l.a.dot(&x) + gaussian_vec(l.n, l.sigma_state, &mut rng);
                let y = l.b.dot(&x) + gaussian_vec(l.n, l.sigma_obs, &mut rng);
                xs.push(x.to_vec());
                ys.push(y);
            }
            let targets = kalman_next_means(l, &ys)?.into_iter().map(|v| v.to_vec()).collect();
            Ok(Trajectory {
                obs: Seq::Continuous(ys.into_iter().map(|y| y.to_vec()).collect()),
                states: Seq::Continuous(xs),
                targets,
                kind,
            })
        }
    }
}

/// `count` trajectories; trajectory `i` uses the seed stream `hash(seed, i)`.
pub fn rollout_batch(
    model: &ModelInstance,
    t_len: usize,
    count: usize,
    seed: u64,
    kind: TargetKind,
) -> Result<Vec<Trajectory>> {
    (0..count)
        .into_par_iter()
        .map(|i| rollout_with(model, t_len, child_seed(seed, i as u64), kind))
        .collect()
}
