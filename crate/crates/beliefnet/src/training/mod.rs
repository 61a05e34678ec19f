//! Gradients, AdamW, the warmup/step-decay schedule, the doubling
//! curriculum, block chain-of-thought and the training loop.

mod backward;

pub use backward::{backward, loss_rows, LossKind};

use ndarray::{s, Array2, ArrayView1};
use rand::seq::SliceRandom;

use crate::constructions::{cot_block_input, Theorem2};
use crate::error::{Error, Result};
use crate::evaluation::{encode_inputs, eval_rollouts, targets_matrix, EvalReport, MaskKind};
use crate::model_zoo::{ModelInstance, TargetKind, Trajectory};
use crate::nn_core::{transformer_forward, Checkpoint, Mode, Network, OutputHead};
use crate::rng::{hash_keys, stream};
use crate::textfmt::{fmt_f64, TextDoc};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moments per parameter tensor, in `tensors()` order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub hyper: AdamHyper,
}

impl OptimizerState {
    pub fn new(net: &Network, hyper: AdamHyper) -> Self {
        let shapes: Vec<usize> = net.tensors().iter().map(|(_, _, v)| v.len()).collect();
        OptimizerState {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            hyper,
        }
    }
}

/// Decoupled weight decay followed by the bias-corrected Adam update.
pub fn adamw_step(params: &mut Network, grads: &Network, state: &mut OptimizerState, lr: f64) -> Result<()> {
    let gs: Vec<&[f64]> = grads.tensors().into_iter().map(|(_, _, v)| v).collect();
    let mut ps = params.tensors_mut();
    let same = ps.len() == gs.len()
        && ps.len() == state.m.len()
        && ps.iter().zip(&gs).zip(&state.m).all(|((p, g), m)| p.len() == g.len() && p.len() == m.len());
    if !same {
        return Err(Error::shape("parameters, gradients and optimizer state disagree"));
    }
    state.step += 1;
    let h = state.hyper;
    let c1 = 1.0 - h.beta1.powi(state.step as i32);
    let c2 = 1.0 - h.beta2.powi(state.step as i32);
    for (k, p) in ps.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..p.len() {
            let g = gs[k][i];
            p[i] -= lr * h.weight_decay * p[i];
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + h.eps);
        }
    }
    Ok(())
}

/// Linear warmup, then halving every `decay_every` epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub start: f64,
    pub base: f64,
    pub warmup_steps: usize,
    pub decay: f64,
    pub decay_every: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { start: 1e-7, base: 1e-3, warmup_steps: 4000, decay: 0.5, decay_every: 20 }
    }
}

impl Schedule {
    pub fn lr(&self, step: usize, epoch: usize) -> f64 {
        if step < self.warmup_steps {
            self.start + (self.base - self.start) * step as f64 / self.warmup_steps as f64
        } else {
            self.base * self.decay.powi((epoch / self.decay_every.max(1)) as i32)
        }
    }
}

/// Default schedule: 1e-7 to 1e-3 over 4000 steps, then 1e-3 halved every 20 epochs.
pub fn lr_at(step: usize, epoch: usize) -> f64 {
    Schedule::default().lr(step, epoch)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CurriculumPlan {
    pub lengths: Vec<usize>,
    pub epochs: Vec<usize>,
}

impl CurriculumPlan {
    /// One stage at the full length.
    pub fn flat(t: usize, epochs: usize) -> Self {
        CurriculumPlan { lengths: vec![t], epochs: vec![epochs] }
    }

    /// Sequence length used in `epoch` (0-based).
    pub fn length_at(&self, epoch: usize) -> usize {
        let mut acc = 0;
        for (&l, &e) in self.lengths.iter().zip(&self.epochs) {
            acc += e;
            if epoch < acc {
                return l;
            }
        }
        *self.lengths.last().expect("non-empty plan")
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs.iter().sum()
    }
}

/// `8 - L` stages of length `2^L, 2^(L+1), ...` capped at `T`, the last
/// stage exactly `T`. Stages that collapse onto the same length are merged;
/// each gets `floor(epochs / (8 - L))` epochs and the last one also takes
/// the remainder.
pub fn curriculum_plan(l: usize, t: usize, epochs: usize) -> Result<CurriculumPlan> {
    if !(1..=7).contains(&l) {
        return Err(Error::param(format!("depth L = {l} outside 1..=7")));
    }
    if t == 0 {
        return Err(Error::param("T must be positive"));
    }
    let stages = 8 - l;
    let per = epochs / stages;
    let mut lengths: Vec<usize> = Vec::new();
    let mut eps: Vec<usize> = Vec::new();
    for i in 0..stages {
        let len = if i + 1 == stages { t } else { (1usize << (l + i)).min(t) };
        if lengths.last() == Some(&len) {
            *eps.last_mut().unwrap() += per;
        } else {
            lengths.push(len);
            eps.push(per);
        }
    }
    *eps.last_mut().unwrap() += epochs - per * stages;
    Ok(CurriculumPlan { lengths, epochs: eps })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feedback {
    Predicted,
    /// Ground-truth labels at block boundaries (training only).
    TeacherForced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockCotConfig {
    pub b: usize,
    pub feedback: Feedback,
    pub snap_onehot: bool,
}

impl BlockCotConfig {
    pub fn predicted(b: usize) -> Self {
        BlockCotConfig { b, feedback: Feedback::Predicted, snap_onehot: false }
    }
}

/// A predictor that takes a block of observations plus a belief injected at
/// the block start.
pub trait BlockPredictor {
    fn belief_dim(&self) -> usize;
    /// Longest block the predictor accepts, if bounded.
    fn max_block(&self) -> Option<usize>;
    /// One row per observation.
    fn predict_block(&self, obs: &[usize], belief: &[f64]) -> Result<Array2<f64>>;
}

/// A trained network whose input is `one-hot(obs) ++ belief channel`.
pub struct NetBlockPredictor<'a> {
    pub ckpt: &'a Checkpoint,
    pub obs_dim: usize,
    pub belief_dim: usize,
}

impl<'a> NetBlockPredictor<'a> {
    pub fn new(ckpt: &'a Checkpoint, model: &ModelInstance, kind: TargetKind) -> Result<Self> {
        let obs_dim = model.obs_dim();
        let belief_dim = model.target_dim(kind)?;
        if ckpt.network.input_dim() != obs_dim + belief_dim {
            return Err(Error::Task(format!(
                "network input width {} has no belief channel (expected {obs_dim} + {belief_dim})",
                ckpt.network.input_dim()
            )));
        }
        Ok(NetBlockPredictor { ckpt, obs_dim, belief_dim })
    }
}

/// `one-hot(obs) ++ channel`, channel nonzero only in the first row.
pub fn block_input(obs: &[usize], belief: &[f64], obs_dim: usize) -> Result<Array2<f64>> {
    let mut x = Array2::zeros((obs.len(), obs_dim + belief.len()));
    for (t, &o) in obs.iter().enumerate() {
        if o >= obs_dim {
            return Err(Error::param(format!("observation {o} out of range")));
        }
        x[[t, o]] = 1.0;
    }
    if !obs.is_empty() {
        x.slice_mut(s![0, obs_dim..]).assign(&ArrayView1::from(belief));
    }
    Ok(x)
}

impl BlockPredictor for NetBlockPredictor<'_> {
    fn belief_dim(&self) -> usize {
        self.belief_dim
    }

    fn max_block(&self) -> Option<usize> {
        match &self.ckpt.network {
            Network::Transformer(w) => w.pe.as_ref().map(|p| p.nrows()),
            Network::Rnn(_) => None,
        }
    }

    fn predict_block(&self, obs: &[usize], belief: &[f64]) -> Result<Array2<f64>> {
        self.ckpt.predict(&block_input(obs, belief, self.obs_dim)?)
    }
}

impl BlockPredictor for Theorem2 {
    fn belief_dim(&self) -> usize {
        self.layout.n
    }

    fn max_block(&self) -> Option<usize> {
        Some(self.params.t)
    }

    fn predict_block(&self, obs: &[usize], belief: &[f64]) -> Result<Array2<f64>> {
        if !self.layout.belief_channel {
            return Err(Error::Task("construction was built without a belief channel".into()));
        }
        let x = cot_block_input(obs, belief, self.params.t, self.layout.m)?;
        let y = transformer_forward(&self.weights, &x, Mode::Eval, 0)?;
        Ok(y.slice(s![1.., ..]).to_owned())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockCotRun {
    pub predictions: Array2<f64>,
    pub passes: usize,
    /// Vector injected at the start of each block.
    pub fed: Vec<Vec<f64>>,
}

fn snap(v: &[f64]) -> Vec<f64> {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    let mut out = vec![0.0; v.len()];
    out[best] = 1.0;
    out
}

/// Run `pred` over `ceil(T / b)` blocks, feeding back either its own last
/// prediction or the label at the block boundary.
pub fn block_cot_forward(
    pred: &dyn BlockPredictor,
    obs: &[usize],
    cfg: &BlockCotConfig,
    initial: &[f64],
    labels: Option<&[Vec<f64>]>,
) -> Result<BlockCotRun> {
    let t = obs.len();
    if cfg.b == 0 || cfg.b > t {
        return Err(Error::param(format!("block length {} outside 1..={t}", cfg.b)));
    }
    if let Some(mx) = pred.max_block() {
        if cfg.b > mx {
            return Err(Error::param(format!("block length {} exceeds the predictor limit {mx}", cfg.b)));
        }
    }
    let k = pred.belief_dim();
    if initial.len() != k {
        return Err(Error::shape(format!("initial belief of length {} vs channel {k}", initial.len())));
    }
    if cfg.feedback == Feedback::TeacherForced && labels.is_none_or(|l| l.len() != t) {
        return Err(Error::param("teacher forcing needs one label per step"));
    }
    let mut out = Array2::zeros((t, k));
    let mut fed = Vec::new();
    let mut belief = initial.to_vec();
    let mut passes = 0;
    for start in (0..t).step_by(cfg.b) {
        let end = (start + cfg.b).min(t);
        if cfg.snap_onehot {
            belief = snap(&belief);
        }
        fed.push(belief.clone());
        let y = pred.predict_block(&obs[start..end], &belief)?;
        passes += 1;
        if y.dim() != (end - start, k) {
            return Err(Error::shape(format!("block prediction {:?} vs ({}, {k})", y.dim(), end - start)));
        }
        out.slice_mut(s![start..end, ..]).assign(&y);
        belief = match (cfg.feedback, labels) {
            (Feedback::TeacherForced, Some(l)) => l[end - 1].clone(),
            _ => y.row(end - start - 1).to_vec(),
        };
    }
    Ok(BlockCotRun { predictions: out, passes, fed })
}

/// `sum_{i=1}^{floor(T/b)} (i b)^2`.
pub fn block_cot_cost(t: usize, b: usize) -> f64 {
    if b == 0 {
        return f64::INFINITY;
    }
    (1..=t / b).map(|i| ((i * b) as f64).powi(2)).sum()
}

/// Teacher-forced training examples: each block of `b` steps with the label
/// at the previous boundary (or the time-0 target) in the belief channel.
pub fn teacher_forced_blocks(
    model: &ModelInstance,
    traj: &Trajectory,
    b: usize,
) -> Result<Vec<(Array2<f64>, Array2<f64>)>> {
    let obs = traj.obs.as_discrete().ok_or_else(|| Error::Task("block CoT needs discrete observations".into()))?;
    if b == 0 {
        return Err(Error::param("block length must be positive"));
    }
    let y = targets_matrix(traj)?;
    let mut belief = model.initial_target(traj.kind)?;
    let mut out = Vec::new();
    for start in (0..obs.len()).step_by(b) {
        let end = (start + b).min(obs.len());
        out.push((block_input(&obs[start..end], &belief, model.obs_dim())?, y.slice(s![start..end, ..]).to_owned()));
        belief = traj.targets[end - 1].clone();
    }
    Ok(out)
}

/// Stop when the per-epoch evaluation satisfies the rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule {
    /// `el_step < below`.
    StepBelow { step: usize, below: f64 },
    /// Fit length at `eps` at least `length`.
    FitAtLeast { eps: f64, length: usize },
}

impl StopRule {
    pub fn met(&self, r: &EvalReport) -> bool {
        match *self {
            StopRule::StepBelow { step, below } => r.step(step).is_some_and(|l| l < below),
            StopRule::FitAtLeast { eps, length } => r.fit(eps) >= length,
        }
    }
}

/// Fresh-rollout evaluation after every epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalHook {
    pub rollouts: usize,
    pub t: usize,
    pub seed: u64,
    pub mask: MaskKind,
    /// 1-based steps whose `el_t` goes into the metrics CSV.
    pub probes: Vec<usize>,
    pub eps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub schedule: Schedule,
    pub adam: AdamHyper,
    /// `None` trains every epoch at the full length.
    pub plan: Option<CurriculumPlan>,
    /// Teacher-forced block CoT with this block length.
    pub block: Option<usize>,
    /// Global gradient-norm clip; off by default.
    pub clip: Option<f64>,
    pub eval: Option<EvalHook>,
    pub stop: Option<StopRule>,
}

impl TrainOptions {
    pub fn new(epochs: usize, loss: LossKind, seed: u64) -> Self {
        TrainOptions {
            epochs,
            batch: 64,
            seed,
            loss,
            schedule: Schedule::default(),
            adam: AdamHyper::default(),
            plan: None,
            block: None,
            clip: None,
            eval: None,
            stop: None,
        }
    }

    /// Every hyperparameter and seed, for the run-config document.
    pub fn echo(&self, d: &mut TextDoc) {
        let s = &self.schedule;
        let a = &self.adam;
        d.field("epochs", self.epochs)
            .field("batch", self.batch)
            .field("seed", self.seed)
            .field("loss", self.loss.name())
            .field("lr-start", fmt_f64(s.start))
            .field("lr-base", fmt_f64(s.base))
            .field("warmup-steps", s.warmup_steps)
            .field("lr-decay", fmt_f64(s.decay))
            .field("lr-decay-every", s.decay_every)
            .field("beta1", fmt_f64(a.beta1))
            .field("beta2", fmt_f64(a.beta2))
            .field("adam-eps", fmt_f64(a.eps))
            .field("weight-decay", fmt_f64(a.weight_decay))
            .field("block", self.block.map_or("none".to_string(), |b| b.to_string()))
            .field("clip", self.clip.map_or("none".to_string(), fmt_f64));
        if let Some(p) = &self.plan {
            d.field("plan-lengths", join(&p.lengths)).field("plan-epochs", join(&p.epochs));
        }
        if let Some(e) = &self.eval {
            d.field("eval-rollouts", e.rollouts)
                .field("eval-T", e.t)
                .field("eval-seed", e.seed)
                .field("eval-mask", e.mask.name())
                .field("eval-probes", join(&e.probes))
                .field("eval-eps", e.eps.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
        }
        if let Some(r) = &self.stop {
            let text = match r {
                StopRule::StepBelow { step, below } => format!("step-below:{step}:{below}"),
                StopRule::FitAtLeast { eps, length } => format!("fit-at-least:{eps}:{length}"),
            };
            d.field("stop", text);
        }
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub stage_len: usize,
    pub train_loss: f64,
    pub probes: Vec<(usize, Option<f64>)>,
    pub fits: Vec<(f64, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    /// Final weights, or the last finite ones after a divergence.
    pub network: Network,
    pub metrics: Vec<EpochMetrics>,
    pub step_losses: Vec<f64>,
    pub steps: usize,
    /// `(epoch, step)` of a non-finite loss.
    pub diverged: Option<(usize, usize)>,
    pub stopped_early: bool,
    pub last_report: Option<EvalReport>,
}

impl TrainResult {
    pub fn checkpoint(&self, head: OutputHead) -> Checkpoint {
        Checkpoint::new(self.network.clone(), head)
    }
}

/// Softmax for cross-entropy, identity for MSE.
pub fn head_for(loss: LossKind) -> OutputHead {
    match loss {
        LossKind::Mse => OutputHead::Linear,
        LossKind::CrossEntropy => OutputHead::Softmax,
    }
}

/// MSE for MatMul and LDS, cross-entropy for the distribution targets.
pub fn loss_for(model: &ModelInstance) -> LossKind {
    match model {
        ModelInstance::MatMul(_) | ModelInstance::Lds(_) => LossKind::Mse,
        _ => LossKind::CrossEntropy,
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,stage_len,train_loss");
    if let Some(r) = rows.first() {
        for (t, _) in &r.probes {
            s.push_str(&format!(",el_{t}"));
        }
        for (e, _) in &r.fits {
            s.push_str(&format!(",fit_{e}"));
        }
    }
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{}", r.epoch, r.stage_len, fmt_f64(r.train_loss)));
        for (_, v) in &r.probes {
            s.push(',');
            if let Some(v) = v {
                s.push_str(&fmt_f64(*v));
            }
        }
        for (_, f) in &r.fits {
            s.push_str(&format!(",{f}"));
        }
        s.push('\n');
    }
    s
}

fn grad_norm(g: &Network) -> f64 {
    g.tensors().iter().flat_map(|(_, _, v)| v.iter()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Epoch loop over seeded shuffles of `data`, truncated to the stage length.
pub fn train(net: Network, model: &ModelInstance, data: &[Trajectory], opts: &TrainOptions) -> Result<TrainResult> {
    if opts.batch == 0 {
        return Err(Error::param("batch size must be positive"));
    }
    let plan = opts.plan.clone().unwrap_or_else(|| CurriculumPlan::flat(data.iter().map(|d| d.len()).max().unwrap_or(0), opts.epochs));
    if opts.epochs > 0 && data.is_empty() {
        return Err(Error::param("empty dataset"));
    }
    let mut result = TrainResult {
        network: net.clone(),
        metrics: Vec::new(),
        step_losses: Vec::new(),
        steps: 0,
        diverged: None,
        stopped_early: false,
        last_report: None,
    };
    if opts.epochs == 0 {
        return Ok(result);
    }
    let want = loss_for(model);
    if want != opts.loss {
        return Err(Error::Task(format!("{} targets need the {} loss", model.kind_name(), want.name())));
    }
    // full-length encodings, sliced per stage
    let encoded: Vec<(Array2<f64>, Array2<f64>)> = match opts.block {
        Some(_) => Vec::new(),
        None => data
            .iter()
            .map(|tr| Ok((encode_inputs(model, tr, net.input_dim())?, targets_matrix(tr)?)))
            .collect::<Result<_>>()?,
    };
    let mut net = net;
    let mut state = OptimizerState::new(&net, opts.adam);
    let head = head_for(opts.loss);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..opts.epochs {
        let stage_len = plan.length_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut stream(opts.seed, 1 + epoch as u64));
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(opts.batch) {
            let (xs, ys) = if let Some(b) = opts.block {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for &i in chunk {
                    let tr = data[i].truncated(stage_len);
                    for (x, y) in teacher_forced_blocks(model, &tr, b)? {
                        xs.push(x);
                        ys.push(y);
                    }
                }
                (xs, ys)
            } else {
                chunk
                    .iter()
                    .map(|&i| {
                        let (x, y) = &encoded[i];
                        let l = stage_len.min(x.nrows());
                        (x.slice(s![..l, ..]).to_owned(), y.slice(s![..l, ..]).to_owned())
                    })
                    .unzip()
            };
            let step_seed = hash_keys(opts.seed, &[epoch as u64, result.steps as u64]);
            let (loss, mut g) = match backward(&net, &xs, &ys, opts.loss, Mode::Train, step_seed) {
                Ok(v) => v,
                Err(Error::Numeric(_)) => {
                    result.diverged = Some((epoch, result.steps));
                    result.network = net;
                    return Ok(result);
                }
                Err(e) => return Err(e),
            };
            if let Some(c) = opts.clip {
                let norm = grad_norm(&g);
                if norm > c {
                    let f = c / norm;
                    for t in g.tensors_mut() {
                        t.iter_mut().for_each(|x| *x *= f);
                    }
                }
            }
            let lr = opts.schedule.lr(result.steps, epoch);
            let before = net.clone();
            adamw_step(&mut net, &g, &mut state, lr)?;
            if net.tensors().iter().any(|(_, _, v)| v.iter().any(|x| !x.is_finite())) {
                result.diverged = Some((epoch, result.steps));
                result.network = before;
                return Ok(result);
            }
            result.step_losses.push(loss);
            result.steps += 1;
            epoch_loss += loss;
            batches += 1;
        }
        let mut row = EpochMetrics {
            epoch,
            stage_len,
            train_loss: epoch_loss / batches.max(1) as f64,
            probes: Vec::new(),
            fits: Vec::new(),
        };
        if let Some(h) = &opts.eval {
            let ck = Checkpoint::new(net.clone(), head);
            let r = eval_rollouts(&ck, model, h.rollouts, h.t, h.seed, h.mask)?;
            row.probes = h.probes.iter().map(|&t| (t, r.step(t))).collect();
            row.fits = h.eps.iter().map(|&e| (e, r.fit(e))).collect();
            let stop = opts.stop.is_some_and(|s| s.met(&r));
            result.last_report = Some(r);
            result.metrics.push(row);
            if stop {
                result.stopped_early = true;
                break;
            }
        } else {
            result.metrics.push(row);
        }
    }
    result.network = net;
    Ok(result)
}

#[cfg(test)]
mod tests;
