//! Command bodies. Each takes a validated [`RunConfig`] and a [`Ctx`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use beliefnet::constructions::{
    build_rnn_theorem1, build_tf_theorem2_with, theorem1_gate_margin, verify_construction, LinearRecurrence,
    StochasticPipeline, Theorem2, Theorem2Options,
};
use beliefnet::evaluation::{encode_obs, eval_rollouts, fit_length_masked, EvalReport, MaskKind, OraclePredictor, Predictor};
use beliefnet::model_zoo::{
    belief_sequence, build_cyclic_hard, gen_cyclic_det, gen_cyclic_rnd, gen_hmm, gen_hmm_floored, gen_lds, gen_matmul,
    kalman_next_means, rollout_batch, rollout_with, CyclicHardParams, CyclicRndParams, HmmFamily, ModelInstance,
    TargetKind, Trajectory,
};
use beliefnet::nn_core::{Checkpoint, Network, OutputHead, RnnWeights, TfConfig, TransformerWeights};
use beliefnet::rng::hash_keys;
use beliefnet::textfmt::{fmt_f64, TextDoc};
use beliefnet::training::{
    block_cot_cost, block_cot_forward, curriculum_plan, head_for, loss_for, metrics_csv, train, BlockCotConfig,
    BlockPredictor, EvalHook, Feedback, NetBlockPredictor, TrainOptions,
};
use ndarray::{Array1, Array2};

use crate::config::{parse_obs_list, parse_probes, parse_stop, RunConfig};
use crate::dataset::{
    dataset_digest, load_dataset, load_model, model_text, parse_doc, read_text, records_doc, sha256_hex, MODEL_FILE,
    RECORDS_FILE,
};
use crate::error::{CliError, CliResult, EXIT_OK, EXIT_VERIFY};

/// Environment variable naming the default output root.
pub const ENV_OUT_ROOT: &str = "BELIEFNET_OUT";
pub const RUN_CONFIG_FILE: &str = "run-config.txt";
pub const DIGESTS_FILE: &str = "digests.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";

/// Tolerance of the exact RNN construction.
pub const RNN_VERIFY_TOL: f64 = 1e-9;
/// Tolerance of the stochastic normalization pipeline.
pub const NORM_VERIFY_TOL: f64 = 1e-4;

#[derive(Debug, Default)]
pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub out_dir: Option<PathBuf>,
}

/// Output location, input digests recorded into the run-config, and the
/// digests the run-config expects (when replaying).
#[derive(Debug, Default)]
pub struct Ctx {
    pub out: Option<PathBuf>,
    pub expect: BTreeMap<String, String>,
    inputs: Vec<(String, String)>,
    files: Vec<(String, String)>,
    stdout: String,
}

impl Ctx {
    pub fn new(out: Option<PathBuf>) -> Self {
        Ctx { out, ..Default::default() }
    }

    fn say(&mut self, line: impl AsRef<str>) {
        self.stdout.push_str(line.as_ref());
        self.stdout.push('\n');
    }

    fn input(&mut self, key: &str, digest: &str) -> CliResult<()> {
        if let Some(want) = self.expect.get(key) {
            if want != digest {
                return Err(CliError::usage(format!("input `{key}` changed: run-config has {want}, found {digest}")));
            }
        }
        self.inputs.push((key.to_string(), digest.to_string()));
        Ok(())
    }

    fn dir(&self, cfg: &RunConfig) -> PathBuf {
        self.out.clone().unwrap_or_else(|| {
            let root = std::env::var_os(ENV_OUT_ROOT).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
            let h = sha256_hex(cfg.to_text().as_bytes());
            root.join(format!("{}-{}", cfg.command, &h[..12]))
        })
    }

    fn write(&mut self, cfg: &RunConfig, name: &str, text: &str) -> CliResult<()> {
        let dir = self.dir(cfg);
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        self.files.push((name.to_string(), sha256_hex(text.as_bytes())));
        Ok(())
    }

    /// Write the run-config echo and the digest list next to the artifacts.
    fn finish(mut self, cfg: &RunConfig, code: i32, wrote: bool) -> CliResult<Outcome> {
        let out_dir = if wrote {
            let mut d = cfg.to_doc();
            for (k, v) in &self.inputs {
                d.field(&format!("input.{k}"), v);
            }
            let files = std::mem::take(&mut self.files);
            self.write(cfg, RUN_CONFIG_FILE, &d.to_text())?;
            let mut dg = TextDoc::new("digests");
            for (name, h) in &files {
                dg.field(name, format!("sha256:{h}"));
            }
            self.write(cfg, DIGESTS_FILE, &dg.to_text())?;
            Some(self.dir(cfg))
        } else {
            None
        };
        Ok(Outcome { code, stdout: self.stdout, out_dir })
    }
}

/// Run-config fields of the form `input.<key>`.
pub fn expected_inputs(doc: &TextDoc) -> BTreeMap<String, String> {
    doc.fields.iter().filter_map(|(k, v)| k.strip_prefix("input.").map(|k| (k.to_string(), v.clone()))).collect()
}

pub fn execute(cfg: &RunConfig, ctx: Ctx) -> CliResult<Outcome> {
    let name = cfg.command.clone();
    let r = match name.as_str() {
        "gen" => cmd_gen(cfg, ctx),
        "rollout" => cmd_rollout(cfg, ctx),
        "filter" => cmd_filter(cfg, ctx),
        "construct" => cmd_construct(cfg, ctx),
        "verify" => cmd_verify(cfg, ctx),
        "train" => cmd_train(cfg, ctx),
        "eval" => cmd_eval(cfg, ctx),
        "fitlen" => cmd_fitlen(cfg, ctx),
        "bcot" => cmd_bcot(cfg, ctx),
        "cost" => cmd_cost(cfg, ctx),
        other => Err(CliError::usage(format!("unknown command `{other}`"))),
    };
    r.map_err(|e| e.context(&name))
}

fn target_kind(cfg: &RunConfig, model: &ModelInstance) -> CliResult<TargetKind> {
    let kind = match cfg.get("target") {
        "auto" => model.default_kind(),
        k => TargetKind::parse(k)?,
    };
    model.target_dim(kind)?;
    Ok(kind)
}

pub fn make_model(cfg: &RunConfig) -> CliResult<ModelInstance> {
    let (n, m, seed) = (cfg.usize("n"), cfg.usize("m"), cfg.u64("seed"));
    let kind = cfg.get("model-kind");
    let only = |key: &str, owner: &str| -> CliResult<()> {
        if cfg.get(key) != "none" && kind != owner {
            return Err(CliError::usage(format!("--{key} applies to {owner} only")));
        }
        Ok(())
    };
    only("floor", "hmm")?;
    only("back-eps", "cyclic-rnd")?;
    only("alpha", "cyclic-hard")?;
    Ok(match kind {
        "hmm" => {
            let hmm = match cfg.opt_f64("floor") {
                Some(f) => gen_hmm_floored(n, m, f, seed)?,
                None => gen_hmm(n, m, seed)?,
            };
            ModelInstance::Hmm { hmm, family: HmmFamily::Plain }
        }
        "matmul" => ModelInstance::MatMul(gen_matmul(n, m, seed)?),
        "lds" => ModelInstance::Lds(gen_lds(n, seed)?),
        "cyclic-det" => ModelInstance::CyclicDet(gen_cyclic_det(n, m, seed)?),
        "cyclic-rnd" => {
            let params = match cfg.opt_f64("back-eps") {
                Some(e) => CyclicRndParams::new(e)?,
                None => CyclicRndParams::default(),
            };
            let hmm = gen_cyclic_rnd(n, m, params, seed)?;
            ModelInstance::Hmm { hmm, family: HmmFamily::CyclicRnd { n, m, eps: params.eps } }
        }
        "cyclic-hard" => {
            let params = match cfg.opt_f64("alpha") {
                Some(a) => CyclicHardParams::new(a)?,
                None => CyclicHardParams::for_horizon(cfg.usize("T"))?,
            };
            let base = gen_cyclic_det(n, m, seed)?;
            let hmm = build_cyclic_hard(&base, params)?;
            ModelInstance::Hmm { hmm, family: HmmFamily::CyclicHard { n, m, alpha: params.alpha } }
        }
        other => return Err(CliError::usage(format!("unknown model kind `{other}`"))),
    })
}

fn cmd_gen(cfg: &RunConfig, mut ctx: Ctx) -> CliResult<Outcome> {
    let model = make_model(cfg)?;
    let kind = target_kind(cfg, &model)?;
    let t = cfg.usize("T");
    let trajs = rollout_batch(&model, t, cfg.usize("count"), hash_keys(cfg.u64("seed"), &[1]), kind)?;
    let mtext = model_text(&model);
    let rtext = records_doc(&trajs, t, kind).to_text();
    ctx.write(cfg, MODEL_FILE, &mtext)?;
    ctx.write(cfg, RECORDS_FILE, &rtext)?;
    ctx.say(format!("model {} n={} m={} target={}", model.kind_name(), cfg.usize("n"), cfg.usize("m"), kind.as_str()));
    ctx.say(format!("trajectories {} T={t}", trajs.len()));
    ctx.say(format!("dataset sha256:{}", dataset_digest(mtext.as_bytes(), rtext.as_bytes())));
    ctx.finish(cfg, EXIT_OK, true)
}

fn model_input(cfg: &RunConfig, ctx: &mut Ctx) -> CliResult<(ModelInstance, String)> {
    let (model, digest) = load_model(Path::new(cfg.get("model")))?;
    ctx.input("model-digest", &digest)?;
    Ok((model, digest))
}

fn cmd_rollout(cfg: &RunConfig, mut ctx: Ctx) -> CliResult<Outcome> {
    let (model, _) = model_input(cfg, &mut ctx)?;
    let kind = target_kind(cfg, &model)?;
    let t = cfg.usize("T");
    let tr = rollout_with(&model, t, cfg.u64("seed"), kind)?;
    let text = records_doc(std::slice::from_ref(&tr), t, kind).to_text();
    ctx.write(cfg, RECORDS_FILE, &text)?;
    match tr.obs.as_discrete() {
        Some(o) => ctx.say(format!("obs {}", o.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","))),
        None => ctx.say(format!("obs {} vectors", tr.len())),
    }
    ctx.finish(cfg, EXIT_OK, true)
}

fn rows_csv(rows: &[Array1<f64>]) -> String {
    let k = rows.first().map_or(0, |r| r.len());
    let mut s = String::from("step");
    for i in 0..k {
        s.push_str(&format!(",v{i}"));
    }
    s.push('\n');
    for (t, r) in rows.iter().enumerate() {
        s.push_str(&(t + 1).to_string());
        for x in r {
            s.push(',');
            s.push_str(&fmt_f64(*x));
        }
        s.push('\n');
    }
    s
}

fn as_indices(obs: &[Vec<f64>], m: usize) -> CliResult<Vec<usize>> {
    obs.iter()
        .map(|v| match v.as_slice() {
            [x] if *x >= 0.0 && x.fract() == 0.0 && (*x as usize) < m => Ok(*x as usize),
            _ => Err(CliError::usage(format!("observation {v:?} is not an index below {m}"))),
        })
        .collect()
}

/// Exact per-step targets of the default kind for a given observation list.
pub fn exact_targets(model: &ModelInstance, obs: &[Vec<f64>]) -> CliResult<Vec<Array1<f64>>> {
    match model {
        ModelInstance::MatMul(mm) => Ok(LinearRecurrence::from_matmul(mm).run(&as_indices(obs, mm.m)?)?),
        ModelInstance::Lds(l) => {
            if obs.iter().any(|v| v.len() != l.n) {
                return Err(CliError::usage(format!("lds observations must have {} entries", l.n)));
            }
            let ys: Vec<Array1<f64>> = obs.iter().map(|v| Array1::from(v.clone())).collect();
            Ok(kalman_next_means(l, &ys)?)
        }
        _ => {
            let hmm = model.as_hmm().expect("discrete family");
            let idx = as_indices(obs, hmm.m)?;
            let b = belief_sequence(&hmm, &idx)?;
            if model.default_kind() == TargetKind::NextObs {
                Ok(b.iter().map(|x| beliefnet::model_zoo::next_obs_dist(&hmm, x)).collect())
            } else {
                Ok(b)
            }
        }
    }
}

fn cmd_filter(cfg: &RunConfig, mut ctx: Ctx) -> CliResult<Outcome> {
    let (model, _) = model_input(cfg, &mut ctx)?;
    let obs = parse_obs_list(cfg.get("obs")).map_err(CliError::usage)?;
    let rows = exact_targets(&model, &obs)?;
    let csv = rows_csv(&rows);
    ctx.stdout.push_str(&csv);
    let wrote = ctx.out.is_some();
    if wrote {
        ctx.write(cfg, "targets.csv", &csv)?;
    }
    ctx.finish(cfg, EXIT_OK, wrote)
}

/// A rebuilt construction with the parameters that produced it.
pub enum Built {
    Rnn(RnnWeights),
    Tf { th: Box<Theorem2>, rec: LinearRecurrence },
    Norm(Box<StochasticPipeline>),
}

pub struct Construction {
    pub theorem: String,
    pub t: usize,
    pub block: Option<usize>,
    pub built: Built,
}

impl Construction {
    pub fn build(model: &ModelInstance, theorem: &str, t: usize, block: Option<usize>) -> CliResult<Self> {
        if t == 0 {
            return Err(CliError::usage("T must be at least 1"));
        }
        if block.is_some() && theorem != "tf" {
            return Err(CliError::usage("--block needs --theorem tf"));
        }
        let built = match theorem {
            "rnn" => Built::Rnn(build_rnn_theorem1(&LinearRecurrence::from_model(model)?)?.0),
            "tf" => {
                let rec = LinearRecurrence::from_model(model)?;
                let opts = Theorem2Options { belief_channel: block.is_some(), ..Default::default() };
                Built::Tf { th: Box::new(build_tf_theorem2_with(&rec, t, &opts)?), rec }
            }
            "norm" => {
                let ModelInstance::Hmm { hmm, .. } = model else {
                    return Err(CliError::usage(format!("norm needs an HMM, not {}", model.kind_name())));
                };
                Built::Norm(Box::new(StochasticPipeline::build(hmm, t)?))
            }
            other => return Err(CliError::usage(format!("unknown theorem `{other}`"))),
        };
        Ok(Construction { theorem: theorem.to_string(), t, block, built })
    }

    pub fn network(&self) -> Network {
        match &self.built {
            Built::Rnn(w) => Network::Rnn(w.clone()),
            Built::Tf { th, .. } => Network::Transformer(th.weights.clone()),
            Built::Norm(p) => Network::Transformer(p.tf.weights.clone()),
        }
    }

    pub fn checkpoint(&self, model_digest: &str) -> Checkpoint {
        let mut c = Checkpoint::new(self.network(), OutputHead::Linear);
        c.meta.push(("theorem".into(), self.theorem.clone()));
        c.meta.push(("T".into(), self.t.to_string()));
        c.meta.push(("block".into(), self.block.map_or("none".into(), |b| b.to_string())));
        c.meta.push(("model-digest".into(), model_digest.to_string()));
        c
    }

    /// Rebuild from the checkpoint metadata and insist on identical weights.
    pub fn from_checkpoint(ckpt: &Checkpoint, model: &ModelInstance, model_digest: &str) -> CliResult<Option<Self>> {
        let Some(theorem) = ckpt.meta_value("theorem") else { return Ok(None) };
        let meta = |k: &str| ckpt.meta_value(k).ok_or_else(|| CliError::usage(format!("checkpoint lacks meta `{k}`")));
        if meta("model-digest")? != model_digest {
            return Err(CliError::usage("incompatible checkpoint: it was constructed for a different model manifest"));
        }
        let t: usize = meta("T")?.parse().map_err(|_| CliError::usage("checkpoint meta `T` is not a number"))?;
        let block = match meta("block")? {
            "none" => None,
            b => Some(b.parse().map_err(|_| CliError::usage("checkpoint meta `block` is not a number"))?),
        };
        let c = Construction::build(model, theorem, t, block)?;
        if c.network() != ckpt.network {
            return Err(CliError::usage("incompatible checkpoint: weights differ from a fresh construction"));
        }
        Ok(Some(c))
    }
}

fn stack(rows: &[Array1<f64>]) -> Array2<f64> {
    let k = rows.first().map_or(0, |r| r.len());
    let mut out = Array2::zeros((rows.len(), k));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    out
}

fn discrete_obs(traj: &Trajectory) -> beliefnet::Result<&[usize]> {
    traj.obs.as_discrete().ok_or_else(|| beliefnet::Error::Task("constructions need discrete observations".into()))
}

/// Predictions of a construction on a trajectory.
impl Predictor for Construction {
    fn predict(&self, model: &ModelInstance, traj: &Trajectory) -> beliefnet::Result<Array2<f64>> {
        let obs = discrete_obs(traj)?;
        match &self.built {
            Built::Rnn(w) => Network::Rnn(w.clone()).forward(&encode_obs(&traj.obs, model.obs_dim())?),
            Built::Tf { th, .. } => match self.block {
                None => Ok(stack(&th.run(obs)?)),
                Some(b) => {
                    let init = model.initial_target(TargetKind::Belief)?;
                    let cfg = BlockCotConfig { b, feedback: Feedback::Predicted, snap_onehot: snap_for(model) };
                    Ok(block_cot_forward(th.as_ref(), obs, &cfg, &init, None)?.predictions)
                }
            },
            Built::Norm(p) => Ok(stack(&p.beliefs(obs)?)),
        }
    }
}

/// Point-mass beliefs can be snapped back to one-hot between blocks.
fn snap_for(model: &ModelInstance) -> bool {
    matches!(model, ModelInstance::CyclicDet(_))
}

fn cmd_construct(cfg: &RunConfig, mut ctx: Ctx) -> CliResult<Outcome> {
    let (model, digest) = model_input(cfg, &mut ctx)?;
    let t = cfg.usize("T");
    let c = Construction::build(&model, cfg.get("theorem"), t, cfg.opt_usize("block"))?;
    let mut params = TextDoc::new("construction-params");
    params.field("theorem", &c.theorem).field("T", t).field("model-kind", model.kind_name());
    match &c.built {
        Built::Rnn(w) => {
            params.field("hidden", w.hidden());
            ctx.say(format!("rnn hidden width {}", w.hidden()));
        }
        Built::Tf { th, .. } => {
            let p = th.params;
            params
                .field("layers", p.l)
                .field("n", p.n)
                .field("d", th.layout.d())
                .field("heads", th.weights.layers.first().map_or(0, |l| l.heads.len()))
                .field("mlp-width", th.mlp_width)
                .field("gamma", fmt_f64(p.gamma))
                .field("eta", fmt_f64(p.eta))
                .field("lambda", fmt_f64(p.lambda))
                .field("relu-sim-scale", fmt_f64(p.relu_sim_scale))
                .field("mlp-eps", fmt_f64(th.mlp_eps))
                .field("mlp-eps-floored", th.mlp_eps_floored)
                .field("belief-channel", th.layout.belief_channel)
                .field("max-weight", fmt_f64(th.max_weight()));
            ctx.say(format!("transformer layers {} width {} mlp {}", p.l, th.layout.d(), th.mlp_width));
        }
        Built::Norm(pl) => {
            let (p1, p2) = pl.norm.layer_count();
            let c_l = match &model {
                ModelInstance::Hmm { hmm, .. } => hmm.o.iter().cloned().fold(f64::INFINITY, f64::min),
                _ => unreachable!("checked by build"),
            };
            params
                .field("layers", pl.tf.params.l)
                .field("c-l", fmt_f64(c_l))
                .field("phase1-layers", p1)
                .field("phase2-layers", p2)
                .field("norm-max-weight", fmt_f64(pl.norm.max_weight()));
            ctx.say(format!("transformer layers {}", pl.tf.params.l));
            ctx.say(format!("normalization c_l {c_l} phase1 layers {p1} phase2 layers {p2}"));
        }
    }
    ctx.write(cfg, CHECKPOINT_FILE, &c.checkpoint(&digest).to_doc().to_text())?;
    ctx.write(cfg, "construction-params.txt", &params.to_text())?;
    ctx.finish(cfg, EXIT_OK, true)
}

pub fn load_checkpoint(path: &Path) -> CliResult<(Checkpoint, String)> {
    let text = read_text(path)?;
    let doc = parse_doc(path, &text)?;
    let c = Checkpoint::from_doc(&doc).map_err(|e| CliError::from(e).context(path.display()))?;
    Ok((c, sha256_hex(text.as_bytes())))
}

fn max_gap(pred: &Array2<f64>, targets: &[Vec<f64>]) -> f64 {
    let mut g = 0.0f64;
    for (row, t) in pred.rows().into_iter().zip(targets) {
        for (a, b) in row.iter().zip(t) {
            g = g.max((a - b).abs());
        }
    }
    g
}

fn cmd_verify(cfg: &RunConfig, mut ctx: Ctx) -> CliResult<Outcome> {
    let (ckpt, cdigest) = load_checkpoint(Path::new(cfg.get("checkpoint")))?;
    ctx.input("checkpoint-digest", &cdigest)?;
    let (model, mdigest) = model_input(cfg, &mut ctx)?;
    let c = Construction::from_checkpoint(&ckpt, &model, &mdigest)?
        .ok_or_else(|| CliError::usage("incompatible checkpoint: not produced by `construct`"))?;
    let t = cfg.opt_usize("T").unwrap_or(c.t);
    let traj = rollout_with(&model, t, cfg.u64("seed"), TargetKind::Belief)?;
    let obs = discrete_obs(&traj)?;
    let (doc, passed) = match &c.built {
        Built::Tf { th, rec } if c.block.is_none() => {
            let r = verify_construction(rec, th, obs)?;
            ctx.stdout.push_str(&r.table());
            (r.to_doc(), r.passed())
        }
        _ => {
            let pred = c.predict(&model, &traj)?;
            let gap = max_gap(&pred, &traj.targets);
            let bound = match &c.built {
                Built::Rnn(_) => RNN_VERIFY_TOL,
                Built::Norm(_) => NORM_VERIFY_TOL,
                Built::Tf { .. } => 1.0 / c.t as f64,
            };
            let mut d = TextDoc::new("verify-report");
            d.field("theorem", &c.theorem).field("T", t).field("max-error", fmt_f64(gap)).field("bound", fmt_f64(bound));
            let mut ok = gap <= bound;
            if let Built::Rnn(w) = &c.built {
                let margin = theorem1_gate_margin(w, model.obs_dim(), obs)?;
                d.field("gate-margin", fmt_f64(margin));
                ok &= margin < 0.0;
            }
            if let Some(b) = c.block {
                d.field("block", b).field("passes", t.div_ceil(b));
            }
            d.field("passed", ok);
            ctx.say(format!("{} max error {gap:.4e} bound {bound:.4e}", c.theorem));
            (d, ok)
        }
    };
    ctx.say(if passed { "verify: pass" } else { "verify: FAIL" });
    ctx.write(cfg, "verify-report.txt", &doc.to_text())?;
    ctx.finish(cfg, if passed { EXIT_OK } else { EXIT_VERIFY }, true)
}

fn mask_for(cfg: &RunConfig, model: &ModelInstance) -> CliResult<MaskKind> {
    Ok(match cfg.get("mask") {
        "auto" => MaskKind::default_for(model),
        m => MaskKind::parse(m)?,
    })
}

/// The initial network `train` starts from.
pub fn init_network(cfg: &RunConfig, input: usize, output: usize) -> CliResult<Network> {
    let (dim, seed) = (cfg.usize("dim"), cfg.u64("seed"));
    Ok(match cfg.get("net") {
        "rnn" => {
            if cfg.opt_usize("layers").is_some_and(|l| l != 1) {
                return Err(CliError::usage("the RNN has exactly one layer"));
            }
            Network::Rnn(RnnWeights::init(input, dim, output, seed))
        }
        _ => {
            let layers = cfg.opt_usize("layers").unwrap_or(2);
            let width = cfg.opt_usize("width").unwrap_or(4 * dim);
            Network::Transformer(TransformerWeights::init(
                input,
                dim,
                cfg.usize("heads"),
                layers,
                width,
                output,
                true,
                TfConfig::trained(),
                seed,
            )?)
        }
    })
}

fn cmd_train(cfg: &RunConfig, mut ctx: Ctx) -> CliResult<Outcome> {
    let ds = load_dataset(Path::new(cfg.get("data")))?;
    ctx.input("data-digest", &ds.digest)?;
    let model = &ds.model;
    if ds.kind != model.default_kind() {
        return Err(CliError::usage(format!(
            "dataset targets are `{}`; training expects `{}` for {}",
            ds.kind.as_str(),
            model.default_kind().as_str(),
            model.kind_name()
        )));
    }
    let tdim = model.target_dim(ds.kind)?;
    let block = cfg.opt_usize("block");
    let input = model.obs_dim() + if block.is_some() { tdim } else { 0 };
    let net = init_network(cfg, input, tdim)?;
    let loss = loss_for(model);
    let epochs = cfg.usize("epochs");
    let mut opts = TrainOptions::new(epochs, loss, cfg.u64("seed"));
    opts.batch = cfg.usize("batch");
    opts.schedule.base = cfg.f64("lr");
    opts.schedule.warmup_steps = cfg.usize("warmup");
    opts.block = block;
    if cfg.flag("curriculum") {
        let l = match &net {
            Network::Transformer(w) => w.layers.len(),
            Network::Rnn(_) => 1,
        };
        opts.plan = Some(curriculum_plan(l, ds.t, epochs)?);
    }
    if cfg.usize("eval-rollouts") > 0 {
        let t = cfg.opt_usize("eval-T").unwrap_or(ds.t);
        opts.eval = Some(EvalHook {
            rollouts: cfg.usize("eval-rollouts"),
            t,
            seed: cfg.u64("eval-seed"),
            mask: mask_for(cfg, model)?,
            probes: parse_probes(cfg.get("probes"), t).map_err(CliError::usage)?,
            eps: cfg.f64_list("eps"),
        });
    }
    opts.stop = parse_stop(cfg.get("stop")).map_err(CliError::usage)?;
    if opts.stop.is_some() && opts.eval.is_none() {
        return Err(CliError::usage("--stop needs per-epoch evaluation (--eval-rollouts > 0)"));
    }
    let r = train(net, model, &ds.trajs, &opts)?;
    let mut ck = r.checkpoint(head_for(loss));
    ck.meta.push(("net".into(), cfg.get("net").into()));
    ck.meta.push(("model-kind".into(), model.kind_name().into()));
    ck.meta.push(("block".into(), block.map_or("none".into(), |b| b.to_string())));
    ck.meta.push(("data-digest".into(), ds.digest.clone()));
    ctx.write(cfg, CHECKPOINT_FILE, &ck.to_doc().to_text())?;
    ctx.write(cfg, "metrics.csv", &metrics_csv(&r.metrics))?;
    let mut steps = String::from("step,loss\n");
    for (i, l) in r.step_losses.iter().enumerate() {
        steps.push_str(&format!("{},{}\n", i + 1, fmt_f64(*l)));
    }
    ctx.write(cfg, "step-losses.csv", &steps)?;
    if let Some(rep) = &r.last_report {
        ctx.write(cfg, "final-eval.csv", &rep.to_csv())?;
        ctx.write(cfg, "final-eval.json", &rep.to_json())?;
    }
    let mut echo = TextDoc::new("train-options");
    opts.echo(&mut echo);
    ctx.write(cfg, "train-options.txt", &echo.to_text())?;
    ctx.say(format!("steps {} epochs {}", r.steps, r.metrics.len()));
    if let Some(m) = r.metrics.last() {
        ctx.say(format!("final train loss {}", m.train_loss));
        for (e, f) in &m.fits {
            ctx.say(format!("fit eps={e} length={f}"));
        }
    }
    if r.stopped_early {
        ctx.say("stopped early: stop rule met");
    }
    let code = match r.diverged {
        Some((epoch, step)) => {
            ctx.say(format!("diverged at epoch {epoch}, step {step}; kept the last finite weights"));
            EXIT_VERIFY
        }
        None => EXIT_OK,
    };
    ctx.finish(cfg, code, true)
}

fn write_report(cfg: &RunConfig, ctx: &mut Ctx, mut r: EvalReport) -> CliResult<()> {
    r.fit_lengths = cfg.f64_list("eps").into_iter().map(|e| (e, r.fit(e))).collect();
    for (e, f) in &r.fit_lengths {
        ctx.say(format!("fit eps={e} length={f}"));
    }
    ctx.write(cfg, "eval.csv", &r.to_csv())?;
    ctx.write(cfg, "eval.json", &r.to_json())?;
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, mut ctx: Ctx) -> CliResult<Outcome> {
    let (model, mdigest) = model_input(cfg, &mut ctx)?;
    let mask = mask_for(cfg, &model)?;
    let (n, t, seed) = (cfg.usize("rollouts"), cfg.usize("T"), cfg.u64("seed"));
    let r = match (cfg.flag("oracle"), cfg.get("checkpoint")) {
        (true, "none") => eval_rollouts(&OraclePredictor, &model, n, t, seed, mask)?,
        (false, "none") => return Err(CliError::usage("give --checkpoint or --oracle")),
        (true, _) => return Err(CliError::usage("--checkpoint and --oracle are exclusive")),
        (false, path) => {
            let (ck, cdigest) = load_checkpoint(Path::new(path))?;
            ctx.input("checkpoint-digest", &cdigest)?;
            match Construction::from_checkpoint(&ck, &model, &mdigest)? {
                Some(c) => eval_rollouts(&c, &model, n, t, seed, mask)?,
                None => eval_rollouts(&ck, &model, n, t, seed, mask)?,
            }
        }
    };
    write_report(cfg, &mut ctx, r)?;
    ctx.finish(cfg, EXIT_OK, true)
}

/// Per-step losses from an `eval.csv`; empty cells are masked steps.
pub fn parse_loss_csv(text: &str) -> CliResult<Vec<Option<f64>>> {
    let mut lines = text.lines();
    if lines.next() != Some("step,mean_loss,count") {
        return Err(CliError::usage("expected the header `step,mean_loss,count`"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let cols: Vec<&str> = l.split(',').collect();
            if cols.len() != 3 || cols[0].parse::<usize>() != Ok(i + 1) {
                return Err(CliError::usage(format!("line {}: malformed row `{l}`", i + 2)));
            }
            match cols[1] {
                "" => Ok(None),
                v => v.parse().map(Some).map_err(|_| CliError::usage(format!("line {}: bad loss `{v}`", i + 2))),
            }
        })
        .collect()
}

fn cmd_fitlen(cfg: &RunConfig, mut ctx: Ctx) -> CliResult<Outcome> {
    let path = Path::new(cfg.get("losses"));
    let text = read_text(path)?;
    ctx.input("losses-digest", &sha256_hex(text.as_bytes()))?;
    let losses = parse_loss_csv(&text).map_err(|e| e.context(path.display()))?;
    let mut d = TextDoc::new("fit-lengths");
    d.field("T", losses.len()).field("fit-rule", "prefix");
    for e in cfg.f64_list("eps") {
        let f = fit_length_masked(&losses, e);
        ctx.say(format!("fit eps={e} length={f}"));
        d.field(&format!("fit.{e}"), f);
    }
    let wrote = ctx.out.is_some();
    if wrote {
        ctx.write(cfg, "fitlen.txt", &d.to_text())?;
    }
    ctx.finish(cfg, EXIT_OK, wrote)
}

/// Block chain-of-thought around any block predictor, seen as a plain predictor.
struct CotPredictor<'a> {
    inner: &'a (dyn BlockPredictor + Sync),
    cfg: BlockCotConfig,
    initial: Vec<f64>,
}

impl Predictor for CotPredictor<'_> {
    fn predict(&self, _model: &ModelInstance, traj: &Trajectory) -> beliefnet::Result<Array2<f64>> {
        Ok(block_cot_forward(self.inner, discrete_obs(traj)?, &self.cfg, &self.initial, None)?.predictions)
    }
}

fn cmd_bcot(cfg: &RunConfig, mut ctx: Ctx) -> CliResult<Outcome> {
    let (model, mdigest) = model_input(cfg, &mut ctx)?;
    let (ck, cdigest) = load_checkpoint(Path::new(cfg.get("checkpoint")))?;
    ctx.input("checkpoint-digest", &cdigest)?;
    let (t, b) = (cfg.usize("T"), cfg.usize("block"));
    if b == 0 || b > t {
        return Err(CliError::usage(format!("block length {b} outside 1..={t}")));
    }
    let bcfg = BlockCotConfig { b, feedback: Feedback::Predicted, snap_onehot: cfg.flag("snap") };
    let kind = model.default_kind();
    let initial = model.initial_target(kind)?;
    let construction = Construction::from_checkpoint(&ck, &model, &mdigest)?;
    let net_pred;
    let inner: &(dyn BlockPredictor + Sync) = match &construction {
        Some(Construction { built: Built::Tf { th, .. }, block: Some(_), .. }) => th.as_ref(),
        Some(_) => return Err(CliError::usage("this construction has no belief channel; rebuild with --block")),
        None => {
            net_pred = NetBlockPredictor::new(&ck, &model, kind)?;
            &net_pred
        }
    };
    if inner.max_block().is_some_and(|m| b > m) {
        return Err(CliError::usage(format!("block length {b} exceeds the predictor's limit")));
    }
    let pred = CotPredictor { inner, cfg: bcfg, initial };
    let r = eval_rollouts(&pred, &model, cfg.usize("rollouts"), t, cfg.u64("seed"), mask_for(cfg, &model)?)?;
    ctx.say(format!("passes per sequence {}", t.div_ceil(b)));
    write_report(cfg, &mut ctx, r)?;
    ctx.finish(cfg, EXIT_OK, true)
}

fn cmd_cost(cfg: &RunConfig, mut ctx: Ctx) -> CliResult<Outcome> {
    let (t, b) = (cfg.usize("T"), cfg.usize("block"));
    if b == 0 || b > t {
        return Err(CliError::usage(format!("block length {b} outside 1..={t}")));
    }
    let (c, c1) = (block_cot_cost(t, b), block_cot_cost(t, 1));
    ctx.say(format!("cost T={t} b={b} {c}"));
    ctx.say(format!("ratio cost(b=1)/cost(b={b}) {}", c1 / c));
    let wrote = ctx.out.is_some();
    if wrote {
        let mut d = TextDoc::new("cost");
        d.field("T", t).field("block", b).field("cost", fmt_f64(c)).field("ratio-to-b1", fmt_f64(c1 / c));
        ctx.write(cfg, "cost.txt", &d.to_text())?;
    }
    ctx.finish(cfg, EXIT_OK, wrote)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_csv_parsing() {
        let v = parse_loss_csv("step,mean_loss,count\n1,0.5,3\n2,,0\n3,1e-3,3\n").unwrap();
        assert_eq!(v, vec![Some(0.5), None, Some(1e-3)]);
        assert!(parse_loss_csv("a,b\n").is_err());
        assert!(parse_loss_csv("step,mean_loss,count\n2,0.5,3\n").is_err());
        assert!(parse_loss_csv("step,mean_loss,count\n1,x,3\n").is_err());
    }

    #[test]
    fn exact_targets_per_family() {
        let mm = gen_matmul(2, 2, 1).unwrap();
        let rows = exact_targets(&ModelInstance::MatMul(mm.clone()), &[vec![1.0], vec![0.0]]).unwrap();
        assert_eq!(rows[1], mm.a[0].dot(&mm.a[1].dot(&mm.b0)));
        assert!(exact_targets(&ModelInstance::MatMul(mm), &[vec![2.0]]).is_err());
        let cd = gen_cyclic_det(3, 2, 1).unwrap();
        let rows = exact_targets(&ModelInstance::CyclicDet(cd.clone()), &[vec![1.0]]).unwrap();
        assert_eq!(rows[0].len(), 6);
        assert_eq!(rows[0].sum(), 1.0);
    }
}
