use ndarray::{array, Array1, Array2};
use rand::Rng as _;

use super::*;
use crate::constructions::{build_tf_theorem2_with, LinearRecurrence, Theorem2Options};
use crate::model_zoo::{
    belief_update, gen_cyclic_det, gen_hmm, gen_matmul, rollout, rollout_batch, HmmFamily, HmmInstance,
};
use crate::nn_core::{rnn_forward, Activation, RnnWeights, TfConfig, TransformerWeights};
use crate::rng::child_seed;

fn random_batch(input: usize, output: usize, lens: &[usize], seed: u64, dist: bool) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
    let mut g = stream(seed, 9);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &t in lens {
        xs.push(Array2::from_shape_fn((t, input), |_| g.random_range(-1.0..1.0)));
        let mut y = Array2::from_shape_fn((t, output), |_| g.random_range(0.05..1.0));
        if dist {
            for mut r in y.rows_mut() {
                let s = r.sum();
                r /= s;
            }
        }
        ys.push(y);
    }
    (xs, ys)
}

/// Loss through the forward engine, independent of the backward code.
fn direct_loss(net: &Network, xs: &[Array2<f64>], ys: &[Array2<f64>], loss: LossKind, mode: Mode, seed: u64) -> f64 {
    let n: usize = xs.iter().map(|x| x.nrows()).sum();
    let mut total = 0.0;
    for (i, (x, y)) in xs.iter().zip(ys).enumerate() {
        let out = match net {
            Network::Rnn(w) => rnn_forward(w, x).unwrap().1,
            Network::Transformer(w) => transformer_forward(w, x, mode, child_seed(seed, i as u64)).unwrap(),
        };
        total += match loss {
            LossKind::Mse => (&out - y).iter().map(|d| d * d).sum::<f64>() / (n * y.ncols()) as f64,
            LossKind::CrossEntropy => {
                let mut acc = 0.0;
                for (o, t) in out.rows().into_iter().zip(y.rows()) {
                    let z: f64 = o.iter().map(|v| v.exp()).sum();
                    acc -= o.iter().zip(t).map(|(v, p)| p * (v - z.ln())).sum::<f64>();
                }
                acc / n as f64
            }
        };
    }
    total
}

/// Worst relative error `|a - n| / max(|a|, |n|, 1e-6)` over every parameter.
fn fd_worst(net: &Network, xs: &[Array2<f64>], ys: &[Array2<f64>], loss: LossKind, mode: Mode, seed: u64) -> f64 {
    let (value, g) = backward(net, xs, ys, loss, mode, seed).unwrap();
    assert!((value - direct_loss(net, xs, ys, loss, mode, seed)).abs() < 1e-12);
    let grads: Vec<Vec<f64>> = g.tensors().into_iter().map(|(_, _, v)| v.to_vec()).collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    for (k, gk) in grads.iter().enumerate() {
        for i in 0..gk.len() {
            let orig = probe.tensors_mut()[k][i];
            probe.tensors_mut()[k][i] = orig + h;
            let up = direct_loss(&probe, xs, ys, loss, mode, seed);
            probe.tensors_mut()[k][i] = orig - h;
            let down = direct_loss(&probe, xs, ys, loss, mode, seed);
            probe.tensors_mut()[k][i] = orig;
            let num = (up - down) / (2.0 * h);
            let rel = (gk[i] - num).abs() / gk[i].abs().max(num.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

fn small_tf(cfg: TfConfig, seed: u64) -> TransformerWeights {
    let mut w = TransformerWeights::init(3, 8, 2, 2, 12, 4, true, cfg, seed).unwrap();
    // move LN gains and biases off their defaults so their gradients are exercised
    let mut g = stream(seed, 5);
    for l in &mut w.layers {
        l.ln1_g.mapv_inplace(|_| g.random_range(0.5..1.5));
        l.ln2_b.mapv_inplace(|_| g.random_range(-0.2..0.2));
    }
    w.lnf_g.mapv_inplace(|_| g.random_range(0.5..1.5));
    w.enc_b.mapv_inplace(|_| g.random_range(-0.2..0.2));
    w
}

#[test]
fn rnn_gradients_match_finite_differences() {
    let mut w = RnnWeights::init(3, 6, 4, 2);
    w.h0.mapv_inplace(|_| 0.3);
    let net = Network::Rnn(w);
    for (loss, dist) in [(LossKind::Mse, false), (LossKind::CrossEntropy, true)] {
        let (xs, ys) = random_batch(3, 4, &[5, 5, 3], 1, dist);
        let worst = fd_worst(&net, &xs, &ys, loss, Mode::Eval, 0);
        assert!(worst <= 1e-4, "{loss:?}: {worst}");
    }
}

#[test]
fn transformer_gradients_match_finite_differences() {
    let mut relu_cfg = TfConfig::construction();
    relu_cfg.activation = Activation::Relu;
    relu_cfg.use_residual_attn = false;
    let cases = [
        (TfConfig::trained(), Mode::Train),
        (TfConfig::trained(), Mode::Eval),
        (relu_cfg, Mode::Eval),
    ];
    for (ci, (cfg, mode)) in cases.into_iter().enumerate() {
        let net = Network::Transformer(small_tf(cfg, 3 + ci as u64));
        for (loss, dist) in [(LossKind::Mse, false), (LossKind::CrossEntropy, true)] {
            let (xs, ys) = random_batch(3, 4, &[6, 4], 7, dist);
            let worst = fd_worst(&net, &xs, &ys, loss, mode, 11);
            assert!(worst <= 1e-4, "case {ci} {loss:?}: {worst}");
        }
    }
}

#[test]
fn loss_edge_cases() {
    let net = Network::Rnn(RnnWeights::zeros(2, 3, 2));
    let xs = vec![Array2::zeros((4, 2))];
    let ys = vec![Array2::zeros((4, 2))];
    let (l, g) = backward(&net, &xs, &ys, LossKind::Mse, Mode::Eval, 0).unwrap();
    assert_eq!(l, 0.0);
    assert!(g.tensors().iter().all(|(_, _, v)| v.iter().all(|&x| x == 0.0)));
    let ys = vec![Array2::from_elem((4, 2), 0.5)];
    let (l, _) = backward(&net, &xs, &ys, LossKind::CrossEntropy, Mode::Eval, 0).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    assert!(backward(&net, &xs, &[Array2::zeros((3, 2))], LossKind::Mse, Mode::Eval, 0).is_err());
    let mut bad = RnnWeights::zeros(2, 3, 2);
    bad.dec_b[0] = f64::INFINITY;
    assert!(matches!(
        backward(&Network::Rnn(bad), &xs, &ys, LossKind::Mse, Mode::Eval, 0),
        Err(Error::Numeric(_))
    ));
}

#[test]
fn adamw_basics() {
    let mut w = RnnWeights::init(2, 3, 2, 4);
    let net0 = Network::Rnn(w.clone());
    let zero = net0.zeros_like();
    let mut net = net0.clone();
    let mut st = OptimizerState::new(&net, AdamHyper { weight_decay: 0.0, ..Default::default() });
    adamw_step(&mut net, &zero, &mut st, 1e-3).unwrap();
    assert_eq!(net, net0);

    // first step moves each coordinate by lr against the sign of its gradient
    let mut g = RnnWeights::zeros(2, 3, 2);
    g.w2[[0, 1]] = 3.0;
    g.b[2] = -0.01;
    let mut st = OptimizerState::new(&net0, AdamHyper { weight_decay: 0.0, ..Default::default() });
    let mut net = net0.clone();
    adamw_step(&mut net, &Network::Rnn(g), &mut st, 0.1).unwrap();
    let Network::Rnn(after) = &net else { unreachable!() };
    assert!((after.w2[[0, 1]] - (w.w2[[0, 1]] - 0.1)).abs() < 1e-6);
    assert!((after.b[2] - (w.b[2] + 0.1)).abs() < 1e-5);
    assert_eq!(after.w1, w.w1);

    w.w1[[0, 0]] = 1.0;
    let mut st = OptimizerState::new(&Network::Rnn(w.clone()), AdamHyper::default());
    let mut net = Network::Rnn(w);
    adamw_step(&mut net, &zero, &mut st, 0.5).unwrap();
    let Network::Rnn(after) = &net else { unreachable!() };
    assert!((after.w1[[0, 0]] - (1.0 - 0.5 * 0.01)).abs() < 1e-15);
    assert!(adamw_step(&mut net, &Network::Rnn(RnnWeights::zeros(2, 4, 2)), &mut st, 0.1).is_err());
}

#[test]
fn adamw_descends_a_quadratic() {
    // f(p) = sum (p - c)^2 on the RNN parameter vector
    let net0 = Network::Rnn(RnnWeights::init(2, 2, 1, 8));
    let target: Vec<Vec<f64>> = net0.tensors().iter().map(|(_, _, v)| v.iter().map(|x| x + 1.0).collect()).collect();
    let f = |n: &Network| -> f64 {
        n.tensors().iter().zip(&target).flat_map(|((_, _, v), c)| v.iter().zip(c)).map(|(a, b)| (a - b).powi(2)).sum()
    };
    let mut net = net0;
    let mut st = OptimizerState::new(&net, AdamHyper { weight_decay: 0.0, ..Default::default() });
    let mut prev = f(&net);
    for step in 0..100 {
        let mut g = net.zeros_like();
        let vals: Vec<Vec<f64>> = net.tensors().iter().map(|(_, _, v)| v.to_vec()).collect();
        for (k, t) in g.tensors_mut().into_iter().enumerate() {
            for (i, x) in t.iter_mut().enumerate() {
                *x = 2.0 * (vals[k][i] - target[k][i]);
            }
        }
        adamw_step(&mut net, &g, &mut st, 0.01).unwrap();
        let now = f(&net);
        if step >= 1 {
            assert!(now < prev, "step {step}: {now} >= {prev}");
        }
        prev = now;
    }
}

#[test]
fn schedule_values() {
    assert_eq!(lr_at(0, 0), 1e-7);
    assert!((lr_at(2000, 0) - 5.0005e-4).abs() < 1e-15);
    assert_eq!(lr_at(4000, 0), 1e-3);
    assert_eq!(lr_at(10_000, 25), 5e-4);
    assert_eq!(lr_at(10_000, 40), 2.5e-4);
    assert_eq!(lr_at(10_000, 19), 1e-3);
}

#[test]
fn curriculum_examples() {
    assert_eq!(curriculum_plan(6, 120, 20).unwrap().lengths, vec![64, 120]);
    assert_eq!(curriculum_plan(7, 120, 20).unwrap().lengths, vec![120]);
    assert_eq!(curriculum_plan(5, 120, 30).unwrap().lengths, vec![32, 64, 120]);
    let p = curriculum_plan(1, 24, 10).unwrap();
    assert_eq!(p.lengths, vec![2, 4, 8, 16, 24]);
    assert_eq!(p.total_epochs(), 10);
    assert_eq!(p.epochs, vec![1, 1, 1, 1, 6]);
    let p = curriculum_plan(5, 120, 31).unwrap();
    assert_eq!(p.epochs, vec![10, 10, 11]);
    assert_eq!(p.length_at(0), 32);
    assert_eq!(p.length_at(10), 64);
    assert_eq!(p.length_at(30), 120);
    assert!(curriculum_plan(0, 120, 1).is_err());
    assert!(curriculum_plan(8, 120, 1).is_err());
}

proptest::proptest! {
    #[test]
    fn curriculum_ends_at_t(l in 1usize..=7, t in 1usize..400, e in 0usize..50) {
        let p = curriculum_plan(l, t, e).unwrap();
        proptest::prop_assert_eq!(*p.lengths.last().unwrap(), t);
        proptest::prop_assert!(p.lengths.windows(2).all(|w| w[0] < w[1]));
        proptest::prop_assert!(p.lengths.iter().all(|&x| x <= t));
        proptest::prop_assert_eq!(p.total_epochs(), e);
    }
}

#[test]
fn cost_model() {
    assert_eq!(block_cot_cost(60, 60), 3600.0);
    assert_eq!(block_cot_cost(60, 1), 73810.0);
    assert_eq!(block_cot_cost(60, 12), 7920.0);
    // nonincreasing along block sizes that divide T
    for t in [12usize, 60, 96] {
        let divs: Vec<usize> = (1..=t).filter(|b| t % b == 0).collect();
        for w in divs.windows(2) {
            assert!(block_cot_cost(t, w[1]) < block_cot_cost(t, w[0]), "T = {t}, b = {}", w[0]);
        }
    }
    // the floor drops the tail block, so the sum is not monotone over all b
    assert_eq!(block_cot_cost(10, 4), 80.0);
    assert_eq!(block_cot_cost(10, 5), 125.0);
    assert!(block_cot_cost(60, 12) > block_cot_cost(60, 11));
}

/// Exact one-step Bayes filter from the injected belief.
struct BayesBlocks(HmmInstance);

impl BlockPredictor for BayesBlocks {
    fn belief_dim(&self) -> usize {
        self.0.n
    }
    fn max_block(&self) -> Option<usize> {
        None
    }
    fn predict_block(&self, obs: &[usize], belief: &[f64]) -> Result<Array2<f64>> {
        let mut b = Array1::from(belief.to_vec());
        let mut out = Array2::zeros((obs.len(), self.0.n));
        for (t, &o) in obs.iter().enumerate() {
            b = belief_update(&self.0, &b, o)?;
            out.row_mut(t).assign(&b);
        }
        Ok(out)
    }
}

#[test]
fn block_cot_pass_counts_and_teacher_forcing() {
    let hmm = gen_hmm(3, 3, 2).unwrap();
    let model = ModelInstance::Hmm { hmm: hmm.clone(), family: HmmFamily::Plain };
    let tr = rollout(&model, 60, 3).unwrap();
    let obs = tr.obs.as_discrete().unwrap();
    let pred = BayesBlocks(hmm.clone());
    let b0 = hmm.initial_belief().to_vec();
    for b in [1usize, 7, 12, 60] {
        let run = block_cot_forward(&pred, obs, &BlockCotConfig::predicted(b), &b0, None).unwrap();
        assert_eq!(run.passes, 60usize.div_ceil(b));
        assert_eq!(run.fed.len(), run.passes);
    }
    let cfg = BlockCotConfig { b: 1, feedback: Feedback::TeacherForced, snap_onehot: false };
    let run = block_cot_forward(&pred, obs, &cfg, &b0, Some(&tr.targets)).unwrap();
    for t in 0..60 {
        let prev = if t == 0 { hmm.initial_belief() } else { Array1::from(tr.targets[t - 1].clone()) };
        let step = belief_update(&hmm, &prev, obs[t]).unwrap();
        assert_eq!(run.predictions.row(t).to_owned(), step);
        assert_eq!(run.fed[t], prev.to_vec());
    }
    assert!(block_cot_forward(&pred, obs, &BlockCotConfig::predicted(61), &b0, None).is_err());
    assert!(block_cot_forward(&pred, obs, &BlockCotConfig::predicted(0), &b0, None).is_err());
    assert!(block_cot_forward(&pred, obs, &cfg, &b0, None).is_err());
}

#[test]
fn block_cot_full_block_is_one_plain_pass() {
    let model = ModelInstance::MatMul(gen_matmul(3, 2, 1).unwrap());
    let w = TransformerWeights::init(5, 8, 2, 1, 8, 3, true, TfConfig::trained(), 2).unwrap();
    let ck = Checkpoint::new(Network::Transformer(w), OutputHead::Linear);
    let tr = rollout(&model, 10, 4).unwrap();
    let pred = NetBlockPredictor::new(&ck, &model, TargetKind::Belief).unwrap();
    let b0 = model.initial_target(TargetKind::Belief).unwrap();
    let run = block_cot_forward(&pred, tr.obs.as_discrete().unwrap(), &BlockCotConfig::predicted(10), &b0, None).unwrap();
    let plain = crate::evaluation::Predictor::predict(&ck, &model, &tr).unwrap();
    assert_eq!(run.predictions, plain);
    assert_eq!(run.passes, 1);
    let no_channel = Checkpoint::new(
        Network::Transformer(TransformerWeights::init(2, 8, 2, 1, 8, 3, true, TfConfig::trained(), 2).unwrap()),
        OutputHead::Linear,
    );
    assert!(matches!(NetBlockPredictor::new(&no_channel, &model, TargetKind::Belief), Err(Error::Task(_))));
}

#[test]
fn construction_block_cot_is_exact_when_depth_covers_the_block() {
    let cd = gen_cyclic_det(3, 3, 2).unwrap();
    let model = ModelInstance::CyclicDet(cd.clone());
    let rec = LinearRecurrence::from_model(&model).unwrap();
    let opts = Theorem2Options { belief_channel: true, ..Default::default() };
    let th = build_tf_theorem2_with(&rec, 8, &opts).unwrap();
    let tr = rollout(&model, 48, 6).unwrap();
    let obs = tr.obs.as_discrete().unwrap();
    let b0 = model.initial_target(TargetKind::Belief).unwrap();
    let cfg = BlockCotConfig { b: 7, feedback: Feedback::Predicted, snap_onehot: true };
    let run = block_cot_forward(&th, obs, &cfg, &b0, None).unwrap();
    assert_eq!(run.passes, 7);
    for t in 0..48 {
        let row = run.predictions.row(t);
        let gap = row.iter().zip(&tr.targets[t]).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(gap < 1e-6, "step {t}: {gap}");
    }
}

#[test]
fn teacher_forced_block_examples() {
    let model = ModelInstance::MatMul(gen_matmul(2, 2, 3).unwrap());
    let tr = rollout(&model, 7, 1).unwrap();
    let blocks = teacher_forced_blocks(&model, &tr, 3).unwrap();
    assert_eq!(blocks.len(), 3);
    assert_eq!(blocks[2].0.nrows(), 1);
    assert_eq!(blocks[1].0.row(0).slice(s![2..]).to_vec(), tr.targets[2]);
    assert!(blocks[1].0.slice(s![1.., 2..]).iter().all(|&v| v == 0.0));
    assert_eq!(blocks[0].1.row(0).to_vec(), tr.targets[0]);
}

fn tiny_run(seed: u64, epochs: usize) -> (TrainResult, Network) {
    let model = ModelInstance::CyclicDet(gen_cyclic_det(3, 2, 1).unwrap());
    let data = rollout_batch(&model, 8, 40, 5, TargetKind::Belief).unwrap();
    let net = Network::Transformer(TransformerWeights::init(2, 8, 2, 1, 16, 6, true, TfConfig::trained(), seed).unwrap());
    let mut opts = TrainOptions::new(epochs, LossKind::CrossEntropy, seed);
    opts.batch = 16;
    opts.schedule.warmup_steps = 4;
    opts.eval = Some(EvalHook { rollouts: 8, t: 8, seed: 3, mask: MaskKind::All, probes: vec![1, 8], eps: vec![0.05] });
    (train(net.clone(), &model, &data, &opts).unwrap(), net)
}

#[test]
fn training_is_deterministic_and_zero_epochs_is_identity() {
    let (a, _) = tiny_run(1, 2);
    let (b, _) = tiny_run(1, 2);
    assert_eq!(a.step_losses, b.step_losses);
    assert_eq!(a.network, b.network);
    assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
    assert_eq!(a.metrics.len(), 2);
    assert_eq!(a.steps, 6);
    let csv = metrics_csv(&a.metrics);
    assert!(csv.starts_with("epoch,stage_len,train_loss,el_1,el_8,fit_0.05\n"));
    let (z, init) = tiny_run(1, 0);
    assert_eq!(z.network, init);
    assert!(z.step_losses.is_empty());
}

#[test]
fn fifty_steps_halve_the_loss() {
    let hmm = gen_hmm(3, 3, 4).unwrap();
    let model = ModelInstance::Hmm { hmm, family: HmmFamily::Plain };
    let data = rollout_batch(&model, 6, 8, 2, TargetKind::Belief).unwrap();
    let nets = [
        Network::Rnn(RnnWeights::init(3, 16, 3, 1)),
        Network::Transformer(TransformerWeights::init(3, 16, 2, 1, 32, 3, true, TfConfig::trained(), 1).unwrap()),
    ];
    for net in nets {
        let mut opts = TrainOptions::new(50, LossKind::CrossEntropy, 0);
        opts.batch = 8;
        opts.schedule = Schedule { start: 1e-2, base: 1e-2, warmup_steps: 0, decay: 1.0, decay_every: 1 };
        let xs: Vec<_> = data.iter().map(|t| encode_inputs(&model, t, 3).unwrap()).collect();
        let ys: Vec<_> = data.iter().map(|t| targets_matrix(t).unwrap()).collect();
        // cross-entropy includes the target entropy; measure the excess over it
        let entropy: f64 = ys.iter().flat_map(|y| y.iter()).filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum::<f64>()
            / ys.iter().map(|y| y.nrows()).sum::<usize>() as f64;
        let before = backward(&net, &xs, &ys, LossKind::CrossEntropy, Mode::Eval, 0).unwrap().0 - entropy;
        let r = train(net, &model, &data, &opts).unwrap();
        assert_eq!(r.steps, 50);
        let after = backward(&r.network, &xs, &ys, LossKind::CrossEntropy, Mode::Eval, 0).unwrap().0 - entropy;
        assert!(after <= 0.5 * before, "{before} -> {after}");
    }
}

#[test]
fn wrong_loss_for_task_is_rejected() {
    let model = ModelInstance::MatMul(gen_matmul(2, 2, 3).unwrap());
    let data = rollout_batch(&model, 4, 4, 2, TargetKind::Belief).unwrap();
    let net = Network::Rnn(RnnWeights::init(2, 4, 2, 1));
    let opts = TrainOptions::new(1, LossKind::CrossEntropy, 0);
    assert!(matches!(train(net, &model, &data, &opts), Err(Error::Task(_))));
}

#[test]
fn block_training_uses_belief_channel() {
    let model = ModelInstance::MatMul(gen_matmul(2, 2, 3).unwrap());
    let data = rollout_batch(&model, 8, 8, 2, TargetKind::Belief).unwrap();
    let net = Network::Rnn(RnnWeights::init(4, 8, 2, 1));
    let mut opts = TrainOptions::new(1, LossKind::Mse, 0);
    opts.block = Some(4);
    let r = train(net, &model, &data, &opts).unwrap();
    assert_eq!(r.steps, 1);
    let _ = array![0.0];
}
