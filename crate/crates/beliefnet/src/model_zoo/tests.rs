use std::collections::HashMap;

use ndarray::{array, Array1, Array2};
use proptest::prelude::*;

use super::*;
use crate::linalg::column_stochastic_defect;

fn two_state() -> HmmInstance {
    HmmInstance::new(array![[0.9, 0.2], [0.1, 0.8]], array![[0.7, 0.3], [0.3, 0.7]], 0).unwrap()
}

#[test]
fn belief_update_hand_example() {
    // P e1 = (0.9, 0.1); weighted by (0.7, 0.3) -> (0.63, 0.03) / 0.66 = (21/22, 1/22)
    let b = belief_update(&two_state(), &array![1.0, 0.0], 0).unwrap();
    assert!((b[0] - 21.0 / 22.0).abs() < 1e-15);
    assert!((b[1] - 1.0 / 22.0).abs() < 1e-15);
    assert!((b[0] - 0.954545).abs() < 1e-6);
    let bf = brute_force_posterior(&two_state(), &[0]).unwrap();
    assert!((bf[0][0] - 21.0 / 22.0).abs() < 1e-15);
}

#[test]
fn identity_emission_reveals_state() {
    let mut r = crate::rng::stream(1, 0);
    let p = crate::linalg::dirichlet_columns(3, 3, &mut r);
    let h = HmmInstance::new(p, Array2::eye(3), 0).unwrap();
    let b = array![0.2, 0.3, 0.5];
    for o in 0..3 {
        let out = belief_update(&h, &b, o).unwrap();
        for s in 0..3 {
            assert_eq!(out[s], if s == o { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn uniform_model_keeps_uniform_belief() {
    let h = HmmInstance::new(Array2::from_elem((3, 3), 1.0 / 3.0), Array2::from_elem((2, 3), 0.5), 0).unwrap();
    let u = Array1::from_elem(3, 1.0 / 3.0);
    let out = belief_update(&h, &u, 1).unwrap();
    assert!(out.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    let d = next_obs_dist(&h, &u);
    assert!(d.iter().all(|&x| (x - 0.5).abs() < 1e-15));
}

#[test]
fn impossible_observation_is_an_error() {
    let h = HmmInstance::new(Array2::eye(2), Array2::eye(2), 0).unwrap();
    match belief_sequence(&h, &[0, 0, 1]) {
        Err(Error::ImpossibleObservation { index, obs }) => assert_eq!((index, obs), (2, 1)),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn empty_observation_list() {
    assert!(belief_sequence(&two_state(), &[]).unwrap().is_empty());
}

#[test]
fn brute_force_capacity_limit() {
    let h = gen_hmm(4, 2, 0).unwrap();
    let obs = vec![0; 12];
    assert!(matches!(brute_force_posterior(&h, &obs), Err(Error::Capacity(_))));
}

#[test]
fn generators_validate_parameters() {
    assert!(gen_hmm(1, 2, 0).is_err());
    assert!(gen_matmul(1, 2, 0).is_err());
    assert!(gen_cyclic_det(1, 2, 0).is_err());
    assert!(gen_lds(0, 0).is_err());
    assert!(CyclicRndParams::new(0.5).is_err());
    assert!(CyclicHardParams::new(0.0).is_err());
}

#[test]
fn experiment_sized_instances() {
    let h = gen_hmm(5, 5, 11).unwrap();
    assert_eq!((h.n, h.m, h.s0), (5, 5, 0));
    let mm = gen_matmul(5, 5, 11).unwrap();
    assert_eq!(mm.a.len(), 5);
    assert_eq!(mm.b0[0], 1.0);
    let l = gen_lds(5, 11).unwrap();
    assert!(crate::linalg::orthogonality_defect(&l.b) < 1e-10);
    assert_eq!((l.sigma_state, l.sigma_obs), (1.0, 1.0));
    let l2 = gen_lds_with(5, 11, LdsOptions { contract_099: true }).unwrap();
    assert!((l2.a[[0, 0]] - 0.99 * l.a[[0, 0]]).abs() < 1e-15);
}

#[test]
fn cyclic_det_shapes() {
    let c = gen_cyclic_det(4, 2, 3).unwrap();
    assert_eq!(c.perms.len(), 2);
    for p in &c.perms {
        let mut s = 0;
        for step in 1..=4 {
            s = p[s];
            assert_eq!(s == 0, step == 4);
        }
    }
    let c2 = gen_cyclic_det(2, 1, 9).unwrap();
    assert_eq!(c2.perms, vec![vec![1, 0]]);
}

#[test]
fn mdp_to_hmm_degenerate_single_action() {
    let h = mdp_to_hmm(&[perm_matrix(&[1, 0])], 0).unwrap();
    assert_eq!((h.n, h.m), (2, 1));
    assert!(h.o.iter().all(|&x| x == 1.0));
    assert!(mdp_to_hmm(&[array![[0.5, 0.5], [0.6, 0.5]]], 0).is_err());
}

#[test]
fn cyclic_rnd_kernels_two_nonzeros() {
    let base = gen_cyclic_det(5, 3, 2).unwrap();
    for k in cyclic_rnd_kernels(&base, CyclicRndParams::default()) {
        for col in k.columns() {
            assert_eq!(col.iter().filter(|&&x| x > 0.0).count(), 2);
            assert!((col.sum() - 1.0).abs() < 1e-15);
        }
    }
    assert_eq!(CyclicRndParams::default().eps, 0.01);
}

#[test]
fn cyclic_rnd_small_eps_limit() {
    let base = gen_cyclic_det(4, 2, 8).unwrap();
    let det = base.to_hmm();
    let rnd = mdp_to_hmm(&cyclic_rnd_kernels(&base, CyclicRndParams { eps: 1e-13 }), 0).unwrap();
    let gap = (&det.p - &rnd.p).iter().fold(0.0f64, |a, x| a.max(x.abs()));
    assert!(gap < 1e-12);
    assert_eq!(det.o, rnd.o);
}

#[test]
fn cyclic_hard_structure() {
    let base = gen_cyclic_det(3, 2, 4).unwrap();
    let h = build_cyclic_hard(&base, CyclicHardParams::for_horizon(120).unwrap()).unwrap();
    let na = 6;
    assert_eq!((h.n, h.m), (18, 6));
    for a in 0..na {
        assert_eq!(h.o[[5, na + a]], 1.0, "stage-1 states emit the signal");
        assert_eq!(h.o[[a / 2, 2 * na + a]], 1.0, "stage-2 states reveal the base state");
        assert_eq!(h.p[[2 * na + a, na + a]], 1.0);
        assert_eq!(h.p[[a, 2 * na + a]], 1.0);
    }
    assert!(column_stochastic_defect(&h.p) < 1e-12);
    let frozen = build_cyclic_hard(&base, CyclicHardParams { alpha: 0.0 }).unwrap();
    let aug = base.to_hmm();
    for a in 0..na {
        for a2 in 0..na {
            assert_eq!(frozen.p[[a2, a]], aug.p[[a2, a]]);
        }
        assert_eq!(frozen.p[[na + a, a]], 0.0);
    }
}

#[test]
fn mdp_image_next_obs_is_uniform() {
    let base = gen_cyclic_det(4, 3, 5).unwrap();
    let rnd = gen_cyclic_rnd(4, 3, CyclicRndParams::default(), 5).unwrap();
    for h in [base.to_hmm(), rnd] {
        let model = ModelInstance::Hmm { hmm: h.clone(), family: HmmFamily::Plain };
        let tr = rollout_with(&model, 20, 3, TargetKind::Belief).unwrap();
        for b in &tr.targets {
            let d = next_obs_dist(&h, &Array1::from(b.clone()));
            assert!(d.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-12));
        }
    }
}

/// Joint law of `(o_1..o_t, s_t)` of the action process: start at `s0` with
/// action 0 pending, each step moves by the pending action's kernel and then
/// draws the next action uniformly.
fn source_table(kernels: &[Array2<f64>], s0: usize, t: usize) -> HashMap<(Vec<usize>, usize), f64> {
    let (n, m) = (kernels[0].nrows(), kernels.len());
    let mut table = HashMap::new();
    let total = (n * m).pow(t as u32);
    for code in 0..total {
        let mut c = code;
        let mut states = Vec::new();
        let mut acts = Vec::new();
        for _ in 0..t {
            states.push(c % n);
            c /= n;
            acts.push(c % m);
            c /= m;
        }
        let mut w = 1.0;
        let mut prev_s = s0;
        let mut pending = 0;
        for k in 0..t {
            w *= kernels[pending][[states[k], prev_s]] / m as f64;
            prev_s = states[k];
            pending = acts[k];
        }
        *table.entry((acts, states[t - 1])).or_insert(0.0) += w;
    }
    table
}

/// Same table through the lifted HMM, marginalizing augmented paths.
fn hmm_table(h: &HmmInstance, m: usize, t: usize) -> HashMap<(Vec<usize>, usize), f64> {
    let mut table = HashMap::new();
    let total = h.n.pow(t as u32);
    for code in 0..total {
        let mut c = code;
        let mut path = Vec::new();
        for _ in 0..t {
            path.push(c % h.n);
            c /= h.n;
        }
        let mut w = 1.0;
        let mut prev = h.s0;
        let mut obs = Vec::new();
        for &a in &path {
            let o = (0..h.m).find(|&o| h.o[[o, a]] > 0.0).unwrap();
            w *= h.p[[a, prev]] * h.o[[o, a]];
            obs.push(o);
            prev = a;
        }
        *table.entry((obs, path[t - 1] / m)).or_insert(0.0) += w;
    }
    table
}

#[test]
fn lifted_hmm_matches_action_process_by_enumeration() {
    let base = gen_cyclic_det(3, 2, 12).unwrap();
    let kernels = cyclic_rnd_kernels(&base, CyclicRndParams { eps: 0.2 });
    let h = mdp_to_hmm(&kernels, 0).unwrap();
    for t in 1..=4 {
        let a = source_table(&kernels, 0, t);
        let b = hmm_table(&h, 2, t);
        for (k, v) in &a {
            let w = b.get(k).copied().unwrap_or(0.0);
            assert!((v - w).abs() <= 1e-12, "t={t} key={k:?}: {v} vs {w}");
        }
        for (k, w) in &b {
            assert!((a.get(k).copied().unwrap_or(0.0) - w).abs() <= 1e-12);
        }
    }
}

#[test]
fn deterministic_states_follow_permutations() {
    let c = gen_cyclic_det(5, 3, 21).unwrap();
    let model = ModelInstance::CyclicDet(c.clone());
    let tr = rollout(&model, 30, 4).unwrap();
    let obs = tr.obs.as_discrete().unwrap();
    let states = tr.states.as_discrete().unwrap();
    let (mut s, mut pending) = (c.s0, 0);
    for t in 0..30 {
        s = c.perms[pending][s];
        assert_eq!(states[t], s * 3 + obs[t]);
        pending = obs[t];
        let b = &tr.targets[t];
        assert!(b.iter().all(|&x| x == 0.0 || x == 1.0));
        assert_eq!(b[states[t]], 1.0);
    }
}

#[test]
fn empirical_observation_frequencies_match_marginals() {
    let h = gen_hmm(4, 3, 77).unwrap();
    let model = ModelInstance::Hmm { hmm: h.clone(), family: HmmFamily::Plain };
    let (traj, t_len) = (10_000, 10);
    let data = rollout_batch(&model, t_len, traj, 5, TargetKind::Belief).unwrap();
    // exact expected count of each symbol per trajectory by forward recursion
    let mut pi = h.initial_belief();
    let mut expect = Array1::<f64>::zeros(3);
    for _ in 0..t_len {
        pi = h.p.dot(&pi);
        expect += &h.o.dot(&pi);
    }
    for o in 0..3 {
        let counts: Vec<f64> = data
            .iter()
            .map(|tr| tr.obs.as_discrete().unwrap().iter().filter(|&&x| x == o).count() as f64)
            .collect();
        let mean = counts.iter().sum::<f64>() / traj as f64;
        let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (traj - 1) as f64;
        let sigma = (var / traj as f64).sqrt();
        assert!((mean - expect[o]).abs() <= 3.0 * sigma, "o={o}: {mean} vs {}", expect[o]);
    }
}

#[test]
fn kalman_first_prediction_and_scalar_riccati() {
    let l = gen_lds(3, 4).unwrap();
    let ys: Vec<Array1<f64>> = (0..5).map(|i| Array1::from_elem(3, i as f64 * 0.3 - 0.5)).collect();
    let preds = kalman_predictive_means(&l, &ys).unwrap();
    assert_eq!(preds.len(), 5);
    assert_eq!(preds[0], l.b.dot(&l.a.dot(&l.x0)));

    let scalar = LdsInstance {
        n: 1,
        a: array![[1.0]],
        b: array![[1.0]],
        sigma_state: 0.7,
        sigma_obs: 1.3,
        x0: array![0.25],
    };
    let ys: Vec<Array1<f64>> = [0.3, -1.1, 2.4, 0.0, 0.9, -0.2].iter().map(|&y| array![y]).collect();
    let got = kalman_predictive_means(&scalar, &ys).unwrap();
    let (q, r) = (0.49, 1.69);
    let (mut mu, mut p) = (0.25, 0.0);
    for (t, y) in ys.iter().enumerate() {
        let p_pred = p + q;
        assert!((got[t][0] - mu).abs() < 1e-14, "step {t}");
        let k = p_pred / (p_pred + r);
        mu += k * (y[0] - mu);
        p = (1.0 - k) * p_pred;
    }
}

#[test]
fn kalman_noiseless_state_matches_simulation() {
    let mut l = gen_lds(3, 6).unwrap();
    l.sigma_state = 0.0;
    l.sigma_obs = 1e-3;
    let ys: Vec<Array1<f64>> = (0..6).map(|i| Array1::from_elem(3, (i as f64).sin())).collect();
    let preds = kalman_predictive_means(&l, &ys).unwrap();
    let mut x = l.x0.clone();
    for p in preds {
        x = l.a.dot(&x);
        let y = l.b.dot(&x);
        assert!(crate::linalg::max_abs_diff(p.as_slice().unwrap(), y.as_slice().unwrap()) < 1e-12);
    }
    let bad = vec![array![f64::NAN, 0.0, 0.0]];
    assert!(matches!(kalman_predictive_means(&l, &bad), Err(Error::Numeric(_))));
}

#[test]
fn lds_targets_are_next_step_predictions() {
    let l = gen_lds(2, 3).unwrap();
    let model = ModelInstance::Lds(l.clone());
    let tr = rollout(&model, 6, 9).unwrap();
    let Seq::Continuous(ys) = &tr.obs else { panic!() };
    let ys: Vec<Array1<f64>> = ys.iter().map(|y| Array1::from(y.clone())).collect();
    let pre = kalman_predictive_means(&l, &ys).unwrap();
    for t in 0..5 {
        assert_eq!(tr.targets[t], pre[t + 1].to_vec());
    }
}

#[test]
fn unsupported_target_pairs() {
    let mm = ModelInstance::MatMul(gen_matmul(3, 2, 1).unwrap());
    assert!(matches!(rollout_with(&mm, 4, 0, TargetKind::Kalman), Err(Error::Task(_))));
    let l = ModelInstance::Lds(gen_lds(2, 1).unwrap());
    assert!(matches!(rollout_with(&l, 4, 0, TargetKind::Belief), Err(Error::Task(_))));
}

#[test]
fn manifests_roundtrip() {
    let base = gen_cyclic_det(3, 2, 1).unwrap();
    let models = vec![
        ModelInstance::Hmm { hmm: gen_hmm(3, 4, 2).unwrap(), family: HmmFamily::Plain },
        ModelInstance::MatMul(gen_matmul(3, 2, 2).unwrap()),
        ModelInstance::Lds(gen_lds(3, 2).unwrap()),
        ModelInstance::CyclicDet(base.clone()),
        ModelInstance::Hmm {
            hmm: gen_cyclic_rnd(3, 2, CyclicRndParams::default(), 1).unwrap(),
            family: HmmFamily::CyclicRnd { n: 3, m: 2, eps: 0.01 },
        },
        ModelInstance::Hmm {
            hmm: build_cyclic_hard(&base, CyclicHardParams { alpha: 0.125 }).unwrap(),
            family: HmmFamily::CyclicHard { n: 3, m: 2, alpha: 0.125 },
        },
    ];
    for m in models {
        let text = model_to_doc(&m).to_text();
        let back = model_from_doc(&crate::textfmt::TextDoc::parse(&text).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}

fn arb_hmm() -> impl Strategy<Value = (HmmInstance, Vec<usize>)> {
    (2usize..=4, 2usize..=4, any::<u64>(), 1usize..=6).prop_flat_map(|(n, m, seed, t)| {
        let h = gen_hmm(n, m, seed).unwrap();
        (Just(h), proptest::collection::vec(0..m, t))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn filter_agrees_with_enumeration((h, obs) in arb_hmm()) {
        let a = belief_sequence(&h, &obs).unwrap();
        let b = brute_force_posterior(&h, &obs).unwrap();
        for (x, y) in a.iter().zip(&b) {
            let gap = (x - y).iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            prop_assert!(gap <= 1e-10);
        }
    }

    #[test]
    fn generated_matrices_are_stochastic(n in 2usize..6, m in 1usize..4, seed in any::<u64>()) {
        let h = gen_hmm(n, m.max(2), seed).unwrap();
        prop_assert!(column_stochastic_defect(&h.p) <= 1e-12);
        prop_assert!(column_stochastic_defect(&h.o) <= 1e-12);
        let base = gen_cyclic_det(n, m, seed).unwrap();
        let rnd = gen_cyclic_rnd(n, m, CyclicRndParams::default(), seed).unwrap();
        let hard = build_cyclic_hard(&base, CyclicHardParams { alpha: 0.1 }).unwrap();
        for x in [base.to_hmm(), rnd, hard] {
            prop_assert!(column_stochastic_defect(&x.p) <= 1e-12);
            prop_assert!(column_stochastic_defect(&x.o) <= 1e-12);
        }
        let mm = gen_matmul(n, m, seed).unwrap();
        for a in &mm.a {
            prop_assert!(crate::linalg::orthogonality_defect(a) <= 1e-10);
        }
    }

    #[test]
    fn deterministic_beliefs_are_one_hot(n in 2usize..6, m in 1usize..4, seed in any::<u64>(), t in 1usize..30) {
        let model = ModelInstance::CyclicDet(gen_cyclic_det(n, m, seed).unwrap());
        let tr = rollout(&model, t, seed ^ 1).unwrap();
        for b in &tr.targets {
            prop_assert!(b.iter().all(|&x| x == 0.0 || x == 1.0));
            prop_assert_eq!(b.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn generation_is_seed_deterministic(seed in any::<u64>()) {
        prop_assert_eq!(gen_hmm(3, 2, seed).unwrap(), gen_hmm(3, 2, seed).unwrap());
        prop_assert_eq!(gen_lds(3, seed).unwrap(), gen_lds(3, seed).unwrap());
        let model = ModelInstance::MatMul(gen_matmul(3, 2, seed).unwrap());
        prop_assert_eq!(rollout(&model, 5, seed).unwrap(), rollout(&model, 5, seed).unwrap());
        let a = rollout_batch(&model, 4, 8, seed, TargetKind::Belief).unwrap();
        prop_assert_eq!(&a[3], &rollout_with(&model, 4, crate::rng::child_seed(seed, 3), TargetKind::Belief).unwrap());
    }
}
