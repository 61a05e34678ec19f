//! The six generative families, their exact filters, and trajectory rollout.
//!
//! Conventions: transition matrices are column-stochastic with
//! `P[[s_next, s]] = P(s_next | s)`; emission matrices are `m x n` with
//! `O[[o, s]] = O(o | s)`. A trajectory starts from the fixed initial state
//! `s0`; step `t` (1-based) draws `s_t ~ P(. | s_{t-1})` then `o_t ~ O(. | s_t)`.

mod filter;
mod manifest;
mod rollout;

pub use filter::{
    belief_sequence, belief_update, brute_force_posterior, kalman_next_means,
    kalman_predictive_means, next_obs_dist, BRUTE_FORCE_LIMIT,
};
pub use manifest::{model_from_doc, model_to_doc};
pub use rollout::{rollout, rollout_batch, rollout_with, Seq, TargetKind, Trajectory};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{column_stochastic_defect, dirichlet_columns, haar_orthogonal, orthogonality_defect};
use crate::rng::stream;

const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct HmmInstance {
    pub n: usize,
    pub m: usize,
    pub p: Array2<f64>,
    pub o: Array2<f64>,
    pub s0: usize,
}

impl HmmInstance {
    pub fn new(p: Array2<f64>, o: Array2<f64>, s0: usize) -> Result<Self> {
        let n = p.nrows();
        if p.ncols() != n || o.ncols() != n {
            return Err(Error::shape(format!(
                "P is {:?} and O is {:?}; need n x n and m x n",
                p.dim(),
                o.dim()
            )));
        }
        let m = o.nrows();
        if n == 0 || m == 0 {
            return Err(Error::param("empty state or observation space"));
        }
        if s0 >= n {
            return Err(Error::param(format!("s0 = {s0} out of range for n = {n}")));
        }
        let dp = column_stochastic_defect(&p);
        let d_o = column_stochastic_defect(&o);
        if dp > STOCHASTIC_TOL || d_o > STOCHASTIC_TOL {
            return Err(Error::Validation(format!(
                "matrices are not column-stochastic (P defect {dp:e}, O defect {d_o:e})"
            )));
        }
        Ok(HmmInstance { n, m, p, o, s0 })
    }

    pub fn initial_belief(&self) -> Array1<f64> {
        let mut b = Array1::zeros(self.n);
        b[self.s0] = 1.0;
        b
    }

    /// True when every column of P and O is a point mass.
    pub fn is_deterministic(&self) -> bool {
        let onehot = |a: &Array2<f64>| a.iter().all(|&x| x == 0.0 || x == 1.0);
        onehot(&self.p) && onehot(&self.o)
    }

    /// `diag(O(o | .)) P`, the unnormalized belief operator for observation `o`.
    pub fn observation_operator(&self, o: usize) -> Array2<f64> {
        let mut a = self.p.clone();
        for (i, mut row) in a.rows_mut().into_iter().enumerate() {
            row *= self.o[[o, i]];
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatMulInstance {
    pub n: usize,
    pub m: usize,
    pub a: Vec<Array2<f64>>,
    pub b0: Array1<f64>,
}

impl MatMulInstance {
    pub fn new(a: Vec<Array2<f64>>, b0: Array1<f64>) -> Result<Self> {
        let n = b0.len();
        if a.is_empty() {
            return Err(Error::param("MatMul needs at least one matrix"));
        }
        for (o, ao) in a.iter().enumerate() {
            if ao.dim() != (n, n) {
                return Err(Error::shape(format!("A_{o} is {:?}, expected {n}x{n}", ao.dim())));
            }
            let d = orthogonality_defect(ao);
            if d > 1e-10 {
                return Err(Error::Validation(format!("A_{o} not orthogonal (defect {d:e})")));
            }
        }
        let norm = b0.dot(&b0).sqrt();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(Error::Validation(format!("|b0| = {norm}, expected 1")));
        }
        Ok(MatMulInstance { n, m: a.len(), a, b0 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdsInstance {
    pub n: usize,
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub sigma_state: f64,
    pub sigma_obs: f64,
    pub x0: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LdsOptions {
    /// Multiply A and B by 0.99 after sampling. Off by default.
    pub contract_099: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CyclicDetInstance {
    pub n: usize,
    pub m: usize,
    /// `perms[i][s]` is the successor `q(s, i)`.
    pub perms: Vec<Vec<usize>>,
    pub s0: usize,
}

impl CyclicDetInstance {
    pub fn new(perms: Vec<Vec<usize>>, s0: usize) -> Result<Self> {
        let n = perms.first().map(|p| p.len()).unwrap_or(0);
        if n < 2 {
            return Err(Error::param("need at least two states"));
        }
        for (i, p) in perms.iter().enumerate() {
            if !is_single_cycle(p) {
                return Err(Error::Validation(format!("perm {i} is not a single {n}-cycle")));
            }
        }
        if s0 >= n {
            return Err(Error::param("s0 out of range"));
        }
        Ok(CyclicDetInstance { n, m: perms.len(), perms, s0 })
    }

    /// `A_i(s', s) = 1` iff `q(s, i) = s'`.
    pub fn action_matrices(&self) -> Vec<Array2<f64>> {
        self.perms.iter().map(|p| perm_matrix(p)).collect()
    }

    pub fn to_hmm(&self) -> HmmInstance {
        mdp_to_hmm(&self.action_matrices(), self.s0).expect("permutation kernels are stochastic")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CyclicRndParams {
    pub eps: f64,
}

impl CyclicRndParams {
    pub fn new(eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps < 0.5) {
            return Err(Error::param(format!("eps = {eps} outside (0, 0.5)")));
        }
        Ok(CyclicRndParams { eps })
    }
}

impl Default for CyclicRndParams {
    fn default() -> Self {
        CyclicRndParams { eps: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CyclicHardParams {
    pub alpha: f64,
}

impl CyclicHardParams {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::param(format!("alpha = {alpha} outside (0, 1)")));
        }
        Ok(CyclicHardParams { alpha })
    }

    /// Default prediction rate `1/T`.
    pub fn for_horizon(t: usize) -> Result<Self> {
        Self::new(1.0 / t.max(2) as f64)
    }
}

/// Which HMM-shaped family an [`HmmInstance`] came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum HmmFamily {
    Plain,
    CyclicRnd { n: usize, m: usize, eps: f64 },
    CyclicHard { n: usize, m: usize, alpha: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelInstance {
    Hmm { hmm: HmmInstance, family: HmmFamily },
    MatMul(MatMulInstance),
    Lds(LdsInstance),
    CyclicDet(CyclicDetInstance),
}

impl ModelInstance {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ModelInstance::Hmm { family: HmmFamily::Plain, .. } => "hmm",
            ModelInstance::Hmm { family: HmmFamily::CyclicRnd { .. }, .. } => "cyclic-rnd",
            ModelInstance::Hmm { family: HmmFamily::CyclicHard { .. }, .. } => "cyclic-hard",
            ModelInstance::MatMul(_) => "matmul",
            ModelInstance::Lds(_) => "lds",
            ModelInstance::CyclicDet(_) => "cyclic-det",
        }
    }

    /// HMM view of the discrete families.
    pub fn as_hmm(&self) -> Option<HmmInstance> {
        match self {
            ModelInstance::Hmm { hmm, .. } => Some(hmm.clone()),
            ModelInstance::CyclicDet(c) => Some(c.to_hmm()),
            _ => None,
        }
    }

    /// Width of the per-step network input (one-hot size or vector size).
    pub fn obs_dim(&self) -> usize {
        match self {
            ModelInstance::Hmm { hmm, .. } => hmm.m,
            ModelInstance::CyclicDet(c) => c.m,
            ModelInstance::MatMul(mm) => mm.m,
            ModelInstance::Lds(l) => l.n,
        }
    }

    pub fn default_kind(&self) -> TargetKind {
        match self {
            ModelInstance::Hmm { family: HmmFamily::CyclicHard { .. }, .. } => TargetKind::NextObs,
            ModelInstance::Lds(_) => TargetKind::Kalman,
            _ => TargetKind::Belief,
        }
    }

    pub fn target_dim(&self, kind: TargetKind) -> Result<usize> {
        match (self, kind) {
            (ModelInstance::Hmm { hmm, .. }, TargetKind::Belief) => Ok(hmm.n),
            (ModelInstance::Hmm { hmm, .. }, TargetKind::NextObs) => Ok(hmm.m),
            (ModelInstance::CyclicDet(c), TargetKind::Belief) => Ok(c.n * c.m),
            (ModelInstance::CyclicDet(c), TargetKind::NextObs) => Ok(c.m),
            (ModelInstance::MatMul(mm), TargetKind::Belief) => Ok(mm.n),
            (ModelInstance::Lds(l), TargetKind::Kalman) => Ok(l.n),
            _ => Err(Error::Task(format!("{} has no {:?} target", self.kind_name(), kind))),
        }
    }

    /// Target at time 0, used to seed the belief channel of block-CoT inputs.
    pub fn initial_target(&self, kind: TargetKind) -> Result<Vec<f64>> {
        match (self, kind) {
            (ModelInstance::MatMul(mm), TargetKind::Belief) => Ok(mm.b0.to_vec()),
            (ModelInstance::Lds(l), TargetKind::Kalman) => Ok(l.b.dot(&l.a.dot(&l.x0)).to_vec()),
            _ => {
                let hmm = self.as_hmm().ok_or_else(|| Error::Task("not discrete".into()))?;
                let b = hmm.initial_belief();
                Ok(match kind {
                    TargetKind::Belief => b.to_vec(),
                    TargetKind::NextObs => next_obs_dist(&hmm, &b).to_vec(),
                    TargetKind::Kalman => unreachable!("checked above"),
                })
            }
        }
    }

    /// Loss norm used by the evaluation metric: 1 for distributions, 2 otherwise.
    pub fn eval_norm(&self) -> (u8, bool) {
        match self {
            ModelInstance::Lds(_) => (2, true),
            ModelInstance::MatMul(_) => (2, false),
            _ => (1, false),
        }
    }
}

fn check_dims(n: usize, m: usize, min_n: usize, min_m: usize) -> Result<()> {
    if n < min_n || m < min_m {
        return Err(Error::param(format!("need n >= {min_n}, m >= {min_m}; got n = {n}, m = {m}")));
    }
    Ok(())
}

/// Random HMM with flat-Dirichlet columns and `s0 = 0`.
pub fn gen_hmm(n: usize, m: usize, seed: u64) -> Result<HmmInstance> {
    check_dims(n, m, 2, 2)?;
    let mut rng = stream(seed, 0);
    let p = dirichlet_columns(n, n, &mut rng);
    let o = dirichlet_columns(m, n, &mut rng);
    HmmInstance::new(p, o, 0)
}

/// Random HMM whose transition and emission entries are all at least `floor`:
/// each column is `floor + (1 - k floor) * Dirichlet`.
pub fn gen_hmm_floored(n: usize, m: usize, floor: f64, seed: u64) -> Result<HmmInstance> {
    check_dims(n, m, 2, 2)?;
    if !(floor >= 0.0 && floor * n.max(m) as f64 <= 1.0) {
        return Err(Error::param(format!("floor {floor} infeasible for n = {n}, m = {m}")));
    }
    let mut rng = stream(seed, 0);
    let lift = |a: Array2<f64>| {
        let k = a.nrows() as f64;
        a.mapv(|x| floor + (1.0 - k * floor) * x)
    };
    let p = lift(dirichlet_columns(n, n, &mut rng));
    let o = lift(dirichlet_columns(m, n, &mut rng));
    HmmInstance::new(p, o, 0)
}

/// `m` Haar-orthogonal matrices and `b0 = e_1`.
pub fn gen_matmul(n: usize, m: usize, seed: u64) -> Result<MatMulInstance> {
    check_dims(n, m, 2, 1)?;
    let mut rng = stream(seed, 0);
    let a = (0..m).map(|_| haar_orthogonal(n, &mut rng)).collect();
    let mut b0 = Array1::zeros(n);
    b0[0] = 1.0;
    MatMulInstance::new(a, b0)
}

pub fn gen_lds(n: usize, seed: u64) -> Result<LdsInstance> {
    gen_lds_with(n, seed, LdsOptions::default())
}

pub fn gen_lds_with(n: usize, seed: u64, opts: LdsOptions) -> Result<LdsInstance> {
    check_dims(n, n, 1, 1)?;
    let mut rng = stream(seed, 0);
    let mut a = haar_orthogonal(n, &mut rng);
    let mut b = haar_orthogonal(n, &mut rng);
    if opts.contract_099 {
        a *= 0.99;
        b *= 0.99;
    }
    let mut x0 = Array1::zeros(n);
    x0[0] = 1.0;
    Ok(LdsInstance { n, a, b, sigma_state: 1.0, sigma_obs: 1.0, x0 })
}

/// Uniform single `n`-cycle by Sattolo's shuffle.
pub fn sattolo(n: usize, rng: &mut crate::rng::Rng) -> Vec<usize> {
    let mut a: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = crate::linalg::uniform_index(i, rng);
        a.swap(i, j);
    }
    a
}

pub fn is_single_cycle(perm: &[usize]) -> bool {
    let n = perm.len();
    let mut seen = vec![false; n];
    for &x in perm {
        if x >= n || seen[x] {
            return false;
        }
        seen[x] = true;
    }
    let mut s = 0;
    for step in 1..=n {
        s = perm[s];
        if s == 0 {
            return step == n;
        }
    }
    false
}

pub fn perm_matrix(perm: &[usize]) -> Array2<f64> {
    let n = perm.len();
    let mut a = Array2::zeros((n, n));
    for (s, &t) in perm.iter().enumerate() {
        a[[t, s]] = 1.0;
    }
    a
}

pub fn gen_cyclic_det(n: usize, m: usize, seed: u64) -> Result<CyclicDetInstance> {
    check_dims(n, m, 2, 1)?;
    let mut rng = stream(seed, 0);
    let perms = (0..m).map(|_| sattolo(n, &mut rng)).collect();
    CyclicDetInstance::new(perms, 0)
}

/// Lift an `m`-action process on `n` states to an HMM on pairs `(s, o)`,
/// indexed `s * m + o`, where `o` is the action about to be taken and is
/// also the emitted symbol.
pub fn mdp_to_hmm(kernels: &[Array2<f64>], s0: usize) -> Result<HmmInstance> {
    let m = kernels.len();
    if m == 0 {
        return Err(Error::param("no kernels"));
    }
    let n = kernels[0].nrows();
    for (o, k) in kernels.iter().enumerate() {
        if k.dim() != (n, n) {
            return Err(Error::shape(format!("kernel {o} is {:?}", k.dim())));
        }
        let d = column_stochastic_defect(k);
        if d > STOCHASTIC_TOL {
            return Err(Error::Validation(format!("kernel {o} not column-stochastic ({d:e})")));
        }
    }
    let nm = n * m;
    let mut p = Array2::zeros((nm, nm));
    let mut e = Array2::zeros((m, nm));
    let inv_m = 1.0 / m as f64;
    for s in 0..n {
        for o in 0..m {
            let col = s * m + o;
            e[[o, col]] = 1.0;
            for s2 in 0..n {
                let w = kernels[o][[s2, s]] * inv_m;
                for o2 in 0..m {
                    p[[s2 * m + o2, col]] = w;
                }
            }
        }
    }
    HmmInstance::new(p, e, s0 * m)
}

/// Per-action kernels moving to the successor w.p. `1 - eps` and to the
/// predecessor w.p. `eps`.
pub fn cyclic_rnd_kernels(base: &CyclicDetInstance, params: CyclicRndParams) -> Vec<Array2<f64>> {
    base.perms
        .iter()
        .map(|perm| {
            let n = perm.len();
            let mut pred = vec![0; n];
            for (s, &t) in perm.iter().enumerate() {
                pred[t] = s;
            }
            let mut k = Array2::zeros((n, n));
            for s in 0..n {
                k[[perm[s], s]] += 1.0 - params.eps;
                k[[pred[s], s]] += params.eps;
            }
            k
        })
        .collect()
}

pub fn gen_cyclic_rnd(n: usize, m: usize, params: CyclicRndParams, seed: u64) -> Result<HmmInstance> {
    let params = CyclicRndParams::new(params.eps)?;
    let base = gen_cyclic_det(n, m, seed)?;
    mdp_to_hmm(&cyclic_rnd_kernels(&base, params), base.s0)
}

/// Three-stage HMM over copies of the base's augmented states.
///
/// State index is `stage * (n m) + a` for augmented state `a = s * m + o`.
/// Observation alphabet: `[0, n)` reveal states, `[n, n + m)` base
/// observations, `n + m` is the signal `*`. `alpha = 0` is accepted and
/// reduces to the base process.
pub fn build_cyclic_hard(base: &CyclicDetInstance, params: CyclicHardParams) -> Result<HmmInstance> {
    let alpha = params.alpha;
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::param(format!("alpha = {alpha} outside [0, 1)")));
    }
    let aug = base.to_hmm();
    let (n, m) = (base.n, base.m);
    let na = aug.n;
    let ns = 3 * na;
    let no = n + m + 1;
    let star = n + m;
    let mut p = Array2::zeros((ns, ns));
    let mut e = Array2::zeros((no, ns));
    for a in 0..na {
        let (s, o) = (a / m, a % m);
        for a2 in 0..na {
            p[[a2, a]] = (1.0 - alpha) * aug.p[[a2, a]];
        }
        p[[na + a, a]] += alpha;
        e[[n + o, a]] = 1.0;

        p[[2 * na + a, na + a]] = 1.0;
        e[[star, na + a]] = 1.0;

        p[[a, 2 * na + a]] = 1.0;
        e[[s, 2 * na + a]] = 1.0;
    }
    HmmInstance::new(p, e, aug.s0)
}

#[cfg(test)]
mod tests;
