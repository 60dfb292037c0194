//! Per-agent latent-variable environment model.
//!
//! Four learned pieces: a transition ensemble `P_θ(o'|o,a,z)`, a reward
//! ensemble `R_φ(o,a,z)`, the latent functions `ψ_{ω_1..ω_l}(z|o)` (one per
//! stored policy rollout, oldest first) and the predictor `f_ζ` that maps the
//! latents of `l-1` consecutive rollouts to the next one.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envs::{Action, ActionSpace, ObsSpace};
use crate::error::{Error, Result};
use crate::nn::dist::{gaussian_logprob, gaussian_logprob_grads, log_softmax, sample_index, softmax};
use crate::nn::mlp::EnsembleGradients;
use crate::nn::{Activation, Adam, BatchTrace, Ensemble, EnsembleRecord, Gradients, Head, Matrix, Mlp, MlpRecord};
use crate::ppo::{AgentPolicy, Step, Trajectory};
use crate::rng::Stream;
use crate::rollout::{to_step, RolloutBuffer, Transition};
use crate::scalar::{to_f64s, to_scalars, Scalar};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentKind {
    /// `z = ψ(o)` directly, with an L2 penalty on `z`.
    Deterministic,
    /// `ψ(·|o)` is a categorical distribution over `z_dim` values.
    Categorical,
    /// `ψ(·|o)` is a diagonal Gaussian, sampled by reparameterization.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHyper {
    pub l: usize,
    pub h: usize,
    pub k: usize,
    pub c_obs: f64,
    pub model_batch: usize,
    pub pred_batch: usize,
    pub psi_lr: f64,
    pub pred_lr: f64,
    pub trans_lr: f64,
    pub rew_lr: f64,
    pub z_dim: usize,
    pub latent: LatentKind,
    pub psi_hidden: Vec<usize>,
    pub pred_hidden: Vec<usize>,
    pub trans_hidden: Vec<usize>,
    pub rew_hidden: Vec<usize>,
    pub ensemble: usize,
    pub model_steps: usize,
    pub predictor_steps: usize,
    pub latent_l2: f64,
}

impl ModelHyper {
    pub fn stochastic_game() -> Self {
        Self {
            l: 8,
            h: 8,
            k: 4,
            c_obs: 10.0,
            model_batch: 64,
            pred_batch: 32,
            psi_lr: 1e-5,
            pred_lr: 1e-4,
            trans_lr: 1e-4,
            rew_lr: 1e-4,
            z_dim: 3,
            latent: LatentKind::Deterministic,
            psi_hidden: vec![64, 64],
            pred_hidden: vec![128],
            trans_hidden: vec![128, 64],
            rew_hidden: vec![128, 64],
            ensemble: 3,
            model_steps: 200,
            predictor_steps: 100,
            latent_l2: crate::nn::dist::DEFAULT_LATENT_L2,
        }
    }

    /// Particle tasks; `c_obs` is 1 for navigation and 100 for the polygon.
    pub fn particle(c_obs: f64) -> Self {
        Self {
            c_obs,
            pred_lr: 3e-5,
            trans_lr: 3e-5,
            rew_lr: 3e-5,
            z_dim: 4,
            pred_hidden: vec![64, 64],
            trans_hidden: vec![64],
            rew_hidden: vec![64, 64],
            ..Self::stochastic_game()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l < 2 {
            return Err(Error::domain(format!("l = {} must be at least 2", self.l)));
        }
        if self.h == 0 {
            return Err(Error::domain("h must be at least 1"));
        }
        if !(self.c_obs > 0.0 && self.c_obs.is_finite()) {
            return Err(Error::domain("c_obs must be positive"));
        }
        for (name, v) in
            [("psi_lr", self.psi_lr), ("pred_lr", self.pred_lr), ("trans_lr", self.trans_lr), ("rew_lr", self.rew_lr)]
        {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::domain(format!("{name} = {v} must be positive")));
            }
        }
        if self.model_batch == 0 || self.pred_batch == 0 || self.z_dim == 0 || self.ensemble == 0 {
            return Err(Error::domain("batch sizes, z_dim and ensemble size must be positive"));
        }
        for (name, h) in [
            ("psi_hidden", &self.psi_hidden),
            ("pred_hidden", &self.pred_hidden),
            ("trans_hidden", &self.trans_hidden),
            ("rew_hidden", &self.rew_hidden),
        ] {
            if h.is_empty() || h.contains(&0) {
                return Err(Error::domain(format!("{name} must be non-empty and positive")));
            }
        }
        if !(self.latent_l2 >= 0.0) {
            return Err(Error::domain("latent_l2 must be non-negative"));
        }
        Ok(())
    }
}

/// `D_env`: the last `l` rollout buffers, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBuffer {
    capacity: usize,
    slots: VecDeque<RolloutBuffer>,
}

impl ModelBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, slots: VecDeque::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slot(&self, j: usize) -> &RolloutBuffer {
        &self.slots[j]
    }

    pub fn slots(&self) -> impl Iterator<Item = &RolloutBuffer> {
        self.slots.iter()
    }

    pub fn newest(&self) -> Option<&RolloutBuffer> {
        self.slots.back()
    }

    pub fn push(&mut self, buf: RolloutBuffer) -> Result<()> {
        if self.slots.len() >= self.capacity {
            return Err(Error::contract("model buffer is full; shift before pushing"));
        }
        self.slots.push_back(buf);
        Ok(())
    }

    /// Drops the oldest slot once all `l` are filled.
    fn shift(&mut self) {
        if self.slots.len() == self.capacity {
            self.slots.pop_front();
        }
    }
}

/// One latent function with its own optimizer and the round it belongs to.
#[derive(Debug, Clone)]
pub struct LatentFn<T> {
    pub net: Mlp<T>,
    pub tag: u64,
    opt: Adam<T>,
}

/// What `ψ(·|o)` or `f_ζ` yields at one observation.
#[derive(Debug, Clone, PartialEq)]
pub enum LatentDist {
    Point(Vec<f64>),
    Categorical(Vec<f64>),
    Gaussian { mean: Vec<f64>, log_std: Vec<f64> },
}

/// Exact one-step predictive distribution, averaged over ensemble heads.
#[derive(Debug, Clone, PartialEq)]
pub enum NextDist {
    Categorical(Vec<f64>),
    /// Equal-weight mixture of Gaussians over the observation delta.
    GaussianMixture(Vec<(Vec<f64>, Vec<f64>)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictive {
    pub next: NextDist,
    pub reward: f64,
}

/// One transition drawn for a model step, tagged with its slot.
#[derive(Debug, Clone)]
pub struct ModelSample<'a> {
    pub slot: usize,
    pub t: &'a Transition,
    /// Standard-normal draws for Gaussian latents (empty otherwise).
    pub noise: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ModelObjective<T> {
    pub l_rew: f64,
    pub l_trans: f64,
    pub l2: f64,
    pub total: f64,
    pub trans: EnsembleGradients<T>,
    pub reward: EnsembleGradients<T>,
    /// Gradient of the newest latent function, present when the batch touches
    /// the newest slot.
    pub psi: Option<Gradients<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelReport {
    pub first_loss: f64,
    pub last_loss: f64,
    pub l_rew: f64,
    pub l_trans: f64,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct EnvModel<T> {
    agent: usize,
    obs_space: ObsSpace,
    action_space: ActionSpace,
    hp: ModelHyper,
    pub trans: Ensemble<T>,
    pub reward: Ensemble<T>,
    pub psis: VecDeque<LatentFn<T>>,
    pub predictor: Mlp<T>,
    psi_template: Mlp<T>,
    trans_opt: Adam<T>,
    reward_opt: Adam<T>,
    pred_opt: Adam<T>,
    trained: bool,
    pairing: Vec<(u64, u64)>,
}

fn action_width(a: ActionSpace) -> usize {
    a.dim()
}

fn encode_action(space: ActionSpace, a: &Action) -> Result<Vec<f64>> {
    match (space, a) {
        (ActionSpace::Discrete(n), Action::Discrete(i)) if *i < n => {
            let mut v = vec![0.0; n];
            v[*i] = 1.0;
            Ok(v)
        }
        (ActionSpace::Continuous(d), Action::Continuous(x)) if x.len() == d => {
            Ok(x.iter().map(|v| v.clamp(-1.0, 1.0)).collect())
        }
        _ => Err(Error::domain("action does not match the model's action space")),
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn clamp_log_std(v: f64) -> (f64, bool) {
    if v < LOG_STD_MIN {
        (LOG_STD_MIN, false)
    } else if v > LOG_STD_MAX {
        (LOG_STD_MAX, false)
    } else {
        (v, true)
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Transition log-likelihood of one head output row and its gradient.
fn trans_loglik(obs_space: ObsSpace, out: &[f64], t: &Transition) -> Result<(f64, Vec<f64>)> {
    match obs_space {
        ObsSpace::Discrete(n) => {
            let target = match t.next_index {
                Some(i) if i < n => i,
                _ => argmax(&t.next_obs),
            };
            let ls = log_softmax(out)?;
            let mut g: Vec<f64> = ls.iter().map(|l| -l.exp()).collect();
            g[target] += 1.0;
            Ok((ls[target], g))
        }
        ObsSpace::Continuous(d) => {
            let mean = &out[..d];
            let mut log_std = Vec::with_capacity(d);
            let mut live = Vec::with_capacity(d);
            for &v in &out[d..2 * d] {
                let (c, ok) = clamp_log_std(v);
                log_std.push(c);
                live.push(ok);
            }
            let delta: Vec<f64> = t.next_obs.iter().zip(&t.obs).map(|(a, b)| a - b).collect();
            let lp = gaussian_logprob(mean, &log_std, &delta)?;
            let (dm, ds) = gaussian_logprob_grads(mean, &log_std, &delta)?;
            let mut g = dm;
            g.extend(ds.iter().zip(&live).map(|(v, ok)| if *ok { *v } else { 0.0 }));
            Ok((lp, g))
        }
    }
}

impl<T: Scalar> EnvModel<T> {
    pub fn new(
        agent: usize,
        obs_space: ObsSpace,
        action_space: ActionSpace,
        hp: &ModelHyper,
        rng: &mut Stream,
    ) -> Result<Self> {
        hp.validate()?;
        let d = hp.z_dim;
        let obs_dim = obs_space.dim();
        let input = obs_dim + action_width(action_space) + d;
        let trans_out = match obs_space {
            ObsSpace::Discrete(n) => n,
            ObsSpace::Continuous(n) => 2 * n,
        };
        let trans_head = match obs_space {
            ObsSpace::Discrete(_) => Head::Softmax,
            ObsSpace::Continuous(_) => Head::DiagGaussian,
        };
        let trans = Ensemble::new(input, &hp.trans_hidden, trans_out, hp.ensemble, Activation::Relu, trans_head, rng)?;
        let reward = Ensemble::new(input, &hp.rew_hidden, 1, hp.ensemble, Activation::Relu, Head::Linear, rng)?;
        let (psi_out, psi_head, pred_out, pred_head) = match hp.latent {
            LatentKind::Deterministic => (d, Head::DeterministicL2, d, Head::DeterministicL2),
            LatentKind::Categorical => (d, Head::Softmax, d, Head::Softmax),
            LatentKind::Gaussian => (2 * d, Head::DiagGaussian, 2 * d, Head::DiagGaussian),
        };
        let psi_template = Mlp::with_hidden(obs_dim, &hp.psi_hidden, psi_out, Activation::Relu, psi_head, rng)?;
        let predictor = Mlp::with_hidden((hp.l - 1) * d, &hp.pred_hidden, pred_out, Activation::Relu, pred_head, rng)?;
        Ok(Self {
            agent,
            obs_space,
            action_space,
            trans_opt: Adam::for_tensors(hp.trans_lr, &trans.tensors()),
            reward_opt: Adam::for_tensors(hp.rew_lr, &reward.tensors()),
            pred_opt: Adam::for_tensors(hp.pred_lr, &predictor.tensors()),
            hp: hp.clone(),
            trans,
            reward,
            psis: VecDeque::new(),
            predictor,
            psi_template,
            trained: false,
            pairing: Vec::new(),
        })
    }

    pub fn hyper(&self) -> &ModelHyper {
        &self.hp
    }

    pub fn agent(&self) -> usize {
        self.agent
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// `(slot round, ψ tag)` pairs consumed by the last model update.
    pub fn pairing_audit(&self) -> &[(u64, u64)] {
        &self.pairing
    }

    pub fn psi_tags(&self) -> Vec<u64> {
        self.psis.iter().map(|p| p.tag).collect()
    }

    /// Appends `ψ_l` for round `tag`, initialized from the newest existing
    /// latent function, with a fresh optimizer.
    pub fn push_latent(&mut self, tag: u64) {
        let net = self.psis.back().map(|p| p.net.clone()).unwrap_or_else(|| self.psi_template.clone());
        let opt = Adam::for_tensors(self.hp.psi_lr, &net.tensors());
        self.psis.push_back(LatentFn { net, tag, opt });
    }

    fn features(&self, obs: &[f64], action: &[f64], z: &[f64]) -> Vec<T> {
        let mut x = Vec::with_capacity(obs.len() + action.len() + z.len());
        x.extend(obs.iter().map(|&v| T::of(v)));
        x.extend(action.iter().map(|&v| T::of(v)));
        x.extend(z.iter().map(|&v| T::of(v)));
        x
    }

    fn psi_dist_from_output(&self, out: &[f64]) -> Result<LatentDist> {
        let d = self.hp.z_dim;
        Ok(match self.hp.latent {
            LatentKind::Deterministic => LatentDist::Point(out.to_vec()),
            LatentKind::Categorical => LatentDist::Categorical(softmax(out)?),
            LatentKind::Gaussian => LatentDist::Gaussian {
                mean: out[..d].to_vec(),
                log_std: out[d..].iter().map(|&v| clamp_log_std(v).0).collect(),
            },
        })
    }

    pub fn psi_dist(&self, j: usize, obs: &[f64]) -> Result<LatentDist> {
        let psi = self.psis.get(j).ok_or_else(|| Error::contract(format!("no latent function in slot {j}")))?;
        let out = to_f64s(&psi.net.forward(&to_scalars::<T>(obs))?);
        self.psi_dist_from_output(&out)
    }

    /// Summary vector a latent contributes to the predictor input.
    fn summary(dist: &LatentDist) -> &[f64] {
        match dist {
            LatentDist::Point(z) => z,
            LatentDist::Categorical(p) => p,
            LatentDist::Gaussian { mean, .. } => mean,
        }
    }

    /// `l-1` latent-function indices ending before `end`, padded at the front
    /// with the oldest one.
    pub fn window(&self, end: usize) -> Vec<usize> {
        let w = self.hp.l - 1;
        let start = end.saturating_sub(w);
        let mut idx: Vec<usize> = (start..end).collect();
        while idx.len() < w {
            idx.insert(0, 0);
        }
        idx
    }

    /// Indices feeding the predictor at rollout time: the latest `l-1`.
    pub fn prediction_inputs(&self) -> Vec<usize> {
        self.window(self.psis.len())
    }

    fn predictor_input(&self, idx: &[usize], obs: &[f64]) -> Result<(Vec<f64>, LatentDist)> {
        let mut input = Vec::with_capacity(idx.len() * self.hp.z_dim);
        let mut last = None;
        for &j in idx {
            let dist = self.psi_dist(j, obs)?;
            input.extend_from_slice(Self::summary(&dist));
            last = Some(dist);
        }
        Ok((input, last.ok_or_else(|| Error::contract("predictor window is empty"))?))
    }

    fn predictor_dist(&self, input: &[f64], last: &LatentDist) -> Result<LatentDist> {
        let out = to_f64s(&self.predictor.forward(&to_scalars::<T>(input))?);
        let d = self.hp.z_dim;
        Ok(match (self.hp.latent, last) {
            (LatentKind::Deterministic, LatentDist::Point(z)) => {
                LatentDist::Point(z.iter().zip(&out).map(|(a, b)| a + b).collect())
            }
            (LatentKind::Categorical, _) => LatentDist::Categorical(softmax(&out)?),
            (LatentKind::Gaussian, LatentDist::Gaussian { mean, .. }) => LatentDist::Gaussian {
                mean: mean.iter().zip(&out[..d]).map(|(a, b)| a + b).collect(),
                log_std: out[d..].iter().map(|&v| clamp_log_std(v).0).collect(),
            },
            _ => return Err(Error::contract("latent kind mismatch")),
        })
    }

    /// Latent distribution used for model rollouts: `f_ζ` over the latest
    /// `l-1` latents, or the newest latent function alone.
    pub fn rollout_latent(&self, obs: &[f64], use_prediction: bool) -> Result<LatentDist> {
        if self.psis.is_empty() {
            return Err(Error::contract("model has no latent functions"));
        }
        if use_prediction {
            let (input, last) = self.predictor_input(&self.prediction_inputs(), obs)?;
            self.predictor_dist(&input, &last)
        } else {
            self.psi_dist(self.psis.len() - 1, obs)
        }
    }

    fn sample_latent(&self, dist: &LatentDist, rng: &mut Stream) -> Vec<f64> {
        match dist {
            LatentDist::Point(z) => z.clone(),
            LatentDist::Categorical(p) => {
                let mut z = vec![0.0; p.len()];
                z[sample_index(p, rng)] = 1.0;
                z
            }
            LatentDist::Gaussian { mean, log_std } => mean
                .iter()
                .zip(log_std)
                .map(|(m, s)| {
                    let e: f64 = rng.sample(StandardNormal);
                    m + s.exp() * e
                })
                .collect(),
        }
    }

    /// One simulated step: `o' ~ P_θ(o,a,z)`, `r = R_φ(o,a,z)` with a
    /// uniformly chosen ensemble head.
    pub fn predict_step(
        &self,
        obs: &[f64],
        action: &Action,
        use_prediction: bool,
        rng: &mut Stream,
    ) -> Result<(Vec<f64>, Option<usize>, f64)> {
        if !self.trained {
            return Err(Error::contract("predict_step called on an untrained model"));
        }
        let dist = self.rollout_latent(obs, use_prediction)?;
        let z = self.sample_latent(&dist, rng);
        let a = encode_action(self.action_space, action)?;
        let x = self.features(obs, &a, &z);
        let head = rng.random_range(0..self.trans.n_heads());
        let p_out = to_f64s(&self.trans.forward(&x, head)?);
        let r = self.reward.forward(&x, head % self.reward.n_heads())?[0].as_f64();
        match self.obs_space {
            ObsSpace::Discrete(n) => {
                let p = softmax(&p_out)?;
                let i = sample_index(&p, rng);
                let mut o = vec![0.0; n];
                o[i] = 1.0;
                Ok((o, Some(i), r))
            }
            ObsSpace::Continuous(d) => {
                let next = obs
                    .iter()
                    .zip(&p_out[..d])
                    .zip(&p_out[d..])
                    .map(|((o, m), s)| {
                        let e: f64 = rng.sample(StandardNormal);
                        o + m + clamp_log_std(*s).0.exp() * e
                    })
                    .collect();
                Ok((next, None, r))
            }
        }
    }

    /// Exact predictive distribution at `(o, a)`: heads averaged in
    /// probability space, categorical latents marginalized.
    pub fn predictive(&self, obs: &[f64], action: &Action, use_prediction: bool) -> Result<Predictive> {
        let dist = self.rollout_latent(obs, use_prediction)?;
        let a = encode_action(self.action_space, action)?;
        let zs: Vec<(f64, Vec<f64>)> = match &dist {
            LatentDist::Point(z) => vec![(1.0, z.clone())],
            LatentDist::Gaussian { mean, .. } => vec![(1.0, mean.clone())],
            LatentDist::Categorical(p) => p
                .iter()
                .enumerate()
                .map(|(i, &w)| {
                    let mut z = vec![0.0; p.len()];
                    z[i] = 1.0;
                    (w, z)
                })
                .collect(),
        };
        let k = self.trans.n_heads() as f64;
        let mut reward = 0.0;
        let mut cat = vec![0.0; self.obs_space.dim()];
        let mut mix = Vec::new();
        for (w, z) in &zs {
            let x = self.features(obs, &a, z);
            let tt = self.trans.forward_trunk(&x)?;
            let rt = self.reward.forward_trunk(&x)?;
            for h in 0..self.trans.n_heads() {
                let out = to_f64s(&self.trans.head_output(&tt, h));
                reward += w / k * self.reward.head_output(&rt, h % self.reward.n_heads())[0].as_f64();
                match self.obs_space {
                    ObsSpace::Discrete(_) => {
                        for (c, p) in cat.iter_mut().zip(softmax(&out)?) {
                            *c += w / k * p;
                        }
                    }
                    ObsSpace::Continuous(d) => {
                        mix.push((out[..d].to_vec(), out[d..].iter().map(|&v| clamp_log_std(v).0).collect()));
                    }
                }
            }
        }
        let next = match self.obs_space {
            ObsSpace::Discrete(_) => NextDist::Categorical(cat),
            ObsSpace::Continuous(_) => NextDist::GaussianMixture(mix),
        };
        Ok(Predictive { next, reward })
    }

    /// Combined model objective `L_rew + c_o'·L_trans (+ L2 on z)` over a
    /// minibatch, each sample evaluated with the latent function of its slot.
    /// Gradients flow into the newest latent function only.
    pub fn model_objective(&self, samples: &[ModelSample<'_>]) -> Result<ModelObjective<T>> {
        let n = samples.len();
        if n == 0 {
            return Err(Error::contract("empty model minibatch"));
        }
        let newest = self.psis.len().checked_sub(1).ok_or_else(|| Error::contract("model has no latent functions"))?;
        let d = self.hp.z_dim;
        let kind = self.hp.latent;
        let obs_dim = self.obs_space.dim();
        let a_dim = action_width(self.action_space);
        let z_off = obs_dim + a_dim;

        // Latent outputs per sample; the newest slot keeps a trace.
        let mut psi_out: Vec<Vec<f64>> = vec![Vec::new(); n];
        let mut train_rows: Vec<usize> = Vec::new();
        let mut train_trace: Option<BatchTrace<T>> = None;
        for j in 0..self.psis.len() {
            let rows: Vec<usize> = (0..n).filter(|&b| samples[b].slot == j).collect();
            if rows.is_empty() {
                continue;
            }
            let x = Matrix::from_rows(&rows.iter().map(|&b| to_scalars::<T>(&samples[b].t.obs)).collect::<Vec<_>>())?;
            let trace = self.psis[j].net.forward_batch(&x)?;
            for (r, &b) in rows.iter().enumerate() {
                psi_out[b] = to_f64s(trace.output().row(r));
            }
            if j == newest {
                train_rows = rows;
                train_trace = Some(trace);
            }
        }
        if let Some(b) = samples.iter().position(|s| s.slot > newest) {
            return Err(Error::contract(format!("sample {b} refers to a slot without a latent function")));
        }

        // Model inputs: one row per sample, or one per (sample, category).
        let per = if kind == LatentKind::Categorical { d } else { 1 };
        let mut rows: Vec<Vec<T>> = Vec::with_capacity(n * per);
        let mut zs: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
        for (b, s) in samples.iter().enumerate() {
            let a = encode_action(self.action_space, &s.t.action)?;
            match kind {
                LatentKind::Deterministic => {
                    zs.push(psi_out[b].clone());
                    rows.push(self.features(&s.t.obs, &a, &psi_out[b]));
                }
                LatentKind::Gaussian => {
                    if s.noise.len() != d {
                        return Err(Error::shape("gaussian latents need one noise draw per dimension"));
                    }
                    let z: Vec<f64> =
                        (0..d).map(|i| psi_out[b][i] + clamp_log_std(psi_out[b][d + i]).0.exp() * s.noise[i]).collect();
                    rows.push(self.features(&s.t.obs, &a, &z));
                    zs.push(z);
                }
                LatentKind::Categorical => {
                    q.push(softmax(&psi_out[b])?);
                    for c in 0..d {
                        let mut z = vec![0.0; d];
                        z[c] = 1.0;
                        rows.push(self.features(&s.t.obs, &a, &z));
                    }
                }
            }
        }
        let x = Matrix::from_rows(&rows)?;
        let tt = self.trans.forward_trunk_batch(&x)?;
        let rt = self.reward.forward_trunk_batch(&x)?;
        let kh = self.trans.n_heads();
        let scale = 1.0 / (n as f64 * kh as f64);
        let c = self.hp.c_obs;
        let (mut l_rew, mut l_trans) = (0.0, 0.0);
        let mut t_up: Vec<Option<Matrix<T>>> = Vec::with_capacity(kh);
        let mut r_up: Vec<Option<Matrix<T>>> = Vec::with_capacity(kh);
        // Gradient w.r.t. categorical ψ logits, per sample.
        let mut dq_logits = vec![vec![0.0; d]; if kind == LatentKind::Categorical { n } else { 0 }];
        for h in 0..kh {
            let t_out = self.trans.head_output_batch(&tt, h);
            let r_out = self.reward.head_output_batch(&rt, h);
            let mut tg = Matrix::zeros(t_out.rows(), t_out.cols());
            let mut rg = Matrix::zeros(r_out.rows(), 1);
            for (b, s) in samples.iter().enumerate() {
                if kind == LatentKind::Categorical {
                    let mut lps = Vec::with_capacity(d);
                    let mut grads = Vec::with_capacity(d);
                    let mut errs = Vec::with_capacity(d);
                    for cz in 0..d {
                        let row = b * d + cz;
                        let (lp, g) = trans_loglik(self.obs_space, &to_f64s(t_out.row(row)), s.t)?;
                        lps.push(q[b][cz].ln() + lp);
                        grads.push(g);
                        errs.push(r_out.get(row, 0).as_f64() - s.t.reward);
                    }
                    let log_s = log_sum_exp(&lps);
                    let e_sq: f64 = (0..d).map(|cz| q[b][cz] * errs[cz] * errs[cz]).sum();
                    l_trans -= log_s * scale;
                    l_rew += e_sq * scale;
                    for cz in 0..d {
                        let w = (lps[cz] - log_s).exp();
                        let row = b * d + cz;
                        for (o, g) in tg.row_mut(row).iter_mut().zip(&grads[cz]) {
                            *o = T::of(-c * w * g * scale);
                        }
                        rg.set(row, 0, T::of(q[b][cz] * 2.0 * errs[cz] * scale));
                        dq_logits[b][cz] +=
                            c * (q[b][cz] - w) * scale + q[b][cz] * (errs[cz] * errs[cz] - e_sq) * scale;
                    }
                } else {
                    let (lp, g) = trans_loglik(self.obs_space, &to_f64s(t_out.row(b)), s.t)?;
                    let err = r_out.get(b, 0).as_f64() - s.t.reward;
                    l_trans -= lp * scale;
                    l_rew += err * err * scale;
                    for (o, gv) in tg.row_mut(b).iter_mut().zip(&g) {
                        *o = T::of(-c * gv * scale);
                    }
                    rg.set(b, 0, T::of(2.0 * err * scale));
                }
            }
            t_up.push(Some(tg));
            r_up.push(Some(rg));
        }
        let want_dx = train_trace.is_some() && kind != LatentKind::Categorical;
        let mut trans_g = self.trans.zero_grads();
        let mut reward_g = self.reward.zero_grads();
        let dx_t = self.trans.backward_batch(&tt, &t_up, &mut trans_g, want_dx)?;
        let dx_r = self.reward.backward_batch(&rt, &r_up, &mut reward_g, want_dx)?;

        let mut l2 = 0.0;
        if kind == LatentKind::Deterministic {
            l2 = zs.iter().map(|z| z.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() * self.hp.latent_l2 / n as f64;
        }
        let mut psi_grad = None;
        if let Some(trace) = &train_trace {
            let cols = trace.output().cols();
            let mut up = Matrix::zeros(train_rows.len(), cols);
            for (r, &b) in train_rows.iter().enumerate() {
                let row = up.row_mut(r);
                match kind {
                    LatentKind::Categorical => {
                        for cz in 0..d {
                            row[cz] = T::of(dq_logits[b][cz]);
                        }
                    }
                    LatentKind::Deterministic | LatentKind::Gaussian => {
                        let (dt, dr) = (dx_t.as_ref().expect("input grad"), dx_r.as_ref().expect("input grad"));
                        for i in 0..d {
                            let dz = (dt.get(b, z_off + i) + dr.get(b, z_off + i)).as_f64();
                            if kind == LatentKind::Deterministic {
                                row[i] = T::of(dz + 2.0 * self.hp.latent_l2 * zs[b][i] / n as f64);
                            } else {
                                row[i] = T::of(dz);
                                let (ls, live) = clamp_log_std(psi_out[b][d + i]);
                                if live {
                                    row[d + i] = T::of(dz * ls.exp() * samples[b].noise[i]);
                                }
                            }
                        }
                    }
                }
            }
            let mut g = self.psis[newest].net.zero_grads();
            self.psis[newest].net.backward_batch(trace, &up, &mut g, false)?;
            psi_grad = Some(g);
        }
        let total = l_rew + c * l_trans + l2;
        if !total.is_finite() {
            return Err(Error::numeric(
                format!("agent{}.model", self.agent),
                format!("non-finite model loss (reward {l_rew}, transition {l_trans})"),
            ));
        }
        Ok(ModelObjective { l_rew, l_trans, l2, total, trans: trans_g, reward: reward_g, psi: psi_grad })
    }

    fn check_pairing(&mut self, buf: &ModelBuffer) -> Result<()> {
        if self.psis.len() != buf.len() {
            return Err(Error::contract(format!(
                "{} latent functions for {} rollout slots",
                self.psis.len(),
                buf.len()
            )));
        }
        self.pairing.clear();
        for (j, (psi, slot)) in self.psis.iter().zip(buf.slots()).enumerate() {
            if psi.tag != slot.round {
                return Err(Error::contract(format!(
                    "slot {j} holds round {} but its latent function belongs to round {}",
                    slot.round, psi.tag
                )));
            }
            self.pairing.push((slot.round, psi.tag));
        }
        Ok(())
    }

    /// Trains `P_θ`, `R_φ` on all slots and the newest latent function on the
    /// newest slot. Adds the newest latent function first if it is missing.
    pub fn train_model(&mut self, buf: &ModelBuffer, rng: &mut Stream) -> Result<ModelReport> {
        let newest = buf.newest().ok_or_else(|| Error::contract("model buffer is empty"))?;
        if self.psis.len() + 1 == buf.len() {
            self.push_latent(newest.round);
        }
        self.check_pairing(buf)?;
        let pool: Vec<(usize, &Transition)> =
            buf.slots().enumerate().flat_map(|(j, s)| s.transitions().map(move |t| (j, t))).collect();
        if pool.is_empty() {
            return Err(Error::contract("model buffer holds no transitions"));
        }
        let mut rep = ModelReport::default();
        let prefix = format!("agent{}.", self.agent);
        let trans_names = self.trans.tensor_names(&format!("{prefix}trans."));
        let reward_names = self.reward.tensor_names(&format!("{prefix}reward."));
        let last = self.psis.len() - 1;
        let psi_names = self.psis[last].net.tensor_names(&format!("{prefix}psi{last}."));
        let gaussian = self.hp.latent == LatentKind::Gaussian;
        for step in 0..self.hp.model_steps {
            let samples: Vec<ModelSample<'_>> = (0..self.hp.model_batch)
                .map(|_| {
                    let (slot, t) = pool[rng.random_range(0..pool.len())];
                    let noise = if gaussian {
                        (0..self.hp.z_dim).map(|_| rng.sample(StandardNormal)).collect()
                    } else {
                        Vec::new()
                    };
                    ModelSample { slot, t, noise }
                })
                .collect();
            let obj = self.model_objective(&samples)?;
            if step == 0 {
                rep.first_loss = obj.total;
            }
            rep.last_loss = obj.total;
            rep.l_rew = obj.l_rew;
            rep.l_trans = obj.l_trans;
            rep.steps += 1;
            self.trans_opt.step(&mut self.trans.tensors_mut(), &obj.trans.tensors(), &trans_names)?;
            self.reward_opt.step(&mut self.reward.tensors_mut(), &obj.reward.tensors(), &reward_names)?;
            if let Some(g) = &obj.psi {
                let psi = &mut self.psis[last];
                psi.opt.step(&mut psi.net.tensors_mut(), &g.tensors(), &psi_names)?;
            }
        }
        self.trained = true;
        Ok(rep)
    }

    /// Predictor objective on a batch of observations: likelihood (or squared
    /// error for point latents) of the newest latent given the `l-1` before it.
    pub fn predictor_objective(&self, obs: &[Vec<f64>], noise: &[Vec<f64>]) -> Result<(f64, Gradients<T>)> {
        let n = obs.len();
        if n == 0 {
            return Err(Error::contract("empty predictor batch"));
        }
        if self.psis.is_empty() {
            return Err(Error::contract("predictor training needs at least one latent function"));
        }
        let target_j = self.psis.len() - 1;
        let idx = self.window(target_j);
        let d = self.hp.z_dim;
        let mut inputs = Vec::with_capacity(n);
        let mut lasts = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for o in obs {
            let (inp, last) = self.predictor_input(&idx, o)?;
            inputs.push(to_scalars::<T>(&inp));
            lasts.push(last);
            targets.push(self.psi_dist(target_j, o)?);
        }
        let trace = self.predictor.forward_batch(&Matrix::from_rows(&inputs)?)?;
        let out = trace.output();
        let mut up = Matrix::zeros(n, out.cols());
        let inv = 1.0 / n as f64;
        let mut loss = 0.0;
        for b in 0..n {
            let row = to_f64s(out.row(b));
            let g = up.row_mut(b);
            match (&lasts[b], &targets[b]) {
                (LatentDist::Point(last), LatentDist::Point(target)) => {
                    for i in 0..d {
                        let e = last[i] + row[i] - target[i];
                        loss += e * e * inv;
                        g[i] = T::of(2.0 * e * inv);
                    }
                }
                (_, LatentDist::Categorical(qt)) => {
                    let ls = log_softmax(&row)?;
                    for i in 0..d {
                        loss -= qt[i] * ls[i] * inv;
                        g[i] = T::of((ls[i].exp() - qt[i]) * inv);
                    }
                }
                (LatentDist::Gaussian { mean: last, .. }, LatentDist::Gaussian { mean, log_std }) => {
                    let eps = noise
                        .get(b)
                        .filter(|e| e.len() == d)
                        .ok_or_else(|| Error::shape("gaussian predictor targets need one noise draw per dimension"))?;
                    let target: Vec<f64> = (0..d).map(|i| mean[i] + log_std[i].exp() * eps[i]).collect();
                    let pm: Vec<f64> = (0..d).map(|i| last[i] + row[i]).collect();
                    let mut pls = Vec::with_capacity(d);
                    let mut live = Vec::with_capacity(d);
                    for &v in &row[d..] {
                        let (c, ok) = clamp_log_std(v);
                        pls.push(c);
                        live.push(ok);
                    }
                    loss -= gaussian_logprob(&pm, &pls, &target)? * inv;
                    let (dm, ds) = gaussian_logprob_grads(&pm, &pls, &target)?;
                    for i in 0..d {
                        g[i] = T::of(-dm[i] * inv);
                        g[d + i] = if live[i] { T::of(-ds[i] * inv) } else { T::zero() };
                    }
                }
                _ => return Err(Error::contract("latent kind mismatch")),
            }
        }
        if !loss.is_finite() {
            return Err(Error::numeric(format!("agent{}.predictor", self.agent), "non-finite predictor loss"));
        }
        let mut grads = self.predictor.zero_grads();
        self.predictor.backward_batch(&trace, &up, &mut grads, false)?;
        Ok((loss, grads))
    }

    /// Trains `f_ζ` on observations of the newest rollout. Latent functions
    /// are inputs only.
    pub fn train_predictor(&mut self, newest: &RolloutBuffer, rng: &mut Stream) -> Result<ModelReport> {
        if self.psis.is_empty() {
            return Err(Error::contract("predictor training needs the latent functions"));
        }
        let pool: Vec<&Transition> = newest.transitions().collect();
        if pool.is_empty() {
            return Err(Error::contract("newest rollout is empty"));
        }
        let names = self.predictor.tensor_names(&format!("agent{}.predictor.", self.agent));
        let gaussian = self.hp.latent == LatentKind::Gaussian;
        let mut rep = ModelReport::default();
        for step in 0..self.hp.predictor_steps {
            let mut obs = Vec::with_capacity(self.hp.pred_batch);
            let mut noise = Vec::with_capacity(self.hp.pred_batch);
            for _ in 0..self.hp.pred_batch {
                obs.push(pool[rng.random_range(0..pool.len())].obs.clone());
                if gaussian {
                    noise.push((0..self.hp.z_dim).map(|_| rng.sample(StandardNormal)).collect());
                }
            }
            let (loss, g) = self.predictor_objective(&obs, &noise)?;
            if step == 0 {
                rep.first_loss = loss;
            }
            rep.last_loss = loss;
            rep.steps += 1;
            self.pred_opt.step(&mut self.predictor.tensors_mut(), &g.tensors(), &names)?;
        }
        Ok(rep)
    }

    /// Drops the oldest latent function once `l` exist.
    fn shift(&mut self) {
        if self.psis.len() == self.hp.l {
            self.psis.pop_front();
        }
    }

    /// Address ranges of every parameter buffer, for the decentralization audit.
    pub fn buffer_ranges(&self) -> Vec<(usize, usize)> {
        let mut tensors = self.trans.tensors();
        tensors.extend(self.reward.tensors());
        tensors.extend(self.predictor.tensors());
        for p in &self.psis {
            tensors.extend(p.net.tensors());
        }
        tensors
            .iter()
            .map(|t| {
                let s = t.as_ptr() as usize;
                (s, s + std::mem::size_of_val(*t))
            })
            .collect()
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            manifest: ModelManifest {
                agent: self.agent,
                precision: T::NAME.to_string(),
                l: self.hp.l,
                z_dim: self.hp.z_dim,
                latent_head: self.hp.latent,
                transition_head: match self.obs_space {
                    ObsSpace::Discrete(_) => "categorical".into(),
                    ObsSpace::Continuous(_) => "gaussian-delta".into(),
                },
                ensemble: self.trans.n_heads(),
                psi_rounds: self.psi_tags(),
            },
            transition: self.trans.to_record(),
            reward: self.reward.to_record(),
            psis: self.psis.iter().map(|p| p.net.to_record()).collect(),
            predictor: self.predictor.to_record(),
        }
    }
}

/// `shift_latents`: slot `j` takes slot `j+1` in both the buffer and the
/// latent list, keeping the pairing.
pub fn shift_latents<T: Scalar>(model: &mut EnvModel<T>, buf: &mut ModelBuffer) {
    buf.shift();
    model.shift();
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub agent: usize,
    pub precision: String,
    pub l: usize,
    pub z_dim: usize,
    pub latent_head: LatentKind,
    pub transition_head: String,
    pub ensemble: usize,
    /// Round of each stored latent function, oldest first.
    pub psi_rounds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub manifest: ModelManifest,
    pub transition: EnsembleRecord,
    pub reward: EnsembleRecord,
    pub psis: Vec<MlpRecord>,
    pub predictor: MlpRecord,
}

#[derive(Debug, Clone, Default)]
pub struct BranchedRollout {
    pub trajectories: Vec<Trajectory>,
    /// Model-generated steps (never counted as environment steps).
    pub model_steps: usize,
    pub skipped: usize,
}

/// `h`-step real segments from `data`, each extended by `k` model steps under
/// the agent's current policy.
#[allow(clippy::too_many_arguments)]
pub fn branched_rollout<T: Scalar>(
    model: &EnvModel<T>,
    data: &RolloutBuffer,
    policy: &AgentPolicy<T>,
    h: usize,
    k: usize,
    n_traj: usize,
    horizon: usize,
    use_prediction: bool,
    rng: &mut Stream,
) -> Result<BranchedRollout> {
    if data.is_empty() {
        return Err(Error::contract("branched rollout needs a non-empty rollout buffer"));
    }
    if h == 0 {
        return Err(Error::domain("segment length h must be positive"));
    }
    let mut out = BranchedRollout::default();
    for _ in 0..n_traj {
        let ep = &data.episodes[rng.random_range(0..data.episodes.len())];
        if ep.len() < h {
            log::warn!("episode of {} steps is shorter than h = {h}; skipped", ep.len());
            out.skipped += 1;
            continue;
        }
        let max_start = if ep.len() >= h + k { ep.len() - h - k } else { ep.len() - h };
        let start = rng.random_range(0..=max_start);
        let real = &ep[start..start + h];
        let mut steps: Vec<Step> = real.iter().map(to_step).collect();
        let last = real.last().expect("h > 0");
        let mut done = last.done;
        let mut obs = last.next_obs.clone();
        let mut time = start + h;
        for _ in 0..k {
            if done {
                break;
            }
            let act = policy.act(&obs, rng)?;
            let (next, _, reward) = model.predict_step(&obs, &act.action, use_prediction, rng)?;
            done = time + 1 >= horizon;
            steps.push(Step { obs, action: act.action, reward, value: act.value, log_prob: act.log_prob, done });
            obs = next;
            time += 1;
            out.model_steps += 1;
        }
        let bootstrap = if done { 0.0 } else { policy.value(&obs)? };
        out.trajectories.push(Trajectory { steps, bootstrap });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ppo::PpoHyper;
    use crate::rng::stream;

    pub(crate) fn tiny_hyper(latent: LatentKind) -> ModelHyper {
        ModelHyper {
            l: 3,
            z_dim: 2,
            latent,
            psi_hidden: vec![5],
            pred_hidden: vec![4],
            trans_hidden: vec![6, 5],
            rew_hidden: vec![6],
            model_steps: 50,
            predictor_steps: 50,
            ..ModelHyper::stochastic_game()
        }
    }

    fn transition(o: usize, a: usize, o2: usize, r: f64, n: usize) -> Transition {
        let oh = |i: usize| {
            let mut v = vec![0.0; n];
            v[i] = 1.0;
            v
        };
        Transition {
            obs: oh(o),
            action: Action::Discrete(a),
            next_obs: oh(o2),
            reward: r,
            log_prob: -0.7,
            value: 0.0,
            done: false,
            obs_index: Some(o),
            next_index: Some(o2),
            others: None,
        }
    }

    fn toy_buffer(round: u64, n_obs: usize) -> RolloutBuffer {
        let mut ep = Vec::new();
        for t in 0..20 {
            let o = t % n_obs;
            let a = (t / 2) % 2;
            ep.push(transition(o, a, (o + 1 + a) % n_obs, if a == 0 { 0.25 } else { 0.75 }, n_obs));
        }
        ep.last_mut().unwrap().done = true;
        RolloutBuffer { round, episodes: vec![ep] }
    }

    #[test]
    fn buffer_shift_keeps_pairing() {
        let mut rng = stream(0, "test", 0, 0);
        let hp = tiny_hyper(LatentKind::Deterministic);
        let mut model =
            EnvModel::<f64>::new(0, ObsSpace::Discrete(4), ActionSpace::Discrete(2), &hp, &mut rng).unwrap();
        let mut buf = ModelBuffer::new(hp.l);
        for round in 0..5u64 {
            buf.push(toy_buffer(round, 4)).unwrap();
            model.push_latent(round);
            let tags: Vec<u64> = buf.slots().map(|s| s.round).collect();
            assert_eq!(tags, model.psi_tags());
            shift_latents(&mut model, &mut buf);
        }
        // after the last shift slot 0 holds round 3 (was slot 1 before)
        assert_eq!(buf.slot(0).round, 3);
        assert_eq!(model.psi_tags(), vec![3, 4]);
    }

    #[test]
    fn uniform_transition_head_gives_ln_n() {
        let mut rng = stream(1, "test", 0, 0);
        let hp = tiny_hyper(LatentKind::Deterministic);
        let mut model =
            EnvModel::<f64>::new(0, ObsSpace::Discrete(30), ActionSpace::Discrete(2), &hp, &mut rng).unwrap();
        for h in 0..3 {
            let head = &mut model.trans;
            let rec = head.to_record();
            let mut rec2 = rec.clone();
            rec2.heads[h].weight.iter_mut().for_each(|w| *w = 0.0);
            rec2.heads[h].bias.iter_mut().for_each(|w| *w = 0.0);
            *head = Ensemble::from_record(&rec2).unwrap();
        }
        model.push_latent(0);
        let t = transition(3, 1, 17, 0.5, 30);
        let obj = model.model_objective(&[ModelSample { slot: 0, t: &t, noise: vec![] }]).unwrap();
        assert!((obj.l_trans - 30f64.ln()).abs() < 1e-12);
        let mut hp2 = hp.clone();
        hp2.c_obs *= 2.0;
        let mut m2 = model.clone();
        m2.hp = hp2;
        let obj2 = m2.model_objective(&[ModelSample { slot: 0, t: &t, noise: vec![] }]).unwrap();
        assert!(((obj2.total - obj.total) - hp.c_obs * obj.l_trans).abs() < 1e-9);
    }

    #[test]
    fn training_reduces_loss_and_freezes_old_latents() {
        let mut rng = stream(2, "test", 0, 0);
        let mut hp = tiny_hyper(LatentKind::Deterministic);
        hp.model_steps = 200;
        hp.trans_lr = 1e-2;
        hp.rew_lr = 1e-2;
        hp.psi_lr = 1e-3;
        let mut model =
            EnvModel::<f64>::new(0, ObsSpace::Discrete(4), ActionSpace::Discrete(2), &hp, &mut rng).unwrap();
        let mut buf = ModelBuffer::new(hp.l);
        buf.push(toy_buffer(0, 4)).unwrap();
        model.train_model(&buf, &mut rng).unwrap();
        buf.push(toy_buffer(1, 4)).unwrap();
        let frozen = model.psis[0].net.clone();
        let rep = model.train_model(&buf, &mut rng).unwrap();
        assert_eq!(model.psis[0].net, frozen);
        assert_ne!(model.psis[1].net, frozen);
        assert!(rep.last_loss < rep.first_loss);
        assert_eq!(model.pairing_audit(), &[(0, 0), (1, 1)]);
        let before: Vec<_> = model.psis.iter().map(|p| p.net.clone()).collect();
        model.train_predictor(buf.newest().unwrap(), &mut rng).unwrap();
        let after: Vec<_> = model.psis.iter().map(|p| p.net.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn mismatched_pairing_is_a_contract_error() {
        let mut rng = stream(3, "test", 0, 0);
        let hp = tiny_hyper(LatentKind::Deterministic);
        let mut model =
            EnvModel::<f64>::new(0, ObsSpace::Discrete(4), ActionSpace::Discrete(2), &hp, &mut rng).unwrap();
        let mut buf = ModelBuffer::new(hp.l);
        buf.push(toy_buffer(5, 4)).unwrap();
        model.push_latent(4);
        assert!(matches!(model.train_model(&buf, &mut rng), Err(Error::Contract(_))));
        let empty = ModelBuffer::new(3);
        assert!(matches!(model.train_model(&empty, &mut rng), Err(Error::Contract(_))));
    }

    #[test]
    fn untrained_predict_step_errors() {
        let mut rng = stream(4, "test", 0, 0);
        let hp = tiny_hyper(LatentKind::Deterministic);
        let mut model =
            EnvModel::<f64>::new(0, ObsSpace::Discrete(4), ActionSpace::Discrete(2), &hp, &mut rng).unwrap();
        model.push_latent(0);
        let o = vec![1.0, 0.0, 0.0, 0.0];
        assert!(matches!(model.predict_step(&o, &Action::Discrete(0), true, &mut rng), Err(Error::Contract(_))));
    }

    #[test]
    fn prediction_window_uses_latest() {
        let mut rng = stream(5, "test", 0, 0);
        let mut hp = tiny_hyper(LatentKind::Deterministic);
        hp.l = 4;
        let mut model =
            EnvModel::<f64>::new(0, ObsSpace::Discrete(4), ActionSpace::Discrete(2), &hp, &mut rng).unwrap();
        model.push_latent(0);
        assert_eq!(model.prediction_inputs(), vec![0, 0, 0]);
        assert_eq!(model.window(0), vec![0, 0, 0]);
        for r in 1..4 {
            model.push_latent(r);
        }
        assert_eq!(model.prediction_inputs(), vec![1, 2, 3]);
        assert_eq!(model.window(3), vec![0, 1, 2]);
    }

    #[test]
    fn branched_rollout_shapes() {
        let mut rng = stream(6, "test", 0, 0);
        let hp = tiny_hyper(LatentKind::Deterministic);
        let mut model =
            EnvModel::<f64>::new(0, ObsSpace::Discrete(4), ActionSpace::Discrete(2), &hp, &mut rng).unwrap();
        let mut buf = ModelBuffer::new(hp.l);
        buf.push(toy_buffer(0, 4)).unwrap();
        model.train_model(&buf, &mut rng).unwrap();
        let policy = AgentPolicy::<f64>::new(0, 4, ActionSpace::Discrete(2), &PpoHyper::default(), &mut rng).unwrap();
        let data = buf.newest().unwrap();
        let out = branched_rollout(&model, data, &policy, 8, 4, 10, 20, true, &mut rng).unwrap();
        assert_eq!(out.trajectories.len(), 10);
        assert!(out.trajectories.iter().all(|t| t.len() == 12));
        assert_eq!(out.model_steps, 40);
        for t in &out.trajectories {
            // the first h steps are real transitions
            let real = data.episodes[0].iter().position(|x| x.obs == t.steps[0].obs && x.action == t.steps[0].action);
            assert!(real.is_some());
        }
        let zero = branched_rollout(&model, data, &policy, 8, 0, 5, 20, true, &mut rng).unwrap();
        for t in &zero.trajectories {
            assert_eq!(t.len(), 8);
            let ep = &data.episodes[0];
            let start = (0..=12).find(|&s| (0..8).all(|i| to_step(&ep[s + i]) == t.steps[i]));
            assert!(start.is_some());
        }
        let mut r1 = stream(9, "x", 0, 0);
        let mut r2 = stream(9, "x", 0, 0);
        let a = branched_rollout(&model, data, &policy, 8, 4, 6, 20, false, &mut r1).unwrap();
        let b = branched_rollout(&model, data, &policy, 8, 4, 6, 20, false, &mut r2).unwrap();
        assert_eq!(a.trajectories, b.trajectories);
    }
    fn fd_check(latent: LatentKind, obs: ObsSpace, act: ActionSpace) {
        let mut rng = stream(11, "fd", 0, 0);
        let mut hp = tiny_hyper(latent);
        hp.c_obs = 3.0;
        hp.latent_l2 = 0.1;
        let mut model = EnvModel::<f64>::new(0, obs, act, &hp, &mut rng).unwrap();
        model.push_latent(0);
        model.push_latent(1);
        let d = obs.dim();
        let ts: Vec<Transition> = (0..6)
            .map(|i| {
                let mut t = transition(i % 4, i % 2, (i + 1) % 4, 0.3 * i as f64 - 0.4, 4);
                if let ObsSpace::Continuous(_) = obs {
                    t.obs = (0..d).map(|j| ((i * 7 + j) as f64 * 0.37).sin()).collect();
                    t.next_obs = (0..d).map(|j| ((i * 5 + j) as f64 * 0.29).cos() * 0.5).collect();
                    t.obs_index = None;
                    t.next_index = None;
                }
                if let ActionSpace::Continuous(k) = act {
                    t.action = Action::Continuous((0..k).map(|j| ((i + j) as f64 * 0.61).sin() * 0.8).collect());
                }
                t
            })
            .collect();
        let samples: Vec<ModelSample<'_>> = ts
            .iter()
            .enumerate()
            .map(|(i, t)| ModelSample {
                slot: i % 2,
                t,
                noise: if latent == LatentKind::Gaussian { vec![0.3 * i as f64 - 0.5, 0.8] } else { vec![] },
            })
            .collect();
        let obj = model.model_objective(&samples).unwrap();
        let eps = 1e-6;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-5 * (1.0 + a.abs().max(b.abs()));
        let num = |m: &EnvModel<f64>| m.model_objective(&samples).unwrap().total;
        let analytic: Vec<Vec<f64>> = obj.trans.tensors().iter().map(|t| t.to_vec()).collect();
        for (ti, g) in analytic.iter().enumerate() {
            for j in (0..g.len()).step_by(7) {
                let mut m = model.clone();
                m.trans.tensors_mut()[ti][j] += eps;
                let up = num(&m);
                m.trans.tensors_mut()[ti][j] -= 2.0 * eps;
                let fd = (up - num(&m)) / (2.0 * eps);
                assert!(close(fd, g[j]), "trans {ti}[{j}]: fd {fd} vs {}", g[j]);
            }
        }
        let analytic: Vec<Vec<f64>> = obj.reward.tensors().iter().map(|t| t.to_vec()).collect();
        for (ti, g) in analytic.iter().enumerate() {
            for j in (0..g.len()).step_by(5) {
                let mut m = model.clone();
                m.reward.tensors_mut()[ti][j] += eps;
                let up = num(&m);
                m.reward.tensors_mut()[ti][j] -= 2.0 * eps;
                let fd = (up - num(&m)) / (2.0 * eps);
                assert!(close(fd, g[j]), "reward {ti}[{j}]: fd {fd} vs {}", g[j]);
            }
        }
        let psi_g = obj.psi.as_ref().unwrap();
        let analytic: Vec<Vec<f64>> = psi_g.tensors().iter().map(|t| t.to_vec()).collect();
        for (ti, g) in analytic.iter().enumerate() {
            for j in 0..g.len() {
                let mut m = model.clone();
                m.psis[1].net.tensors_mut()[ti][j] += eps;
                let up = num(&m);
                m.psis[1].net.tensors_mut()[ti][j] -= 2.0 * eps;
                let fd = (up - num(&m)) / (2.0 * eps);
                assert!(close(fd, g[j]), "psi {ti}[{j}]: fd {fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        fd_check(LatentKind::Deterministic, ObsSpace::Discrete(4), ActionSpace::Discrete(2));
        fd_check(LatentKind::Categorical, ObsSpace::Discrete(4), ActionSpace::Discrete(2));
        fd_check(LatentKind::Gaussian, ObsSpace::Continuous(3), ActionSpace::Continuous(2));
        fd_check(LatentKind::Deterministic, ObsSpace::Continuous(3), ActionSpace::Continuous(2));
    }

    fn predictor_fd(latent: LatentKind) {
        let mut rng = stream(12, "fd", 0, 0);
        let hp = tiny_hyper(latent);
        let mut model =
            EnvModel::<f64>::new(0, ObsSpace::Discrete(4), ActionSpace::Discrete(2), &hp, &mut rng).unwrap();
        for r in 0..3 {
            model.push_latent(r);
            let j = model.psis.len() - 1;
            for t in model.psis[j].net.tensors_mut() {
                for (i, v) in t.iter_mut().enumerate() {
                    *v += 0.05 * ((i + 3 * r as usize) as f64).sin();
                }
            }
        }
        let obs: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let noise: Vec<Vec<f64>> = (0..4).map(|i| vec![0.2 * i as f64, -0.4]).collect();
        let (_, g) = model.predictor_objective(&obs, &noise).unwrap();
        let analytic: Vec<Vec<f64>> = g.tensors().iter().map(|t| t.to_vec()).collect();
        let eps = 1e-6;
        for (ti, g) in analytic.iter().enumerate() {
            for j in 0..g.len() {
                let mut m = model.clone();
                m.predictor.tensors_mut()[ti][j] += eps;
                let up = m.predictor_objective(&obs, &noise).unwrap().0;
                m.predictor.tensors_mut()[ti][j] -= 2.0 * eps;
                let fd = (up - m.predictor_objective(&obs, &noise).unwrap().0) / (2.0 * eps);
                assert!((fd - g[j]).abs() <= 1e-5 * (1.0 + fd.abs()), "{latent:?} {ti}[{j}]: {fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn predictor_gradients_match_finite_differences() {
        for k in [LatentKind::Deterministic, LatentKind::Categorical, LatentKind::Gaussian] {
            predictor_fd(k);
        }
    }
}
