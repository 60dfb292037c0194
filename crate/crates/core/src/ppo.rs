//! Independent PPO learner: actor, critic, GAE and the clipped surrogate.
//!
//! Each agent owns one [`AgentPolicy`]; nothing in here is shared between
//! agents.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::envs::{Action, ActionSpace};
use crate::error::{Error, Result};
use crate::nn::dist::{
    categorical_entropy, categorical_entropy_grad, categorical_head, categorical_logprob, gaussian_entropy,
    gaussian_head, gaussian_logprob, gaussian_logprob_grads, log_softmax, softmax, SampleValue,
};
use crate::nn::mlp::clip_grad_norm;
use crate::nn::{Activation, Adam, Gradients, Head, Matrix, Mlp, MlpRecord};
use crate::rng::Stream;
use crate::scalar::{to_f64s, to_scalars, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoHyper {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub value_clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub minibatch: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub epochs: usize,
    pub hidden: Vec<usize>,
}

impl Default for PpoHyper {
    fn default() -> Self {
        Self {
            gamma: 0.98,
            lambda: 0.94,
            clip: 0.2,
            value_clip: 10.0,
            entropy_coef: 3e-4,
            value_coef: 0.5,
            max_grad_norm: 0.6,
            minibatch: 32,
            actor_lr: 3e-4,
            critic_lr: 1e-3,
            epochs: 10,
            hidden: vec![128, 128],
        }
    }
}

impl PpoHyper {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::domain(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("gamma", self.gamma)?;
        unit("lambda", self.lambda)?;
        for (name, v) in [
            ("clip", self.clip),
            ("value_clip", self.value_clip),
            ("value_coef", self.value_coef),
            ("max_grad_norm", self.max_grad_norm),
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::domain(format!("{name} = {v} must be positive")));
            }
        }
        if !(self.entropy_coef >= 0.0 && self.entropy_coef.is_finite()) {
            return Err(Error::domain("entropy_coef must be non-negative"));
        }
        if self.minibatch == 0 || self.epochs == 0 {
            return Err(Error::domain("minibatch and epochs must be positive"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::domain("policy hidden sizes must be non-empty and positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub obs: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub value: f64,
    pub log_prob: f64,
    /// True when the episode ends after this step (no bootstrapping past it).
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    /// Value of the observation after the last step, used unless it is `done`.
    pub bootstrap: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Generalized advantage estimates and returns (`advantages + values`).
pub fn compute_gae(traj: &Trajectory, gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = traj.steps.len();
    if n == 0 {
        return Err(Error::domain("cannot compute advantages of an empty trajectory"));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let s = &traj.steps[t];
        let (next_value, carry) = if s.done {
            (0.0, 0.0)
        } else if t + 1 < n {
            (traj.steps[t + 1].value, next_adv)
        } else {
            (traj.bootstrap, 0.0)
        };
        let delta = s.reward + gamma * next_value - s.value;
        adv[t] = delta + gamma * lambda * carry;
        next_adv = adv[t];
    }
    let returns = adv.iter().zip(&traj.steps).map(|(a, s)| a + s.value).collect();
    Ok((adv, returns))
}

/// Zero-mean, unit-std advantages; the std is floored at 1e-8.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActOutput {
    pub action: Action,
    pub log_prob: f64,
    pub value: f64,
}

/// Flattened PPO training data.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub obs: Matrix<T>,
    pub actions: Vec<Action>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub old_values: Vec<f64>,
}

impl<T: Scalar> Batch<T> {
    /// Runs GAE per trajectory, then normalizes advantages over the whole set.
    pub fn from_trajectories(trajs: &[Trajectory], hp: &PpoHyper) -> Result<Self> {
        let mut rows: Vec<Vec<T>> = Vec::new();
        let mut b = Batch {
            obs: Matrix::zeros(0, 0),
            actions: Vec::new(),
            old_log_probs: Vec::new(),
            advantages: Vec::new(),
            returns: Vec::new(),
            old_values: Vec::new(),
        };
        for traj in trajs.iter().filter(|t| !t.is_empty()) {
            let (adv, ret) = compute_gae(traj, hp.gamma, hp.lambda)?;
            for (i, s) in traj.steps.iter().enumerate() {
                rows.push(to_scalars(&s.obs));
                b.actions.push(s.action.clone());
                b.old_log_probs.push(s.log_prob);
                b.old_values.push(s.value);
                b.advantages.push(adv[i]);
                b.returns.push(ret[i]);
            }
        }
        if rows.is_empty() {
            return Err(Error::domain("no training data for the policy update"));
        }
        normalize_advantages(&mut b.advantages);
        b.obs = Matrix::from_rows(&rows)?;
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Batch<T> {
        let cols = self.obs.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(self.obs.row(i));
        }
        Batch {
            obs: Matrix::from_vec(idx.len(), cols, data).expect("row selection keeps the width"),
            actions: idx.iter().map(|&i| self.actions[i].clone()).collect(),
            old_log_probs: idx.iter().map(|&i| self.old_log_probs[i]).collect(),
            advantages: idx.iter().map(|&i| self.advantages[i]).collect(),
            returns: idx.iter().map(|&i| self.returns[i]).collect(),
            old_values: idx.iter().map(|&i| self.old_values[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PpoReport {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub updates: usize,
}

/// Actor-side loss and gradients on one minibatch.
#[derive(Debug, Clone)]
pub struct ActorGrad<T> {
    pub loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub grads: Gradients<T>,
    pub log_std: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct AgentPolicy<T> {
    pub agent: usize,
    pub actor: Mlp<T>,
    /// State-independent log standard deviation (continuous actions only).
    pub log_std: Vec<T>,
    pub critic: Mlp<T>,
    actor_opt: Adam<T>,
    critic_opt: Adam<T>,
    action_space: ActionSpace,
}

impl<T: Scalar> AgentPolicy<T> {
    pub fn new(
        agent: usize,
        obs_dim: usize,
        action_space: ActionSpace,
        hp: &PpoHyper,
        rng: &mut Stream,
    ) -> Result<Self> {
        let (out, head, log_std) = match action_space {
            ActionSpace::Discrete(n) => (n, Head::Softmax, Vec::new()),
            ActionSpace::Continuous(d) => (d, Head::DiagGaussian, vec![T::zero(); d]),
        };
        let actor = Mlp::with_hidden(obs_dim, &hp.hidden, out, Activation::Tanh, head, rng)?;
        let critic = Mlp::with_hidden(obs_dim, &hp.hidden, 1, Activation::Tanh, Head::Linear, rng)?;
        Ok(Self::from_parts(agent, actor, log_std, critic, action_space, hp))
    }

    pub fn from_parts(
        agent: usize,
        actor: Mlp<T>,
        log_std: Vec<T>,
        critic: Mlp<T>,
        action_space: ActionSpace,
        hp: &PpoHyper,
    ) -> Self {
        let mut shapes: Vec<usize> = actor.tensors().iter().map(|t| t.len()).collect();
        if !log_std.is_empty() {
            shapes.push(log_std.len());
        }
        let actor_opt = Adam::new(hp.actor_lr, &shapes);
        let critic_opt = Adam::for_tensors(hp.critic_lr, &critic.tensors());
        Self { agent, actor, log_std, critic, actor_opt, critic_opt, action_space }
    }

    pub fn action_space(&self) -> ActionSpace {
        self.action_space
    }

    pub fn obs_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64> {
        Ok(self.critic.forward(&to_scalars::<T>(obs))?[0].as_f64())
    }

    /// Samples an action and reports its log-probability and the critic value.
    pub fn act(&self, obs: &[f64], rng: &mut Stream) -> Result<ActOutput> {
        let x: Vec<T> = to_scalars(obs);
        let out = self.actor.forward(&x)?;
        let value = self.critic.forward(&x)?[0].as_f64();
        let sample = match self.action_space {
            ActionSpace::Discrete(_) => categorical_head(&out, rng)?,
            ActionSpace::Continuous(_) => gaussian_head(&out, &self.log_std, rng)?,
        };
        let action = match sample.value {
            SampleValue::Index(i) => Action::Discrete(i),
            SampleValue::Vector(v) => Action::Continuous(to_f64s(&v)),
        };
        Ok(ActOutput { action, log_prob: sample.log_prob.as_f64(), value })
    }

    pub fn log_prob(&self, obs: &[f64], action: &Action) -> Result<f64> {
        let out = self.actor.forward(&to_scalars::<T>(obs))?;
        self.log_prob_from_output(&out, action).map(|v| v.as_f64())
    }

    fn log_prob_from_output(&self, out: &[T], action: &Action) -> Result<T> {
        match (self.action_space, action) {
            (ActionSpace::Discrete(_), Action::Discrete(i)) => categorical_logprob(out, *i),
            (ActionSpace::Continuous(_), Action::Continuous(a)) => {
                gaussian_logprob(out, &self.log_std, &to_scalars::<T>(a))
            }
            _ => Err(Error::domain("action does not match the policy's action space")),
        }
    }

    /// Clipped-surrogate loss `-(1/B) Σ min(ρÂ, clip(ρ)Â) - c_H·H̄` and its
    /// gradients, without touching parameters.
    pub fn actor_gradient(&self, mb: &Batch<T>, hp: &PpoHyper) -> Result<ActorGrad<T>> {
        let n = mb.len();
        if n == 0 {
            return Err(Error::domain("empty minibatch"));
        }
        let trace = self.actor.forward_batch(&mb.obs)?;
        let out = trace.output();
        let inv_n = 1.0 / n as f64;
        let mut upstream = Matrix::zeros(n, out.cols());
        let mut g_log_std = vec![T::zero(); self.log_std.len()];
        let (mut loss, mut entropy, mut clipped) = (0.0, 0.0, 0usize);
        for i in 0..n {
            let row = out.row(i);
            let a = mb.advantages[i];
            let logp = self.log_prob_from_output(row, &mb.actions[i])?.as_f64();
            let ratio = (logp - mb.old_log_probs[i]).exp();
            let surr1 = ratio * a;
            let surr2 = ratio.clamp(1.0 - hp.clip, 1.0 + hp.clip) * a;
            if surr2 < surr1 {
                clipped += 1;
            }
            // d(-min)/dlogp is -ρÂ when the unclipped branch is selected.
            let coef = if surr1 <= surr2 { -ratio * a * inv_n } else { 0.0 };
            loss -= surr1.min(surr2) * inv_n;
            let up = upstream.row_mut(i);
            match &mb.actions[i] {
                Action::Discrete(k) => {
                    let p = softmax(row)?;
                    let h = categorical_entropy(&p).as_f64();
                    entropy += h * inv_n;
                    loss -= hp.entropy_coef * h * inv_n;
                    let dh = categorical_entropy_grad(row)?;
                    for j in 0..up.len() {
                        let dlogp = if j == *k { 1.0 } else { 0.0 } - p[j].as_f64();
                        up[j] = T::of(coef * dlogp - hp.entropy_coef * inv_n * dh[j].as_f64());
                    }
                }
                Action::Continuous(x) => {
                    let (dm, ds) = gaussian_logprob_grads(row, &self.log_std, &to_scalars::<T>(x))?;
                    for j in 0..up.len() {
                        up[j] = T::of(coef * dm[j].as_f64());
                        g_log_std[j] += T::of(coef * ds[j].as_f64());
                    }
                }
            }
        }
        if !self.log_std.is_empty() {
            let h = gaussian_entropy(&self.log_std).as_f64();
            entropy = h;
            loss -= hp.entropy_coef * h;
            g_log_std.iter_mut().for_each(|g| *g -= T::of(hp.entropy_coef));
        }
        if !loss.is_finite() {
            return Err(Error::numeric(
                format!("agent{}.actor", self.agent),
                format!("non-finite surrogate loss over {n} samples (entropy {entropy})"),
            ));
        }
        let mut grads = self.actor.zero_grads();
        self.actor.backward_batch(&trace, &upstream, &mut grads, false)?;
        Ok(ActorGrad { loss, entropy, clip_fraction: clipped as f64 * inv_n, grads, log_std: g_log_std })
    }

    /// Clipped value loss `c_v·(1/B) Σ max((V-R)², (V_clip-R)²)` and gradients.
    pub fn critic_gradient(&self, mb: &Batch<T>, hp: &PpoHyper) -> Result<(f64, Gradients<T>)> {
        let n = mb.len();
        let trace = self.critic.forward_batch(&mb.obs)?;
        let inv_n = 1.0 / n as f64;
        let mut upstream = Matrix::zeros(n, 1);
        let mut loss = 0.0;
        for i in 0..n {
            let v = trace.output().get(i, 0).as_f64();
            let (old, ret) = (mb.old_values[i], mb.returns[i]);
            // Inside the clip range `vc` must equal `v` exactly; `old + (v - old)` can round.
            let vc =
                if (v - old).abs() <= hp.value_clip { v } else { old + (v - old).clamp(-hp.value_clip, hp.value_clip) };
            let l1 = (v - ret).powi(2);
            let l2 = (vc - ret).powi(2);
            loss += l1.max(l2) * inv_n;
            let g = if l1 >= l2 { 2.0 * (v - ret) } else { 0.0 };
            upstream.set(i, 0, T::of(hp.value_coef * g * inv_n));
        }
        if !loss.is_finite() {
            return Err(Error::numeric(format!("agent{}.critic", self.agent), "non-finite value loss"));
        }
        let mut grads = self.critic.zero_grads();
        self.critic.backward_batch(&trace, &upstream, &mut grads, false)?;
        Ok((loss, grads))
    }

    fn apply_actor(&mut self, mut g: ActorGrad<T>, hp: &PpoHyper) -> Result<()> {
        let mut gt = g.grads.tensors_mut();
        if !g.log_std.is_empty() {
            gt.push(&mut g.log_std[..]);
        }
        clip_grad_norm(&mut gt, T::of(hp.max_grad_norm));
        let grads: Vec<&[T]> = gt.iter().map(|t| &**t).collect();
        let mut names = self.actor.tensor_names(&format!("agent{}.actor.", self.agent));
        let mut params = self.actor.tensors_mut();
        if !self.log_std.is_empty() {
            params.push(&mut self.log_std[..]);
            names.push(format!("agent{}.actor.log_std", self.agent));
        }
        self.actor_opt.step(&mut params, &grads, &names)
    }

    fn apply_critic(&mut self, mut g: Gradients<T>, hp: &PpoHyper) -> Result<()> {
        let mut gt = g.tensors_mut();
        clip_grad_norm(&mut gt, T::of(hp.max_grad_norm));
        let grads: Vec<&[T]> = gt.iter().map(|t| &**t).collect();
        let names = self.critic.tensor_names(&format!("agent{}.critic.", self.agent));
        self.critic_opt.step(&mut self.critic.tensors_mut(), &grads, &names)
    }

    /// One actor and one critic step on a minibatch.
    pub fn update_minibatch(&mut self, mb: &Batch<T>, hp: &PpoHyper) -> Result<PpoReport> {
        let ag = self.actor_gradient(mb, hp)?;
        let (value_loss, cg) = self.critic_gradient(mb, hp)?;
        let rep = PpoReport {
            policy_loss: ag.loss,
            value_loss,
            entropy: ag.entropy,
            clip_fraction: ag.clip_fraction,
            updates: 1,
        };
        self.apply_actor(ag, hp)?;
        self.apply_critic(cg, hp)?;
        Ok(rep)
    }

    /// PPO update: `hp.epochs` shuffled passes of `hp.minibatch`-sized steps.
    pub fn ppo_update(&mut self, trajs: &[Trajectory], hp: &PpoHyper, rng: &mut Stream) -> Result<PpoReport> {
        let batch = Batch::<T>::from_trajectories(trajs, hp)?;
        self.ppo_update_batch(&batch, hp, rng)
    }

    pub fn ppo_update_batch(&mut self, batch: &Batch<T>, hp: &PpoHyper, rng: &mut Stream) -> Result<PpoReport> {
        let mut order: Vec<usize> = (0..batch.len()).collect();
        let mut rep = PpoReport::default();
        for _ in 0..hp.epochs {
            order.shuffle(rng);
            for chunk in order.chunks(hp.minibatch) {
                let mb = batch.select(chunk);
                let r = self.update_minibatch(&mb, hp)?;
                rep.policy_loss += r.policy_loss;
                rep.value_loss += r.value_loss;
                rep.entropy += r.entropy;
                rep.clip_fraction += r.clip_fraction;
                rep.updates += 1;
            }
        }
        let k = rep.updates.max(1) as f64;
        rep.policy_loss /= k;
        rep.value_loss /= k;
        rep.entropy /= k;
        rep.clip_fraction /= k;
        Ok(rep)
    }

    /// Address ranges of every parameter buffer, for the decentralization audit.
    pub fn buffer_ranges(&self) -> Vec<(usize, usize)> {
        let mut tensors = self.actor.tensors();
        tensors.extend(self.critic.tensors());
        if !self.log_std.is_empty() {
            tensors.push(&self.log_std);
        }
        tensors
            .iter()
            .map(|t| {
                let start = t.as_ptr() as usize;
                (start, start + std::mem::size_of_val(*t))
            })
            .collect()
    }

    pub fn to_checkpoint(&self) -> PolicyCheckpoint {
        PolicyCheckpoint {
            agent: self.agent,
            precision: T::NAME.to_string(),
            action_space: ActionSpaceTag::from(self.action_space),
            actor: self.actor.to_record(),
            log_std: to_f64s(&self.log_std),
            critic: self.critic.to_record(),
        }
    }

    pub fn from_checkpoint(ck: &PolicyCheckpoint, hp: &PpoHyper) -> Result<Self> {
        let actor = Mlp::from_record(&ck.actor)?;
        let critic = Mlp::from_record(&ck.critic)?;
        let action_space = ck.action_space.into();
        Ok(Self::from_parts(ck.agent, actor, to_scalars(&ck.log_std), critic, action_space, hp))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "n", rename_all = "kebab-case")]
pub enum ActionSpaceTag {
    Discrete(usize),
    Continuous(usize),
}

impl From<ActionSpace> for ActionSpaceTag {
    fn from(a: ActionSpace) -> Self {
        match a {
            ActionSpace::Discrete(n) => ActionSpaceTag::Discrete(n),
            ActionSpace::Continuous(n) => ActionSpaceTag::Continuous(n),
        }
    }
}

impl From<ActionSpaceTag> for ActionSpace {
    fn from(a: ActionSpaceTag) -> Self {
        match a {
            ActionSpaceTag::Discrete(n) => ActionSpace::Discrete(n),
            ActionSpaceTag::Continuous(n) => ActionSpace::Continuous(n),
        }
    }
}

/// Policy checkpoint: network records plus an agent-id header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub agent: usize,
    pub precision: String,
    pub action_space: ActionSpaceTag,
    pub actor: MlpRecord,
    pub log_std: Vec<f64>,
    pub critic: MlpRecord,
}

/// Log-probabilities of a discrete policy's actions at one observation.
pub fn action_log_probs<T: Scalar>(policy: &AgentPolicy<T>, obs: &[f64]) -> Result<Vec<f64>> {
    let out = policy.actor.forward(&to_scalars::<T>(obs))?;
    Ok(to_f64s(&log_softmax(&out)?))
}
