//! Tabular cooperative stochastic games.
//!
//! A game is a transition tensor indexed `[o, a_0, .., a_{n-1}] → Δ(O)` and a
//! reward tensor over the same joint index. All agents observe the same
//! observation index and share the reward.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Action, ActionSpace, Environment, ObsSpace, Reset, StepResult};
use crate::error::{Error, Result};
use crate::nn::dist::sample_index;
use crate::rng::{stream, Stream};

pub const STOCHASTIC_GAME_OBS: usize = 30;
pub const STOCHASTIC_GAME_AGENTS: usize = 3;
pub const STOCHASTIC_GAME_ACTIONS: usize = 5;
pub const EPISODE_LEN: usize = 40;

/// Shape and tensors of a tabular game.
#[derive(Debug, Clone, PartialEq)]
pub struct GameSpec {
    pub n_obs: usize,
    pub n_agents: usize,
    pub n_actions: usize,
    pub horizon: usize,
    /// Flat `[n_obs, n_actions^n_agents, n_obs]`.
    pub transition: Vec<f64>,
    /// Flat `[n_obs, n_actions^n_agents]`.
    pub reward: Vec<f64>,
    /// Initial observation distribution.
    pub initial: Vec<f64>,
    pub seed: u64,
}

/// Draws a point uniformly from the probability simplex (Dirichlet(1, .., 1)).
pub fn dirichlet_ones<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
        let s: f64 = v.iter().sum();
        if s > 0.0 && s.is_finite() {
            v.iter_mut().for_each(|x| *x /= s);
            return v;
        }
    }
}

impl GameSpec {
    pub fn n_joint(&self) -> usize {
        self.n_actions.pow(self.n_agents as u32)
    }

    /// Random game: Dirichlet(1,..,1) transition rows, Uniform[0,1] rewards,
    /// uniform initial observation.
    pub fn random(n_obs: usize, n_agents: usize, n_actions: usize, horizon: usize, seed: u64) -> Self {
        let mut rng = stream(seed, "game-spec", 0, 0);
        let n_joint = n_actions.pow(n_agents as u32);
        let mut transition = Vec::with_capacity(n_obs * n_joint * n_obs);
        for _ in 0..n_obs * n_joint {
            transition.extend(dirichlet_ones(n_obs, &mut rng));
        }
        let reward = (0..n_obs * n_joint).map(|_| rng.random::<f64>()).collect();
        Self { n_obs, n_agents, n_actions, horizon, transition, reward, initial: vec![1.0 / n_obs as f64; n_obs], seed }
    }

    pub fn joint_index(&self, actions: &[usize]) -> Result<usize> {
        if actions.len() != self.n_agents {
            return Err(Error::domain(format!(
                "joint action has {} entries, game has {} agents",
                actions.len(),
                self.n_agents
            )));
        }
        let mut idx = 0;
        for &a in actions {
            if a >= self.n_actions {
                return Err(Error::domain(format!("action {a} outside [0, {})", self.n_actions)));
            }
            idx = idx * self.n_actions + a;
        }
        Ok(idx)
    }

    pub fn decode_joint(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.n_agents];
        for slot in out.iter_mut().rev() {
            *slot = idx % self.n_actions;
            idx /= self.n_actions;
        }
        out
    }

    pub fn transition_row(&self, o: usize, joint: usize) -> &[f64] {
        let start = (o * self.n_joint() + joint) * self.n_obs;
        &self.transition[start..start + self.n_obs]
    }

    pub fn reward_at(&self, o: usize, joint: usize) -> f64 {
        self.reward[o * self.n_joint() + joint]
    }

    pub fn validate(&self) -> Result<()> {
        let rows = self.n_obs * self.n_joint();
        if self.transition.len() != rows * self.n_obs || self.reward.len() != rows {
            return Err(Error::shape("game tensors do not match the declared shape"));
        }
        if self.initial.len() != self.n_obs {
            return Err(Error::shape("initial distribution has the wrong length"));
        }
        check_row_stochastic(&self.transition, self.n_obs)?;
        if self.reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::domain("non-finite reward entry"));
        }
        Ok(())
    }

    /// SHA-256 over the shape header, seed and little-endian tensor bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in [self.n_obs, self.n_agents, self.n_actions, self.horizon] {
            h.update((v as u64).to_le_bytes());
        }
        h.update(self.seed.to_le_bytes());
        for t in [&self.transition, &self.reward, &self.initial] {
            for x in t.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

pub fn check_row_stochastic(flat: &[f64], width: usize) -> Result<()> {
    for (i, row) in flat.chunks(width).enumerate() {
        if row.iter().any(|p| *p < 0.0 || !p.is_finite()) {
            return Err(Error::domain(format!("row {i} has a negative or non-finite entry")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!("row {i} sums to {s}")));
        }
    }
    Ok(())
}

/// The 30-observation, 3-agent, 5-action cooperative game with 40-step episodes.
pub fn gen_stochastic_game(seed: u64) -> GameSpec {
    GameSpec::random(STOCHASTIC_GAME_OBS, STOCHASTIC_GAME_AGENTS, STOCHASTIC_GAME_ACTIONS, EPISODE_LEN, seed)
}

/// One transition: samples the next observation from the row selected by
/// `(o, joint_action)` of `transition` and reads the reward.
pub fn tabular_step<R: Rng + ?Sized>(
    spec: &GameSpec,
    transition: &[f64],
    o: usize,
    joint_action: &[usize],
    rng: &mut R,
) -> Result<(usize, f64)> {
    if o >= spec.n_obs {
        return Err(Error::domain(format!("observation {o} outside [0, {})", spec.n_obs)));
    }
    let joint = spec.joint_index(joint_action)?;
    let start = (o * spec.n_joint() + joint) * spec.n_obs;
    let row = &transition[start..start + spec.n_obs];
    Ok((sample_index(row, rng), spec.reward_at(o, joint)))
}

/// Episode driver for a [`GameSpec`] (optionally with an overriding transition
/// tensor, used by the non-stationary variant).
#[derive(Debug, Clone)]
pub struct TabularEnv {
    spec: GameSpec,
    transition: Option<Vec<f64>>,
    obs: usize,
    t: usize,
}

impl TabularEnv {
    pub fn new(spec: GameSpec) -> Self {
        Self { spec, transition: None, obs: 0, t: 0 }
    }

    pub fn spec(&self) -> &GameSpec {
        &self.spec
    }

    pub fn set_transition(&mut self, transition: Option<Vec<f64>>) {
        self.transition = transition;
    }

    pub fn active_transition(&self) -> &[f64] {
        self.transition.as_deref().unwrap_or(&self.spec.transition)
    }

    pub fn observation(&self) -> usize {
        self.obs
    }

    pub fn reset_obs<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        self.obs = sample_index(&self.spec.initial, rng);
        self.t = 0;
        self.obs
    }

    pub fn step_joint<R: Rng + ?Sized>(&mut self, joint_action: &[usize], rng: &mut R) -> Result<StepResult> {
        if self.t >= self.spec.horizon {
            return Err(Error::contract("step called on a finished episode"));
        }
        let transition = self.transition.as_deref().unwrap_or(&self.spec.transition);
        let (next, reward) = tabular_step(&self.spec, transition, self.obs, joint_action, rng)?;
        self.obs = next;
        self.t += 1;
        Ok(StepResult {
            observations: vec![one_hot(next, self.spec.n_obs); self.spec.n_agents],
            obs_index: Some(next),
            reward,
            done: self.t == self.spec.horizon,
        })
    }
}

impl Environment for TabularEnv {
    fn n_agents(&self) -> usize {
        self.spec.n_agents
    }

    fn obs_space(&self) -> ObsSpace {
        ObsSpace::Discrete(self.spec.n_obs)
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(self.spec.n_actions)
    }

    fn horizon(&self) -> usize {
        self.spec.horizon
    }

    fn reset(&mut self, rng: &mut Stream) -> Reset {
        let o = self.reset_obs(rng);
        Reset { observations: vec![one_hot(o, self.spec.n_obs); self.spec.n_agents], obs_index: Some(o) }
    }

    fn step(&mut self, actions: &[Action], rng: &mut Stream) -> Result<StepResult> {
        let joint = actions
            .iter()
            .map(|a| match a {
                Action::Discrete(i) => Ok(*i),
                Action::Continuous(_) => Err(Error::domain("tabular game takes discrete actions")),
            })
            .collect::<Result<Vec<_>>>()?;
        self.step_joint(&joint, rng)
    }

    fn checksum(&self) -> String {
        self.spec.checksum()
    }

    fn pinned_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.spec.to_record())?)
    }
}

pub fn one_hot(i: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// Pinned JSON form: shape header, flat tensors, seed and checksum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSpecRecord {
    pub n_obs: usize,
    pub n_agents: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub transition_shape: Vec<usize>,
    pub reward_shape: Vec<usize>,
    pub seed: u64,
    pub transition: Vec<f64>,
    pub reward: Vec<f64>,
    pub initial: Vec<f64>,
    pub checksum: String,
}

impl GameSpec {
    pub fn tensor_shapes(&self) -> (Vec<usize>, Vec<usize>) {
        let mut t = vec![self.n_obs];
        t.extend(std::iter::repeat_n(self.n_actions, self.n_agents));
        let r = t.clone();
        t.push(self.n_obs);
        (t, r)
    }

    pub fn to_record(&self) -> GameSpecRecord {
        let (transition_shape, reward_shape) = self.tensor_shapes();
        GameSpecRecord {
            n_obs: self.n_obs,
            n_agents: self.n_agents,
            n_actions: self.n_actions,
            horizon: self.horizon,
            transition_shape,
            reward_shape,
            seed: self.seed,
            transition: self.transition.clone(),
            reward: self.reward.clone(),
            initial: self.initial.clone(),
            checksum: self.checksum(),
        }
    }

    pub fn from_record(rec: &GameSpecRecord) -> Result<Self> {
        let spec = Self {
            n_obs: rec.n_obs,
            n_agents: rec.n_agents,
            n_actions: rec.n_actions,
            horizon: rec.horizon,
            transition: rec.transition.clone(),
            reward: rec.reward.clone(),
            initial: rec.initial.clone(),
            seed: rec.seed,
        };
        spec.validate()?;
        if spec.checksum() != rec.checksum {
            return Err(Error::contract("game checksum mismatch"));
        }
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stochastic_game_shapes_and_rows() {
        let g = gen_stochastic_game(0);
        let (t, r) = g.tensor_shapes();
        assert_eq!(t, vec![30, 5, 5, 5, 30]);
        assert_eq!(r, vec![30, 5, 5, 5]);
        assert_eq!(g.transition.len(), 30 * 125 * 30);
        g.validate().unwrap();
        assert!(g.reward.iter().all(|r| (0.0..=1.0).contains(r)));
    }

    #[test]
    fn generation_is_deterministic_in_seed() {
        let a = gen_stochastic_game(0);
        let b = gen_stochastic_game(0);
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
        let c = gen_stochastic_game(1);
        let diff = a.transition.iter().zip(&c.transition).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn degenerate_row_is_deterministic() {
        let mut g = GameSpec::random(10, 2, 2, 5, 3);
        let joint = g.joint_index(&[1, 0]).unwrap();
        let start = (4 * g.n_joint() + joint) * g.n_obs;
        for i in 0..g.n_obs {
            g.transition[start + i] = if i == 7 { 1.0 } else { 0.0 };
        }
        let mut rng = stream(0, "test", 0, 0);
        for _ in 0..100 {
            let (next, r) = tabular_step(&g, &g.transition, 4, &[1, 0], &mut rng).unwrap();
            assert_eq!(next, 7);
            assert_eq!(r, g.reward_at(4, joint));
        }
    }

    #[test]
    fn uniform_row_frequencies() {
        let mut g = gen_stochastic_game(5);
        let joint = g.joint_index(&[0, 0, 0]).unwrap();
        let start = joint * g.n_obs;
        g.transition[start..start + 30].iter_mut().for_each(|p| *p = 1.0 / 30.0);
        let mut rng = stream(1, "test", 0, 0);
        let mut counts = [0usize; 30];
        let n = 100_000;
        for _ in 0..n {
            counts[tabular_step(&g, &g.transition, 0, &[0, 0, 0], &mut rng).unwrap().0] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 30.0).abs() < 0.01);
        }
    }

    #[test]
    fn out_of_range_indices_are_domain_errors() {
        let g = gen_stochastic_game(0);
        let mut rng = stream(1, "test", 0, 0);
        assert!(matches!(tabular_step(&g, &g.transition, 30, &[0, 0, 0], &mut rng), Err(Error::Domain(_))));
        assert!(matches!(tabular_step(&g, &g.transition, 0, &[0, 5, 0], &mut rng), Err(Error::Domain(_))));
        assert!(matches!(tabular_step(&g, &g.transition, 0, &[0, 0], &mut rng), Err(Error::Domain(_))));
    }

    #[test]
    fn episodes_last_exactly_horizon() {
        let mut env = TabularEnv::new(gen_stochastic_game(2));
        let mut rng = stream(2, "test", 0, 0);
        env.reset_obs(&mut rng);
        let mut steps = 0;
        loop {
            let res = env.step_joint(&[1, 2, 3], &mut rng).unwrap();
            steps += 1;
            let o = res.obs_index.unwrap();
            assert_eq!(res.observations[0], one_hot(o, 30));
            if res.done {
                break;
            }
        }
        assert_eq!(steps, EPISODE_LEN);
        assert!(env.step_joint(&[0, 0, 0], &mut rng).is_err());
    }

    #[test]
    fn record_checksum_detects_tampering() {
        let g = GameSpec::random(4, 2, 2, 10, 9);
        let json = serde_json::to_string(&g.to_record()).unwrap();
        let rec: GameSpecRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(GameSpec::from_record(&rec).unwrap(), g);
        let mut bad = rec.clone();
        bad.reward[0] += 0.125;
        assert!(GameSpec::from_record(&bad).is_err());
    }
}
