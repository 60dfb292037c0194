//! Single-agent non-stationary variant of the stochastic game.
//!
//! Two of the three agents are frozen to stochastic per-observation policies;
//! the remaining agent faces a transition tensor that rotates through five
//! noise-blended versions `T_i = (1 - β) T + β T'_i`, one per policy rollout
//! (`round mod 5`).

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tabular::{check_row_stochastic, dirichlet_ones, gen_stochastic_game, one_hot, GameSpec, GameSpecRecord};
use super::{Action, ActionSpace, Environment, ObsSpace, Reset, StepResult};
use crate::error::{Error, Result};
use crate::nn::dist::sample_index;
use crate::rng::{stream, Stream};

pub const NOISE_TENSORS: usize = 5;
pub const DEFAULT_BETA: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct NsGameSpec {
    pub base: GameSpec,
    pub tensors: Vec<Vec<f64>>,
    pub beta: f64,
    /// `fixed_policies[k][o]` is the action distribution of frozen agent `k + 1`.
    pub fixed_policies: Vec<Vec<Vec<f64>>>,
}

pub fn gen_nonstationary_variant(seed: u64, beta: f64) -> Result<NsGameSpec> {
    if !(0.0..=1.0).contains(&beta) || beta.is_nan() {
        return Err(Error::domain(format!("blend coefficient {beta} outside [0, 1]")));
    }
    let base = gen_stochastic_game(seed);
    let mut rng = stream(seed, "ns-noise", 0, 0);
    let rows = base.n_obs * base.n_joint();
    let mut tensors = Vec::with_capacity(NOISE_TENSORS);
    for _ in 0..NOISE_TENSORS {
        let mut t = Vec::with_capacity(base.transition.len());
        for r in 0..rows {
            let noise = dirichlet_ones(base.n_obs, &mut rng);
            let row = &base.transition[r * base.n_obs..(r + 1) * base.n_obs];
            t.extend(row.iter().zip(&noise).map(|(&p, &q)| (1.0 - beta) * p + beta * q));
        }
        tensors.push(t);
    }
    let mut prng = stream(seed, "ns-fixed-policies", 0, 0);
    let fixed_policies = (1..base.n_agents)
        .map(|_| (0..base.n_obs).map(|_| dirichlet_ones(base.n_actions, &mut prng)).collect())
        .collect();
    Ok(NsGameSpec { base, tensors, beta, fixed_policies })
}

impl NsGameSpec {
    pub fn active_index(round: u64) -> usize {
        (round % NOISE_TENSORS as u64) as usize
    }

    pub fn active_transition(&self, round: u64) -> &[f64] {
        &self.tensors[Self::active_index(round)]
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.tensors.len() != NOISE_TENSORS {
            return Err(Error::shape("non-stationary game needs five blended tensors"));
        }
        for t in &self.tensors {
            if t.len() != self.base.transition.len() {
                return Err(Error::shape("blended tensor has the wrong length"));
            }
            check_row_stochastic(t, self.base.n_obs)?;
        }
        for p in &self.fixed_policies {
            for row in p {
                check_row_stochastic(row, self.base.n_actions)?;
            }
        }
        Ok(())
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.base.checksum().as_bytes());
        h.update(self.beta.to_le_bytes());
        for t in &self.tensors {
            for x in t {
                h.update(x.to_le_bytes());
            }
        }
        for p in &self.fixed_policies {
            for row in p {
                for x in row {
                    h.update(x.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_record(&self) -> NsGameSpecRecord {
        NsGameSpecRecord {
            base: self.base.to_record(),
            beta: self.beta,
            tensors: self.tensors.clone(),
            fixed_policies: self.fixed_policies.clone(),
            checksum: self.checksum(),
        }
    }

    pub fn from_record(rec: &NsGameSpecRecord) -> Result<Self> {
        let spec = Self {
            base: GameSpec::from_record(&rec.base)?,
            tensors: rec.tensors.clone(),
            beta: rec.beta,
            fixed_policies: rec.fixed_policies.clone(),
        };
        spec.validate()?;
        if spec.checksum() != rec.checksum {
            return Err(Error::contract("non-stationary game checksum mismatch"));
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NsGameSpecRecord {
    pub base: GameSpecRecord,
    pub beta: f64,
    pub tensors: Vec<Vec<f64>>,
    pub fixed_policies: Vec<Vec<Vec<f64>>>,
    pub checksum: String,
}

/// Episode driver: one learning agent (index 0), the rest frozen.
#[derive(Debug, Clone)]
pub struct NsGameEnv {
    spec: NsGameSpec,
    round: u64,
    obs: usize,
    t: usize,
}

impl NsGameEnv {
    pub fn new(spec: NsGameSpec) -> Self {
        Self { spec, round: 0, obs: 0, t: 0 }
    }

    pub fn spec(&self) -> &NsGameSpec {
        &self.spec
    }
}

impl Environment for NsGameEnv {
    fn n_agents(&self) -> usize {
        1
    }

    fn obs_space(&self) -> ObsSpace {
        ObsSpace::Discrete(self.spec.base.n_obs)
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(self.spec.base.n_actions)
    }

    fn horizon(&self) -> usize {
        self.spec.base.horizon
    }

    fn begin_round(&mut self, round: u64) {
        self.round = round;
    }

    fn reset(&mut self, rng: &mut Stream) -> Reset {
        self.obs = sample_index(&self.spec.base.initial, rng);
        self.t = 0;
        Reset { observations: vec![one_hot(self.obs, self.spec.base.n_obs)], obs_index: Some(self.obs) }
    }

    fn step(&mut self, actions: &[Action], rng: &mut Stream) -> Result<StepResult> {
        let [Action::Discrete(a0)] = actions else {
            return Err(Error::domain("non-stationary game takes exactly one discrete action"));
        };
        if self.t >= self.spec.base.horizon {
            return Err(Error::contract("step called on a finished episode"));
        }
        let mut joint = vec![*a0];
        for p in &self.spec.fixed_policies {
            joint.push(sample_index(&p[self.obs], rng));
        }
        let base = &self.spec.base;
        let transition = self.spec.active_transition(self.round);
        let (next, reward) = super::tabular::tabular_step(base, transition, self.obs, &joint, rng)?;
        self.obs = next;
        self.t += 1;
        Ok(StepResult {
            observations: vec![one_hot(next, base.n_obs)],
            obs_index: Some(next),
            reward,
            done: self.t == base.horizon,
        })
    }

    fn checksum(&self) -> String {
        self.spec.checksum()
    }

    fn pinned_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.spec.to_record())?)
    }
}

/// Convenience for tests: a uniformly random policy draw.
pub fn random_action<R: Rng + ?Sized>(n: usize, rng: &mut R) -> usize {
    rng.random_range(0..n)
}
