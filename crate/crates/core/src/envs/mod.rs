//! Environments: the seeded tabular stochastic game, its single-agent
//! non-stationary variant, and the two particle tasks.

pub mod nonstationary;
pub mod particle;
pub mod tabular;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

pub use nonstationary::{gen_nonstationary_variant, NsGameEnv, NsGameSpec};
pub use particle::{
    coopnav_reward, fixed_pentagon_policy, particle_step, polygon_reward, ParticleConfig, ParticleEnv, ParticleState,
    ParticleTask,
};
pub use tabular::{gen_stochastic_game, tabular_step, GameSpec, TabularEnv, EPISODE_LEN};

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObsSpace {
    /// Observation index, fed to networks one-hot.
    Discrete(usize),
    Continuous(usize),
}

impl ObsSpace {
    pub fn dim(self) -> usize {
        match self {
            ObsSpace::Discrete(n) | ObsSpace::Continuous(n) => n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionSpace {
    Discrete(usize),
    Continuous(usize),
}

impl ActionSpace {
    pub fn dim(self) -> usize {
        match self {
            ActionSpace::Discrete(n) | ActionSpace::Continuous(n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reset {
    pub observations: Vec<Vec<f64>>,
    pub obs_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    /// One observation per learning agent.
    pub observations: Vec<Vec<f64>>,
    /// Shared discrete observation, for tabular games.
    pub obs_index: Option<usize>,
    pub reward: f64,
    pub done: bool,
}

/// Episodic multi-agent environment with a shared reward. `n_agents` counts
/// only the learning agents; frozen agents live inside the environment.
pub trait Environment: Send {
    fn n_agents(&self) -> usize;
    fn obs_space(&self) -> ObsSpace;
    fn action_space(&self) -> ActionSpace;
    fn horizon(&self) -> usize;
    /// Called once before each policy rollout.
    fn begin_round(&mut self, _round: u64) {}
    fn reset(&mut self, rng: &mut Stream) -> Reset;
    fn step(&mut self, actions: &[Action], rng: &mut Stream) -> Result<StepResult>;
    fn checksum(&self) -> String;
    /// JSON that pins the environment for reruns.
    fn pinned_json(&self) -> Result<String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    StochasticGame,
    Nonstationary,
    Coopnav,
    Polygon,
}

impl EnvKind {
    pub const ALL: [EnvKind; 4] = [EnvKind::StochasticGame, EnvKind::Nonstationary, EnvKind::Coopnav, EnvKind::Polygon];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvKind::StochasticGame => "stochastic-game",
            EnvKind::Nonstationary => "nonstationary",
            EnvKind::Coopnav => "coopnav",
            EnvKind::Polygon => "polygon",
        }
    }

    pub fn is_tabular(self) -> bool {
        matches!(self, EnvKind::StochasticGame | EnvKind::Nonstationary)
    }

    pub fn default_steps_per_round(self) -> usize {
        if self.is_tabular() {
            1600
        } else {
            1280
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::domain(format!("unknown environment '{s}'")))
    }
}

pub fn make_env(kind: EnvKind, seed: u64) -> Result<Box<dyn Environment>> {
    Ok(match kind {
        EnvKind::StochasticGame => Box::new(TabularEnv::new(gen_stochastic_game(seed))),
        EnvKind::Nonstationary => {
            Box::new(NsGameEnv::new(gen_nonstationary_variant(seed, nonstationary::DEFAULT_BETA)?))
        }
        EnvKind::Coopnav => Box::new(ParticleEnv::new(ParticleTask::CoopNav, seed)),
        EnvKind::Polygon => Box::new(ParticleEnv::new(ParticleTask::Polygon, seed)),
    })
}
