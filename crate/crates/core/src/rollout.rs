//! Per-agent experience from one policy rollout round.

use crate::envs::Action;
use crate::error::Result;
use crate::ppo::{Step, Trajectory};

/// One real environment transition as seen by a single agent.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Action,
    pub next_obs: Vec<f64>,
    pub reward: f64,
    pub log_prob: f64,
    pub value: f64,
    pub done: bool,
    pub obs_index: Option<usize>,
    pub next_index: Option<usize>,
    /// Joint action of the other agents, kept only for offline analysis.
    pub others: Option<usize>,
}

/// `D^j`: ordered episodes collected by one agent in round `round`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutBuffer {
    pub round: u64,
    pub episodes: Vec<Vec<Transition>>,
}

impl RolloutBuffer {
    pub fn new(round: u64) -> Self {
        Self { round, episodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.episodes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.episodes.iter().flatten()
    }

    /// Episodes as PPO trajectories; a cut-off final episode bootstraps from
    /// `bootstrap(next_obs)`.
    pub fn to_trajectories(&self, mut bootstrap: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<Trajectory>> {
        let mut out = Vec::with_capacity(self.episodes.len());
        for e in self.episodes.iter().filter(|e| !e.is_empty()) {
            let last = e.last().expect("non-empty episode");
            out.push(Trajectory {
                steps: e.iter().map(to_step).collect(),
                bootstrap: if last.done { 0.0 } else { bootstrap(&last.next_obs)? },
            });
        }
        Ok(out)
    }
}

pub fn to_step(t: &Transition) -> Step {
    Step {
        obs: t.obs.clone(),
        action: t.action.clone(),
        reward: t.reward,
        value: t.value,
        log_prob: t.log_prob,
        done: t.done,
    }
}
