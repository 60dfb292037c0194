//! Outer training loop for MDPO, MDPO without latent prediction, and IPPO.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::envs::{make_env, Action, ActionSpace, EnvKind, Environment, ObsSpace};
use crate::error::{Error, Result};
use crate::metrics::{self, AgentLosses, MetricsRecord, VisitationVector, XentKind};
use crate::model::{branched_rollout, shift_latents, EnvModel, LatentKind, ModelBuffer, ModelHyper};
use crate::ppo::{AgentPolicy, PpoHyper, Trajectory};
use crate::rng::{stream, Stream};
use crate::rollout::{RolloutBuffer, Transition};
use crate::scalar::Scalar;

/// Agent `i` draws from `seed + (i + 1) * AGENT_SEED_STRIDE`.
pub const AGENT_SEED_STRIDE: u64 = 1_000_003;

pub fn agent_seed(master: u64, agent: usize) -> u64 {
    master.wrapping_add(AGENT_SEED_STRIDE.wrapping_mul(agent as u64 + 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Mdpo,
    MdpoNopred,
    Ippo,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Mdpo, Algorithm::MdpoNopred, Algorithm::Ippo];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Mdpo => "mdpo",
            Algorithm::MdpoNopred => "mdpo-nopred",
            Algorithm::Ippo => "ippo",
        }
    }

    pub fn model_based(self) -> bool {
        self != Algorithm::Ippo
    }

    pub fn uses_prediction(self) -> bool {
        self == Algorithm::Mdpo
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::domain(format!("unknown algorithm '{s}' (expected mdpo, mdpo-nopred or ippo)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::domain(format!("unknown precision '{s}' (expected f32 or f64)"))),
        }
    }
}

/// Model settings for each task.
pub fn default_model_hyper(env: EnvKind) -> ModelHyper {
    match env {
        EnvKind::StochasticGame => ModelHyper::stochastic_game(),
        EnvKind::Nonstationary => ModelHyper { latent: LatentKind::Categorical, ..ModelHyper::stochastic_game() },
        EnvKind::Coopnav => ModelHyper::particle(1.0),
        EnvKind::Polygon => ModelHyper::particle(100.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub env: EnvKind,
    pub env_seed: u64,
    pub seed: u64,
    pub rounds: u64,
    pub steps_per_round: usize,
    pub precision: Precision,
    pub ppo: PpoHyper,
    pub model: ModelHyper,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn new(algorithm: Algorithm, env: EnvKind, seed: u64, rounds: u64, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            algorithm,
            env,
            env_seed: 0,
            seed,
            rounds,
            steps_per_round: env.default_steps_per_round(),
            precision: Precision::F64,
            ppo: PpoHyper::default(),
            model: default_model_hyper(env),
            out_dir: out_dir.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps_per_round == 0 || !self.steps_per_round.is_multiple_of(crate::envs::EPISODE_LEN) {
            return Err(Error::domain(format!(
                "steps_per_round = {} must be a positive multiple of the episode length {}",
                self.steps_per_round,
                crate::envs::EPISODE_LEN
            )));
        }
        self.ppo.validate()?;
        self.model.validate()
    }

    /// Branched trajectories per round, matching the real data volume.
    pub fn branched_per_round(&self) -> usize {
        self.steps_per_round / (self.model.h + self.model.k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Rollout,
    Probe,
    TrainModel,
    TrainPredictor,
    BranchedRollout,
    PpoUpdate,
    Shift,
    Metrics,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Rollout => "rollout",
            Stage::Probe => "probe",
            Stage::TrainModel => "train-model",
            Stage::TrainPredictor => "train-predictor",
            Stage::BranchedRollout => "branched-rollout",
            Stage::PpoUpdate => "ppo-update",
            Stage::Shift => "shift",
            Stage::Metrics => "metrics",
        }
    }

    fn rank(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEvent {
    pub round: u64,
    pub stage: Stage,
    pub agent: Option<usize>,
}

impl fmt::Display for StageEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.agent {
            Some(a) => write!(f, "{} {} agent{}", self.round, self.stage.as_str(), a),
            None => write!(f, "{} {}", self.round, self.stage.as_str()),
        }
    }
}

/// Checks each round against the pipeline order: rollout, then per agent
/// probe, model, predictor, branched rollout, PPO, shift, then metrics.
pub fn check_stage_order(log: &[StageEvent], algorithm: Algorithm, n_agents: usize) -> Result<()> {
    let mut rounds: Vec<u64> = log.iter().map(|e| e.round).collect();
    rounds.dedup();
    for w in rounds.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::contract(format!("round {} logged after round {}", w[1], w[0])));
        }
    }
    for r in rounds {
        let events: Vec<&StageEvent> = log.iter().filter(|e| e.round == r).collect();
        if events.first().map(|e| e.stage) != Some(Stage::Rollout)
            || events.last().map(|e| e.stage) != Some(Stage::Metrics)
        {
            return Err(Error::contract(format!("round {r} must start with the rollout and end with metrics")));
        }
        for a in 0..n_agents {
            let stages: Vec<Stage> = events.iter().filter(|e| e.agent == Some(a)).map(|e| e.stage).collect();
            if stages.windows(2).any(|w| w[1].rank() <= w[0].rank()) {
                return Err(Error::contract(format!("round {r} agent {a}: stages out of order: {stages:?}")));
            }
            if !stages.contains(&Stage::PpoUpdate) {
                return Err(Error::contract(format!("round {r} agent {a}: no PPO update")));
            }
            let model_stages =
                [Stage::Probe, Stage::TrainModel, Stage::TrainPredictor, Stage::BranchedRollout, Stage::Shift];
            match algorithm {
                Algorithm::Ippo if stages.iter().any(|s| model_stages.contains(s)) => {
                    return Err(Error::contract(format!("round {r} agent {a}: model stage in an IPPO run")));
                }
                Algorithm::MdpoNopred if stages.contains(&Stage::TrainPredictor) => {
                    return Err(Error::contract(format!("round {r} agent {a}: predictor trained without prediction")));
                }
                Algorithm::Mdpo | Algorithm::MdpoNopred
                    if !stages.contains(&Stage::TrainModel) || !stages.contains(&Stage::Shift) =>
                {
                    return Err(Error::contract(format!("round {r} agent {a}: model stages missing")));
                }
                _ => {}
            }
        }
    }
    Ok(())
}

/// Everything one agent owns. Nothing here is shared between agents.
#[derive(Debug, Clone)]
pub struct AgentState<T> {
    pub index: usize,
    pub seed: u64,
    pub policy: AgentPolicy<T>,
    pub model: Option<EnvModel<T>>,
    pub buffer: Option<ModelBuffer>,
    prev_visitation: Option<VisitationVector>,
}

/// What one agent's update produced this round.
#[derive(Debug, Clone, Default)]
struct AgentRound {
    losses: AgentLosses,
    visitation_l1: Option<f64>,
    probe: Option<metrics::PredictionError>,
    model_steps: usize,
}

pub struct RunState<T> {
    pub env: Box<dyn Environment>,
    pub agents: Vec<AgentState<T>>,
    pub round: u64,
    pub records: Vec<MetricsRecord>,
    pub env_steps: u64,
    pub model_steps: u64,
    pub stage_log: Vec<StageEvent>,
    pub xent_kind: Option<XentKind>,
}

impl<T: Scalar> RunState<T> {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let env = make_env(cfg.env, cfg.env_seed)?;
        if env.horizon() != crate::envs::EPISODE_LEN {
            return Err(Error::contract("environment horizon differs from the episode length"));
        }
        let mut agents = Vec::with_capacity(env.n_agents());
        for i in 0..env.n_agents() {
            let seed = agent_seed(cfg.seed, i);
            let mut rng = stream(seed, "init", i as u64, 0);
            let policy = AgentPolicy::new(i, env.obs_space().dim(), env.action_space(), &cfg.ppo, &mut rng)?;
            let (model, buffer) = if cfg.algorithm.model_based() {
                let m = EnvModel::new(i, env.obs_space(), env.action_space(), &cfg.model, &mut rng)?;
                (Some(m), Some(ModelBuffer::new(cfg.model.l)))
            } else {
                (None, None)
            };
            agents.push(AgentState { index: i, seed, policy, model, buffer, prev_visitation: None });
        }
        let state = Self {
            env,
            agents,
            round: 0,
            records: Vec::new(),
            env_steps: 0,
            model_steps: 0,
            stage_log: Vec::new(),
            xent_kind: None,
        };
        state.audit_decentralization()?;
        Ok(state)
    }

    fn log(&mut self, stage: Stage, agent: Option<usize>) {
        self.stage_log.push(StageEvent { round: self.round, stage, agent });
    }

    /// No two agents share a parameter buffer, and each agent's state is
    /// tagged with its own index.
    pub fn audit_decentralization(&self) -> Result<()> {
        let mut ranges: Vec<(usize, usize, usize)> = Vec::new();
        for a in &self.agents {
            if a.policy.agent != a.index || a.model.as_ref().is_some_and(|m| m.agent() != a.index) {
                return Err(Error::contract(format!("agent {} holds state tagged for another agent", a.index)));
            }
            let mut own = a.policy.buffer_ranges();
            if let Some(m) = &a.model {
                own.extend(m.buffer_ranges());
            }
            ranges.extend(own.into_iter().filter(|(s, e)| e > s).map(|(s, e)| (s, e, a.index)));
        }
        ranges.sort_unstable();
        for w in ranges.windows(2) {
            if w[1].0 < w[0].1 && w[0].2 != w[1].2 {
                return Err(Error::contract(format!("agents {} and {} share parameter memory", w[0].2, w[1].2)));
            }
        }
        Ok(())
    }

    /// Real environment interaction: every agent acts on its own observation.
    pub fn policy_rollout(&mut self, cfg: &RunConfig) -> Result<(Vec<RolloutBuffer>, f64)> {
        let round = self.round;
        let n = self.agents.len();
        self.env.begin_round(round);
        let mut env_rng = stream(cfg.seed, "env", 0, round);
        let mut act_rngs: Vec<Stream> =
            self.agents.iter().map(|a| stream(a.seed, "act", a.index as u64, round)).collect();
        let horizon = self.env.horizon();
        let n_actions = match self.env.action_space() {
            ActionSpace::Discrete(k) => Some(k),
            ActionSpace::Continuous(_) => None,
        };
        let mut buffers: Vec<RolloutBuffer> = (0..n).map(|_| RolloutBuffer::new(round)).collect();
        let mut returns = Vec::new();
        let mut steps = 0usize;
        while steps < cfg.steps_per_round {
            let reset = self.env.reset(&mut env_rng);
            let mut obs = reset.observations;
            let mut index = reset.obs_index;
            let mut episodes: Vec<Vec<Transition>> = vec![Vec::with_capacity(horizon); n];
            let mut ret = 0.0;
            for _ in 0..horizon {
                let mut outs = Vec::with_capacity(n);
                for (a, rng) in self.agents.iter().zip(act_rngs.iter_mut()) {
                    outs.push(a.policy.act(&obs[a.index], rng).map_err(|e| e.in_stage("rollout", a.index))?);
                }
                let actions: Vec<Action> = outs.iter().map(|o| o.action.clone()).collect();
                let res = self.env.step(&actions, &mut env_rng).map_err(|e| e.in_stage("rollout", 0))?;
                steps += 1;
                ret += res.reward;
                for (i, out) in outs.into_iter().enumerate() {
                    let others = match n_actions {
                        Some(k) if n > 1 => Some(
                            actions
                                .iter()
                                .enumerate()
                                .filter(|(j, _)| *j != i)
                                .fold(0, |acc, (_, a)| acc * k + if let Action::Discrete(x) = a { *x } else { 0 }),
                        ),
                        _ => None,
                    };
                    episodes[i].push(Transition {
                        obs: std::mem::take(&mut obs[i]),
                        action: out.action,
                        next_obs: res.observations[i].clone(),
                        reward: res.reward,
                        log_prob: out.log_prob,
                        value: out.value,
                        done: res.done,
                        obs_index: index,
                        next_index: res.obs_index,
                        others,
                    });
                }
                obs = res.observations;
                index = res.obs_index;
                if res.done || steps >= cfg.steps_per_round {
                    break;
                }
            }
            returns.push(ret);
            for (b, ep) in buffers.iter_mut().zip(episodes) {
                b.episodes.push(ep);
            }
        }
        self.env_steps += steps as u64;
        let mean = returns.iter().sum::<f64>() / returns.len() as f64;
        Ok((buffers, mean))
    }

    /// One agent's model stages and PPO update. Reads only this agent's
    /// state and this agent's rollout.
    fn update_agent(
        agent: &mut AgentState<T>,
        data: RolloutBuffer,
        cfg: &RunConfig,
        round: u64,
        obs_space: ObsSpace,
        horizon: usize,
        log: &mut Vec<StageEvent>,
    ) -> Result<AgentRound> {
        let i = agent.index;
        let mut out = AgentRound::default();
        let mut event = |stage: Stage| log.push(StageEvent { round, stage, agent: Some(i) });
        let mut training: Vec<Trajectory> = Vec::new();
        let mut used_real = true;
        if let (Some(model), Some(buffer)) = (agent.model.as_mut(), agent.buffer.as_mut()) {
            if model.is_trained() {
                event(Stage::Probe);
                out.probe = Some(
                    metrics::prediction_error(model, &data, cfg.algorithm.uses_prediction())
                        .map_err(|e| e.in_stage("probe", i))?,
                );
            }
            buffer.push(data.clone()).map_err(|e| e.in_stage("train-model", i))?;
            event(Stage::TrainModel);
            let mut rng = stream(agent.seed, "model", i as u64, round);
            let rep = model.train_model(buffer, &mut rng).map_err(|e| e.in_stage("train-model", i))?;
            out.losses.model_loss = Some(rep.last_loss);
            if cfg.algorithm.uses_prediction() && model.psis.len() >= 2 {
                event(Stage::TrainPredictor);
                let mut rng = stream(agent.seed, "predictor", i as u64, round);
                let newest = buffer.newest().expect("just pushed");
                let rep = model.train_predictor(newest, &mut rng).map_err(|e| e.in_stage("train-predictor", i))?;
                out.losses.predictor_loss = Some(rep.last_loss);
            }
            if buffer.len() >= 2 {
                event(Stage::BranchedRollout);
                let mut rng = stream(agent.seed, "branch", i as u64, round);
                let br = branched_rollout(
                    model,
                    buffer.newest().expect("just pushed"),
                    &agent.policy,
                    cfg.model.h,
                    cfg.model.k,
                    cfg.branched_per_round(),
                    horizon,
                    cfg.algorithm.uses_prediction(),
                    &mut rng,
                )
                .map_err(|e| e.in_stage("branched-rollout", i))?;
                out.model_steps = br.model_steps;
                training = br.trajectories;
                used_real = false;
            }
        }
        if used_real {
            let policy = &agent.policy;
            training = data.to_trajectories(|o| policy.value(o)).map_err(|e| e.in_stage("ppo-update", i))?;
        }
        if let ObsSpace::Discrete(n_obs) = obs_space {
            let vis = metrics::training_visitation(
                training.iter().flat_map(|t| t.steps.iter().map(|s| s.obs.as_slice())),
                n_obs,
            )
            .map_err(|e| e.in_stage("metrics", i))?;
            if let Some(prev) = &agent.prev_visitation {
                out.visitation_l1 = Some(metrics::visitation_l1(prev, &vis)?);
            }
            agent.prev_visitation = Some(vis);
        }
        event(Stage::PpoUpdate);
        let mut rng = stream(agent.seed, "ppo", i as u64, round);
        let rep = agent.policy.ppo_update(&training, &cfg.ppo, &mut rng).map_err(|e| e.in_stage("ppo-update", i))?;
        out.losses.policy_loss = rep.policy_loss;
        out.losses.value_loss = rep.value_loss;
        if let (Some(model), Some(buffer)) = (agent.model.as_mut(), agent.buffer.as_mut()) {
            event(Stage::Shift);
            shift_latents(model, buffer);
        }
        Ok(out)
    }

    /// One round: policy rollout, per-agent model stages and PPO update,
    /// buffer shift, metrics.
    pub fn run_round(&mut self, cfg: &RunConfig) -> Result<MetricsRecord> {
        self.log(Stage::Rollout, None);
        let (buffers, mean_return) = self.policy_rollout(cfg)?;
        let round = self.round;
        let obs_space = self.env.obs_space();
        let horizon = self.env.horizon();
        let mut results = Vec::with_capacity(self.agents.len());
        let mut log = Vec::new();
        for (agent, data) in self.agents.iter_mut().zip(buffers) {
            results.push(Self::update_agent(agent, data, cfg, round, obs_space, horizon, &mut log)?);
        }
        self.stage_log.extend(log);
        self.log(Stage::Metrics, None);
        let n = results.len() as f64;
        let avg = |f: &dyn Fn(&AgentRound) -> Option<f64>| {
            let vals: Vec<f64> = results.iter().filter_map(f).collect();
            (vals.len() == results.len() && !vals.is_empty()).then(|| vals.iter().sum::<f64>() / n)
        };
        let rec = MetricsRecord {
            round,
            mean_return,
            visitation_l1: avg(&|r| r.visitation_l1),
            xent: avg(&|r| r.probe.map(|p| p.xent)),
            reward_l1: avg(&|r| r.probe.map(|p| p.reward_l1)),
            agents: results.iter().map(|r| r.losses.clone()).collect(),
        };
        if let Some(p) = results.iter().find_map(|r| r.probe) {
            self.xent_kind = Some(p.kind);
        }
        self.model_steps += results.iter().map(|r| r.model_steps as u64).sum::<u64>();
        rec.check_finite()?;
        self.records.push(rec.clone());
        self.round += 1;
        Ok(rec)
    }
}

/// Summary written next to the metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub env_checksum: String,
    pub rounds_completed: u64,
    pub env_steps: u64,
    pub model_steps: u64,
    pub xent_kind: Option<XentKind>,
    pub decentralization_audit: String,
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_metrics(dir: &Path, n_agents: usize, records: &[MetricsRecord]) -> Result<()> {
    let path = dir.join("metrics.csv");
    let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    metrics::write_metrics_csv(std::io::BufWriter::new(f), n_agents, records)
}

fn write_checkpoints<T: Scalar>(dir: &Path, state: &RunState<T>) -> Result<()> {
    let ck = dir.join("checkpoints");
    fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
    for a in &state.agents {
        write(
            &ck.join(format!("agent{}_policy.json", a.index)),
            serde_json::to_string(&a.policy.to_checkpoint())?.as_bytes(),
        )?;
        if let Some(m) = &a.model {
            write(
                &ck.join(format!("agent{}_model.json", a.index)),
                serde_json::to_string(&m.to_checkpoint())?.as_bytes(),
            )?;
        }
    }
    Ok(())
}

/// Runs `cfg.rounds` rounds and writes the run directory:
/// `run.json`, `env.json`, `metrics.csv`, `stages.log` and `checkpoints/`.
pub fn train_with<T: Scalar>(cfg: &RunConfig) -> Result<RunState<T>> {
    cfg.validate()?;
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut state = RunState::<T>::new(cfg)?;
    write(&dir.join("env.json"), state.env.pinned_json()?.as_bytes())?;
    let summary = |s: &RunState<T>, audit: &str| RunSummary {
        config: cfg.clone(),
        env_checksum: s.env.checksum(),
        rounds_completed: s.round,
        env_steps: s.env_steps,
        model_steps: s.model_steps,
        xent_kind: s.xent_kind,
        decentralization_audit: audit.to_string(),
    };
    write(&dir.join("run.json"), serde_json::to_string_pretty(&summary(&state, "pending"))?.as_bytes())?;
    let n_agents = state.agents.len();
    for _ in 0..cfg.rounds {
        let rec = state.run_round(cfg)?;
        log::info!(
            "{} {} seed {} round {}: return {:.4}",
            cfg.algorithm,
            cfg.env,
            cfg.seed,
            rec.round,
            rec.mean_return
        );
        write_metrics(dir, n_agents, &state.records)?;
    }
    write_metrics(dir, n_agents, &state.records)?;
    check_stage_order(&state.stage_log, cfg.algorithm, n_agents)?;
    state.audit_decentralization()?;
    let log: String = state.stage_log.iter().map(|e| format!("{e}\n")).collect();
    write(&dir.join("stages.log"), log.as_bytes())?;
    write_checkpoints(dir, &state)?;
    write(&dir.join("run.json"), serde_json::to_string_pretty(&summary(&state, "pass"))?.as_bytes())?;
    Ok(state)
}

/// Result of a finished run, independent of precision.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub records: Vec<MetricsRecord>,
    pub env_steps: u64,
    pub model_steps: u64,
    pub stage_log: Vec<StageEvent>,
}

pub fn train(cfg: &RunConfig) -> Result<RunOutcome> {
    fn outcome<T: Scalar>(s: RunState<T>) -> RunOutcome {
        RunOutcome { records: s.records, env_steps: s.env_steps, model_steps: s.model_steps, stage_log: s.stage_log }
    }
    match cfg.precision {
        Precision::F32 => train_with::<f32>(cfg).map(outcome),
        Precision::F64 => train_with::<f64>(cfg).map(outcome),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(algorithm: Algorithm, env: EnvKind, dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::new(algorithm, env, 3, 3, dir);
        cfg.steps_per_round = 240;
        cfg.model.l = 3;
        cfg.model.model_steps = 5;
        cfg.model.predictor_steps = 5;
        cfg.ppo.epochs = 1;
        cfg
    }

    #[test]
    fn algorithm_tags_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.as_str().parse::<Algorithm>().unwrap(), a);
        }
        assert!("trpo".parse::<Algorithm>().is_err());
        assert_ne!(agent_seed(0, 0), agent_seed(0, 1));
    }

    #[test]
    fn rounds_follow_the_pipeline() {
        let tmp = tempfile::tempdir().unwrap();
        for algo in Algorithm::ALL {
            let cfg = small(algo, EnvKind::StochasticGame, &tmp.path().join(algo.as_str()));
            let mut state = RunState::<f64>::new(&cfg).unwrap();
            for r in 0..4 {
                let rec = state.run_round(&cfg).unwrap();
                assert_eq!(rec.round, r);
                assert_eq!(rec.agents.len(), 3);
                assert_eq!(rec.agents[0].model_loss.is_some(), algo.model_based());
                assert_eq!(rec.xent.is_some(), algo.model_based() && r >= 1);
                assert_eq!(rec.visitation_l1.is_some(), r >= 1);
            }
            assert_eq!(state.env_steps, 4 * 240);
            check_stage_order(&state.stage_log, algo, 3).unwrap();
            if let Some(buf) = &state.agents[0].buffer {
                let rounds: Vec<u64> = buf.slots().map(|s| s.round).collect();
                assert_eq!(rounds, vec![2, 3]);
                assert_eq!(state.agents[0].model.as_ref().unwrap().psi_tags(), rounds);
                assert_eq!(state.model_steps, 3 * 3 * (240 / 12) as u64 * 4);
            }
            state.audit_decentralization().unwrap();
        }
    }

    #[test]
    fn stage_order_violations_are_detected() {
        let ev = |stage, agent| StageEvent { round: 0, stage, agent };
        let good = vec![ev(Stage::Rollout, None), ev(Stage::PpoUpdate, Some(0)), ev(Stage::Metrics, None)];
        check_stage_order(&good, Algorithm::Ippo, 1).unwrap();
        let bad = vec![
            ev(Stage::Rollout, None),
            ev(Stage::PpoUpdate, Some(0)),
            ev(Stage::TrainModel, Some(0)),
            ev(Stage::Shift, Some(0)),
            ev(Stage::Metrics, None),
        ];
        assert!(check_stage_order(&bad, Algorithm::Mdpo, 1).is_err());
        let leaked = vec![
            ev(Stage::Rollout, None),
            ev(Stage::TrainModel, Some(0)),
            ev(Stage::PpoUpdate, Some(0)),
            ev(Stage::Metrics, None),
        ];
        assert!(check_stage_order(&leaked, Algorithm::Ippo, 1).is_err());
    }

    #[test]
    fn zero_rounds_writes_initial_artifacts() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = RunConfig { rounds: 0, ..small(Algorithm::Mdpo, EnvKind::StochasticGame, tmp.path()) };
        let out = train(&cfg).unwrap();
        assert!(out.records.is_empty());
        for f in
            ["env.json", "run.json", "metrics.csv", "checkpoints/agent0_policy.json", "checkpoints/agent2_model.json"]
        {
            assert!(tmp.path().join(f).exists(), "{f}");
        }
    }

    #[test]
    fn particle_and_nonstationary_rounds_run() {
        let tmp = tempfile::tempdir().unwrap();
        for env in [EnvKind::Nonstationary, EnvKind::Coopnav, EnvKind::Polygon] {
            let mut cfg = small(Algorithm::Mdpo, env, tmp.path());
            cfg.precision = Precision::F32;
            let mut state = RunState::<f32>::new(&cfg).unwrap();
            for _ in 0..3 {
                let rec = state.run_round(&cfg).unwrap();
                assert_eq!(rec.visitation_l1.is_some(), env.is_tabular() && rec.round > 0);
            }
        }
    }
}
