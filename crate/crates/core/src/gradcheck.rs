//! Central finite-difference checks of every analytic gradient in the crate,
//! on small randomly initialized networks in f64.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::envs::{Action, ActionSpace, ObsSpace};
use crate::error::Result;
use crate::model::{EnvModel, LatentKind, ModelHyper, ModelSample};
use crate::nn::Matrix;
use crate::ppo::{AgentPolicy, Batch, PpoHyper};
use crate::rng::{stream, Stream};
use crate::rollout::Transition;

pub const FD_EPS: f64 = 1e-6;
/// Gradients smaller than this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub network: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

type Access<M> = fn(&mut M) -> Vec<&mut [f64]>;

/// Compares `analytic` against central differences of `loss` on up to
/// `per_tensor` randomly chosen entries of each tensor.
fn compare<M: Clone>(
    network: &str,
    base: &M,
    analytic: &[Vec<f64>],
    access: Access<M>,
    loss: &dyn Fn(&M) -> f64,
    per_tensor: usize,
    rng: &mut Stream,
) -> GradReport {
    let mut max_rel_err = 0.0f64;
    let mut checked = 0;
    for (ti, g) in analytic.iter().enumerate() {
        let picks: Vec<usize> = if g.len() <= per_tensor {
            (0..g.len()).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..g.len())).collect()
        };
        for j in picks {
            let mut m = base.clone();
            access(&mut m)[ti][j] += FD_EPS;
            let up = loss(&m);
            access(&mut m)[ti][j] -= 2.0 * FD_EPS;
            let down = loss(&m);
            let numeric = (up - down) / (2.0 * FD_EPS);
            max_rel_err = max_rel_err.max(rel_err(g[j], numeric));
            checked += 1;
        }
    }
    GradReport { network: network.to_string(), max_rel_err, checked }
}

fn normal(rng: &mut Stream) -> f64 {
    rng.sample(StandardNormal)
}

fn random_batch(policy: &AgentPolicy<f64>, obs_dim: usize, n: usize, rng: &mut Stream) -> Result<Batch<f64>> {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..obs_dim).map(|_| normal(rng)).collect()).collect();
    let mut actions = Vec::with_capacity(n);
    let mut old = Vec::with_capacity(n);
    for r in &rows {
        let a = policy.act(r, rng)?;
        // Old log-probs away from the current ones so some ratios clip.
        old.push(a.log_prob + 0.3 * normal(rng));
        actions.push(a.action);
    }
    Ok(Batch {
        obs: Matrix::from_rows(&rows)?,
        actions,
        old_log_probs: old,
        advantages: (0..n).map(|_| normal(rng)).collect(),
        returns: (0..n).map(|_| normal(rng)).collect(),
        old_values: (0..n).map(|_| 0.5 * normal(rng)).collect(),
    })
}

fn actor_tensors(p: &mut AgentPolicy<f64>) -> Vec<&mut [f64]> {
    let mut t = p.actor.tensors_mut();
    t.push(p.log_std.as_mut_slice());
    t
}

fn critic_tensors(p: &mut AgentPolicy<f64>) -> Vec<&mut [f64]> {
    p.critic.tensors_mut()
}

/// Actor (categorical and Gaussian heads) and critic.
pub fn check_policy(seed: u64, per_tensor: usize) -> Result<Vec<GradReport>> {
    let mut rng = stream(seed, "gradcheck-policy", 0, 0);
    let hp = PpoHyper { hidden: vec![7, 6], ..PpoHyper::default() };
    let mut out = Vec::new();
    for (name, space) in
        [("actor-categorical", ActionSpace::Discrete(4)), ("actor-gaussian", ActionSpace::Continuous(2))]
    {
        let mut policy = AgentPolicy::<f64>::new(0, 5, space, &hp, &mut rng)?;
        policy.log_std.iter_mut().for_each(|s| *s = 0.2 * normal(&mut rng));
        let mb = random_batch(&policy, 5, 12, &mut rng)?;
        let g = policy.actor_gradient(&mb, &hp)?;
        let mut analytic: Vec<Vec<f64>> = g.grads.tensors().iter().map(|t| t.to_vec()).collect();
        analytic.push(g.log_std.clone());
        let loss = |p: &AgentPolicy<f64>| p.actor_gradient(&mb, &hp).expect("actor loss").loss;
        out.push(compare(name, &policy, &analytic, actor_tensors, &loss, per_tensor, &mut rng));
        if name == "actor-categorical" {
            let (_, cg) = policy.critic_gradient(&mb, &hp)?;
            let analytic: Vec<Vec<f64>> = cg.tensors().iter().map(|t| t.to_vec()).collect();
            // The reported loss is unscaled; the gradient carries the value coefficient.
            let loss = |p: &AgentPolicy<f64>| hp.value_coef * p.critic_gradient(&mb, &hp).expect("critic loss").0;
            out.push(compare("critic", &policy, &analytic, critic_tensors, &loss, per_tensor, &mut rng));
        }
    }
    Ok(out)
}

fn tiny_hyper(latent: LatentKind) -> ModelHyper {
    ModelHyper {
        l: 3,
        z_dim: 2,
        latent,
        c_obs: 3.0,
        latent_l2: 0.1,
        psi_hidden: vec![5],
        pred_hidden: vec![4],
        trans_hidden: vec![6, 5],
        rew_hidden: vec![6],
        ..ModelHyper::stochastic_game()
    }
}

fn random_transition(obs: ObsSpace, act: ActionSpace, rng: &mut Stream) -> Transition {
    let (o, o2, oi, ni) = match obs {
        ObsSpace::Discrete(n) => {
            let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
            (crate::envs::tabular::one_hot(i, n), crate::envs::tabular::one_hot(j, n), Some(i), Some(j))
        }
        ObsSpace::Continuous(d) => {
            let o: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
            let o2 = o.iter().map(|v| v + 0.3 * normal(rng)).collect();
            (o, o2, None, None)
        }
    };
    let action = match act {
        ActionSpace::Discrete(n) => Action::Discrete(rng.random_range(0..n)),
        ActionSpace::Continuous(d) => Action::Continuous((0..d).map(|_| rng.random_range(-0.9..0.9)).collect()),
    };
    Transition {
        obs: o,
        action,
        next_obs: o2,
        reward: normal(rng),
        log_prob: 0.0,
        value: 0.0,
        done: false,
        obs_index: oi,
        next_index: ni,
        others: None,
    }
}

/// Perturbs every parameter of a fresh model so ReLU units and heads are in
/// generic positions.
fn jitter(model: &mut EnvModel<f64>, rng: &mut Stream) {
    let mut all = model.trans.tensors_mut();
    all.extend(model.reward.tensors_mut());
    all.extend(model.predictor.tensors_mut());
    for p in model.psis.iter_mut() {
        all.extend(p.net.tensors_mut());
    }
    for t in all {
        for v in t.iter_mut() {
            *v += 0.05 * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn trans_tensors(m: &mut EnvModel<f64>) -> Vec<&mut [f64]> {
    m.trans.tensors_mut()
}

fn reward_tensors(m: &mut EnvModel<f64>) -> Vec<&mut [f64]> {
    m.reward.tensors_mut()
}

fn newest_psi_tensors(m: &mut EnvModel<f64>) -> Vec<&mut [f64]> {
    m.psis.back_mut().expect("latent functions").net.tensors_mut()
}

fn predictor_tensors(m: &mut EnvModel<f64>) -> Vec<&mut [f64]> {
    m.predictor.tensors_mut()
}

/// Transition, reward, newest latent function and predictor for one latent
/// kind.
pub fn check_model(seed: u64, latent: LatentKind, per_tensor: usize) -> Result<Vec<GradReport>> {
    let mut rng = stream(seed, "gradcheck-model", 0, latent as u64);
    let (obs, act) = match latent {
        LatentKind::Gaussian => (ObsSpace::Continuous(3), ActionSpace::Continuous(2)),
        _ => (ObsSpace::Discrete(4), ActionSpace::Discrete(2)),
    };
    let hp = tiny_hyper(latent);
    let mut model = EnvModel::<f64>::new(0, obs, act, &hp, &mut rng)?;
    for r in 0..3 {
        model.push_latent(r);
        jitter(&mut model, &mut rng);
    }
    let ts: Vec<Transition> = (0..8).map(|_| random_transition(obs, act, &mut rng)).collect();
    let noise = |rng: &mut Stream| if latent == LatentKind::Gaussian { vec![normal(rng), normal(rng)] } else { vec![] };
    let samples: Vec<ModelSample<'_>> =
        ts.iter().enumerate().map(|(i, t)| ModelSample { slot: i % 3, t, noise: noise(&mut rng) }).collect();
    let obj = model.model_objective(&samples)?;
    let loss = |m: &EnvModel<f64>| m.model_objective(&samples).expect("model loss").total;
    let tag = format!("{latent:?}").to_lowercase();
    let as_vecs = |ts: Vec<&[f64]>| ts.iter().map(|t| t.to_vec()).collect::<Vec<_>>();
    let mut out = vec![
        compare(
            &format!("transition-{tag}"),
            &model,
            &as_vecs(obj.trans.tensors()),
            trans_tensors,
            &loss,
            per_tensor,
            &mut rng,
        ),
        compare(
            &format!("reward-{tag}"),
            &model,
            &as_vecs(obj.reward.tensors()),
            reward_tensors,
            &loss,
            per_tensor,
            &mut rng,
        ),
    ];
    let psi = obj.psi.as_ref().expect("batch touches the newest slot");
    out.push(compare(
        &format!("psi-{tag}"),
        &model,
        &as_vecs(psi.tensors()),
        newest_psi_tensors,
        &loss,
        per_tensor,
        &mut rng,
    ));
    let obs_batch: Vec<Vec<f64>> = ts.iter().map(|t| t.obs.clone()).collect();
    let pnoise: Vec<Vec<f64>> = (0..obs_batch.len()).map(|_| vec![normal(&mut rng), normal(&mut rng)]).collect();
    let (_, pg) = model.predictor_objective(&obs_batch, &pnoise)?;
    let ploss = |m: &EnvModel<f64>| m.predictor_objective(&obs_batch, &pnoise).expect("predictor loss").0;
    out.push(compare(
        &format!("predictor-{tag}"),
        &model,
        &as_vecs(pg.tensors()),
        predictor_tensors,
        &ploss,
        per_tensor,
        &mut rng,
    ));
    Ok(out)
}

/// Every network and head type for one seed.
pub fn check_all(seed: u64, per_tensor: usize) -> Result<Vec<GradReport>> {
    let mut out = check_policy(seed, per_tensor)?;
    for k in [LatentKind::Deterministic, LatentKind::Categorical, LatentKind::Gaussian] {
        out.extend(check_model(seed, k, per_tensor)?);
    }
    Ok(out)
}
