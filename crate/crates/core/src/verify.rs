//! Latent-correspondence check on a small preset game: 3 states, 3 agents
//! with 2 actions each, 4 latent values. Agent 0 learns a latent model from
//! its own experience only; the learned latent should line up one-to-one
//! with the other two agents' joint action.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{latent_correspondence, CorrespondenceMatrices};
use crate::nn::dist::{log_softmax, sample_index, softmax};
use crate::nn::{Activation, Adam, Head, Matrix, Mlp};
use crate::rng::stream;

pub const STATES: usize = 3;
pub const ACTIONS: usize = 2;
pub const OTHERS: usize = 4;
pub const LATENTS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    pub seed: u64,
    pub experiences: usize,
    pub steps: usize,
    pub lr: f64,
    pub restarts: usize,
    pub hidden: usize,
    pub c_obs: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { seed: 0, experiences: 400, steps: 1500, lr: 1e-2, restarts: 4, hidden: 32, c_obs: 1.0 }
    }
}

/// Preset dynamics. The next state depends only on the others' joint action;
/// agent 0's action shifts the reward.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyGame {
    /// `[a0][a_-0]` distribution over next states.
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `[a0][a_-0]`.
    pub reward: Vec<Vec<f64>>,
}

impl Default for VerifyGame {
    fn default() -> Self {
        // Joint actions 0 and 3 share a successor and differ only in reward.
        let successor = [0, 1, 2, 0];
        let transition = (0..ACTIONS)
            .map(|_| {
                (0..OTHERS).map(|j| (0..STATES).map(|s| if s == successor[j] { 1.0 } else { 0.0 }).collect()).collect()
            })
            .collect();
        let reward = (0..ACTIONS).map(|a0| (0..OTHERS).map(|j| 0.2 * a0 as f64 + j as f64 / 3.0).collect()).collect();
        Self { transition, reward }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Experience {
    pub state: usize,
    pub action: usize,
    pub next: usize,
    pub reward: f64,
    /// Joint action of agents 1 and 2, never shown to the learner.
    pub others: usize,
}

/// Experience of agent 0 under uniform policies for all three agents.
pub fn collect(game: &VerifyGame, n: usize, seed: u64) -> Vec<Experience> {
    let mut rng = stream(seed, "verify-data", 0, 0);
    let mut s = rng.random_range(0..STATES);
    (0..n)
        .map(|_| {
            let action = rng.random_range(0..ACTIONS);
            let others = rng.random_range(0..ACTIONS) * ACTIONS + rng.random_range(0..ACTIONS);
            let next = sample_index(&game.transition[action][others], &mut rng);
            let e = Experience { state: s, action, next, reward: game.reward[action][others], others };
            s = next;
            e
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyResult {
    pub matrices: CorrespondenceMatrices,
    pub injective: bool,
    pub argmax: Vec<Option<usize>>,
    pub restart_losses: Vec<f64>,
    pub best_restart: usize,
    pub loss_trace: Vec<f64>,
}

struct Fit {
    loss: f64,
    table: Vec<Vec<f64>>,
    trace: Vec<f64>,
}

/// Model input for agent 0: its action and the latent. The state is left
/// out so the correspondence cannot depend on it.
fn input_rows(data: &[Experience]) -> Matrix<f64> {
    let mut m = Matrix::zeros(data.len() * LATENTS, ACTIONS + LATENTS);
    for (b, e) in data.iter().enumerate() {
        for z in 0..LATENTS {
            let row = m.row_mut(b * LATENTS + z);
            row[e.action] = 1.0;
            row[ACTIONS + z] = 1.0;
        }
    }
    m
}

/// Marginal objective `Σ_z q_z (R_z - r)^2 - c·ln Σ_z q_z P(s'|a,z)` and its
/// gradients w.r.t. the table logits and both networks.
fn objective(
    data: &[Experience],
    x: &Matrix<f64>,
    table: &[Vec<f64>],
    p: &Mlp<f64>,
    r: &Mlp<f64>,
    c: f64,
) -> Result<(f64, Vec<Vec<f64>>, crate::nn::Gradients<f64>, crate::nn::Gradients<f64>)> {
    let n = data.len() as f64;
    let pt = p.forward_batch(x)?;
    let rt = r.forward_batch(x)?;
    let mut pg = Matrix::zeros(x.rows(), STATES);
    let mut rg = Matrix::zeros(x.rows(), 1);
    let mut dtable = vec![vec![0.0; LATENTS]; data.len()];
    let mut loss = 0.0;
    for (b, e) in data.iter().enumerate() {
        let q = softmax(&table[b])?;
        let mut lps = [0.0; LATENTS];
        let mut errs = [0.0; LATENTS];
        let mut ls_all = Vec::with_capacity(LATENTS);
        for z in 0..LATENTS {
            let row = b * LATENTS + z;
            let ls = log_softmax(pt.output().row(row))?;
            lps[z] = q[z].ln() + ls[e.next];
            errs[z] = rt.output().get(row, 0) - e.reward;
            ls_all.push(ls);
        }
        let mx = lps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + lps.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
        let e_sq: f64 = (0..LATENTS).map(|z| q[z] * errs[z] * errs[z]).sum();
        loss += (e_sq - c * lse) / n;
        for z in 0..LATENTS {
            let w = (lps[z] - lse).exp();
            let row = b * LATENTS + z;
            for (s, g) in pg.row_mut(row).iter_mut().enumerate() {
                let onehot = if s == e.next { 1.0 } else { 0.0 };
                *g = -c * w * (onehot - ls_all[z][s].exp()) / n;
            }
            rg.set(row, 0, q[z] * 2.0 * errs[z] / n);
            dtable[b][z] = (c * (q[z] - w) + q[z] * (errs[z] * errs[z] - e_sq)) / n;
        }
    }
    let mut pgr = p.zero_grads();
    let mut rgr = r.zero_grads();
    p.backward_batch(&pt, &pg, &mut pgr, false)?;
    r.backward_batch(&rt, &rg, &mut rgr, false)?;
    Ok((loss, dtable, pgr, rgr))
}

fn fit(data: &[Experience], cfg: &VerifyConfig, restart: usize) -> Result<Fit> {
    let mut rng = stream(cfg.seed, "verify-init", 0, restart as u64);
    let mut table: Vec<Vec<f64>> =
        (0..data.len()).map(|_| (0..LATENTS).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect()).collect();
    let mut p =
        Mlp::<f64>::with_hidden(ACTIONS + LATENTS, &[cfg.hidden], STATES, Activation::Relu, Head::Softmax, &mut rng)?;
    let mut r = Mlp::<f64>::with_hidden(ACTIONS + LATENTS, &[cfg.hidden], 1, Activation::Relu, Head::Linear, &mut rng)?;
    let mut p_opt = Adam::for_tensors(cfg.lr, &p.tensors());
    let mut r_opt = Adam::for_tensors(cfg.lr, &r.tensors());
    let mut t_opt = Adam::for_tensors(cfg.lr * 10.0, &table.iter().map(Vec::as_slice).collect::<Vec<_>>());
    let (p_names, r_names) = (p.tensor_names("verify.p."), r.tensor_names("verify.r."));
    let t_names: Vec<String> = (0..table.len()).map(|i| format!("verify.psi.{i}")).collect();
    let x = input_rows(data);
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut loss = f64::INFINITY;
    for _ in 0..cfg.steps {
        let (l, dt, pg, rg) = objective(data, &x, &table, &p, &r, cfg.c_obs)?;
        if !l.is_finite() {
            return Err(Error::numeric(
                "verify.loss",
                format!("diverged; trace tail {:?}", &trace[trace.len().saturating_sub(5)..]),
            ));
        }
        trace.push(l);
        loss = l;
        p_opt.step(&mut p.tensors_mut(), &pg.tensors(), &p_names)?;
        r_opt.step(&mut r.tensors_mut(), &rg.tensors(), &r_names)?;
        let mut tt: Vec<&mut [f64]> = table.iter_mut().map(Vec::as_mut_slice).collect();
        t_opt.step(&mut tt, &dt.iter().map(Vec::as_slice).collect::<Vec<_>>(), &t_names)?;
    }
    Ok(Fit { loss, table, trace })
}

/// Trains from `restarts` initializations, keeps the lowest final loss,
/// samples `z` for every experience and tabulates the correspondence.
pub fn run_verify(cfg: &VerifyConfig) -> Result<VerifyResult> {
    if cfg.experiences == 0 || cfg.steps == 0 || cfg.restarts == 0 || cfg.hidden == 0 {
        return Err(Error::domain("verify needs positive experiences, steps, restarts and hidden width"));
    }
    if !(cfg.lr > 0.0 && cfg.c_obs > 0.0) {
        return Err(Error::domain("verify needs positive lr and c_obs"));
    }
    let game = VerifyGame::default();
    let data = collect(&game, cfg.experiences, cfg.seed);
    let mut fits = Vec::with_capacity(cfg.restarts);
    for i in 0..cfg.restarts {
        fits.push(fit(&data, cfg, i)?);
    }
    let restart_losses: Vec<f64> = fits.iter().map(|f| f.loss).collect();
    let best_restart =
        (0..fits.len()).min_by(|&a, &b| restart_losses[a].total_cmp(&restart_losses[b])).expect("restarts > 0");
    let best = fits.swap_remove(best_restart);
    let mut rng = stream(cfg.seed, "verify-sample", 0, 0);
    let mut z = Vec::with_capacity(data.len());
    for row in &best.table {
        z.push(sample_index(&softmax(row)?, &mut rng));
    }
    let labels: Vec<Option<usize>> = data.iter().map(|e| Some(e.others)).collect();
    let matrices = latent_correspondence(&z, &labels, LATENTS, OTHERS)?;
    Ok(VerifyResult {
        injective: matrices.is_injective(),
        argmax: matrices.argmax_map(),
        matrices,
        restart_losses,
        best_restart,
        loss_trace: best.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn game_rows_are_distributions() {
        let g = VerifyGame::default();
        for a in &g.transition {
            for row in a {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let d = collect(&g, 100, 3);
        assert_eq!(d, collect(&g, 100, 3));
        assert!(d.iter().all(|e| e.others < OTHERS && e.next < STATES));
    }

    #[test]
    fn table_gradient_matches_finite_differences() {
        let cfg = VerifyConfig { experiences: 6, hidden: 5, ..Default::default() };
        let data = collect(&VerifyGame::default(), cfg.experiences, 1);
        let mut rng = stream(0, "t", 0, 0);
        let table: Vec<Vec<f64>> = (0..6).map(|_| (0..LATENTS).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let p = Mlp::<f64>::with_hidden(6, &[5], STATES, Activation::Relu, Head::Softmax, &mut rng).unwrap();
        let r = Mlp::<f64>::with_hidden(6, &[5], 1, Activation::Relu, Head::Linear, &mut rng).unwrap();
        let x = input_rows(&data);
        let (_, dt, _, _) = objective(&data, &x, &table, &p, &r, 2.0).unwrap();
        let eps = 1e-6;
        for b in 0..6 {
            for z in 0..LATENTS {
                let mut t = table.clone();
                t[b][z] += eps;
                let up = objective(&data, &x, &t, &p, &r, 2.0).unwrap().0;
                t[b][z] -= 2.0 * eps;
                let dn = objective(&data, &x, &t, &p, &r, 2.0).unwrap().0;
                let fd = (up - dn) / (2.0 * eps);
                assert!((fd - dt[b][z]).abs() < 1e-7, "{fd} vs {}", dt[b][z]);
            }
        }
    }
}
