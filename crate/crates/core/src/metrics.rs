//! Run diagnostics: returns, visitation divergence, model prediction error,
//! latent correspondence and the soft-update gap.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::tabular::GameSpec;
use crate::error::{Error, Result};
use crate::model::{EnvModel, NextDist};
use crate::nn::dist::gaussian_logprob;
use crate::rng::Stream;
use crate::rollout::RolloutBuffer;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Counts divided by their total.
    Empirical,
    /// `Σ_t γ^t ρ_t`, total mass `Σ_t γ^t`.
    Discounted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitationVector {
    pub freq: Vec<f64>,
    pub normalization: Normalization,
}

/// Normalized observation counts over every index in `visits`.
pub fn empirical_visitation(visits: &[usize], n_obs: usize) -> Result<VisitationVector> {
    if visits.is_empty() {
        return Err(Error::domain("no observations to count"));
    }
    let mut freq = vec![0.0; n_obs];
    for &o in visits {
        *freq.get_mut(o).ok_or_else(|| Error::domain(format!("observation {o} outside [0, {n_obs})")))? += 1.0;
    }
    let n = visits.len() as f64;
    freq.iter_mut().for_each(|f| *f /= n);
    Ok(VisitationVector { freq, normalization: Normalization::Empirical })
}

/// Observation index of a one-hot tabular observation.
pub fn obs_index(obs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in obs.iter().enumerate() {
        if *v > obs[best] {
            best = i;
        }
    }
    best
}

pub fn visitation_l1(a: &VisitationVector, b: &VisitationVector) -> Result<f64> {
    if a.normalization != b.normalization {
        return Err(Error::contract("visitation vectors use different normalizations"));
    }
    if a.freq.len() != b.freq.len() {
        return Err(Error::shape("visitation vectors cover different observation spaces"));
    }
    Ok(a.freq.iter().zip(&b.freq).map(|(x, y)| (x - y).abs()).sum())
}

/// `ρ = Σ_{t<horizon} γ^t ρ_t` by exact propagation under the joint policy.
/// `policies[i][o]` is agent `i`'s action distribution at observation `o`.
pub fn exact_visitation(
    spec: &GameSpec,
    policies: &[Vec<Vec<f64>>],
    gamma: f64,
    horizon: usize,
) -> Result<VisitationVector> {
    if horizon < 1 {
        return Err(Error::domain("horizon must be at least 1"));
    }
    if policies.len() != spec.n_agents {
        return Err(Error::shape(format!("{} policies for {} agents", policies.len(), spec.n_agents)));
    }
    for p in policies {
        if p.len() != spec.n_obs || p.iter().any(|row| row.len() != spec.n_actions) {
            return Err(Error::shape("policy table has the wrong shape"));
        }
    }
    let n = spec.n_obs;
    let n_joint = spec.n_joint();
    // π(joint | o) as a product over agents.
    let mut joint = vec![0.0; n * n_joint];
    for o in 0..n {
        for j in 0..n_joint {
            joint[o * n_joint + j] = spec.decode_joint(j).iter().enumerate().map(|(i, &a)| policies[i][o][a]).product();
        }
    }
    let mut rho_t = spec.initial.clone();
    let mut freq = vec![0.0; n];
    let mut disc = 1.0;
    for t in 0..horizon {
        for (f, r) in freq.iter_mut().zip(&rho_t) {
            *f += disc * r;
        }
        if t + 1 == horizon {
            break;
        }
        let mut next = vec![0.0; n];
        for o in 0..n {
            if rho_t[o] == 0.0 {
                continue;
            }
            for j in 0..n_joint {
                let w = rho_t[o] * joint[o * n_joint + j];
                if w == 0.0 {
                    continue;
                }
                for (x, p) in next.iter_mut().zip(spec.transition_row(o, j)) {
                    *x += w * p;
                }
            }
        }
        rho_t = next;
        disc *= gamma;
    }
    Ok(VisitationVector { freq, normalization: Normalization::Discounted })
}

/// How `xent` was computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum XentKind {
    CrossEntropy,
    NegLogDensity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionError {
    pub xent: f64,
    pub reward_l1: f64,
    pub kind: XentKind,
}

fn mixture_neg_log_density(mix: &[(Vec<f64>, Vec<f64>)], delta: &[f64]) -> Result<f64> {
    let mut lps = Vec::with_capacity(mix.len());
    for (m, s) in mix {
        lps.push(gaussian_logprob(m, s, delta)?);
    }
    let mx = lps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + lps.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    Ok(-(lse - (mix.len() as f64).ln()))
}

/// Mean `-ln P̂(o')` and mean `|r̂ - r|` of a round-`n` model on round-`n+1` data.
pub fn prediction_error<T: Scalar>(
    model: &EnvModel<T>,
    data: &RolloutBuffer,
    use_prediction: bool,
) -> Result<PredictionError> {
    if data.is_empty() {
        return Err(Error::domain("no transitions to score"));
    }
    let (mut xent, mut rl1, mut n) = (0.0, 0.0, 0.0);
    let mut kind = XentKind::CrossEntropy;
    for t in data.transitions() {
        let p = model.predictive(&t.obs, &t.action, use_prediction)?;
        match &p.next {
            NextDist::Categorical(probs) => {
                let i = t.next_index.unwrap_or_else(|| obs_index(&t.next_obs));
                xent -= probs[i].max(f64::MIN_POSITIVE).ln();
            }
            NextDist::GaussianMixture(mix) => {
                kind = XentKind::NegLogDensity;
                let delta: Vec<f64> = t.next_obs.iter().zip(&t.obs).map(|(a, b)| a - b).collect();
                xent += mixture_neg_log_density(mix, &delta)?;
            }
        }
        rl1 += (p.reward - t.reward).abs();
        n += 1.0;
    }
    Ok(PredictionError { xent: xent / n, reward_l1: rl1 / n, kind })
}

/// Cross-entropy of observed next indices under a fixed distribution.
pub fn constant_xent(probs: &[f64], next: &[usize]) -> f64 {
    next.iter().map(|&i| -probs[i].max(f64::MIN_POSITIVE).ln()).sum::<f64>() / next.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceMatrices {
    /// `P(z | a_-i)`, one row per joint action of the other agents.
    pub z_given_a: Vec<Vec<f64>>,
    /// `P(a_-i | z)`, one row per latent value.
    pub a_given_z: Vec<Vec<f64>>,
    pub counts: Vec<Vec<usize>>,
}

impl CorrespondenceMatrices {
    /// `a_-i ↦ argmax_z P(z | a_-i)` over joint actions that were observed.
    pub fn argmax_map(&self) -> Vec<Option<usize>> {
        self.z_given_a
            .iter()
            .zip(&self.counts)
            .map(|(row, c)| (c.iter().sum::<usize>() > 0).then(|| obs_index(row)))
            .collect()
    }

    pub fn is_injective(&self) -> bool {
        let map = self.argmax_map();
        if map.iter().any(Option::is_none) {
            return false;
        }
        let mut seen = vec![false; self.a_given_z.len()];
        for z in map.into_iter().flatten() {
            if seen[z] {
                return false;
            }
            seen[z] = true;
        }
        true
    }
}

/// Counts `(z, a_-i)` pairs; unseen rows are uniform.
pub fn latent_correspondence(
    z: &[usize],
    joint: &[Option<usize>],
    n_z: usize,
    n_joint: usize,
) -> Result<CorrespondenceMatrices> {
    if z.len() != joint.len() {
        return Err(Error::shape("latent and joint-action label counts differ"));
    }
    let mut counts = vec![vec![0usize; n_z]; n_joint];
    for (&zi, a) in z.iter().zip(joint) {
        let a = a.ok_or_else(|| Error::contract("transition lacks the other agents' joint action"))?;
        if a >= n_joint || zi >= n_z {
            return Err(Error::domain("latent or joint-action label out of range"));
        }
        counts[a][zi] += 1;
    }
    let normalize = |row: Vec<f64>| {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter().map(|v| v / s).collect()
        } else {
            vec![1.0 / row.len() as f64; row.len()]
        }
    };
    let z_given_a = counts.iter().map(|r| normalize(r.iter().map(|&c| c as f64).collect())).collect();
    let a_given_z = (0..n_z).map(|zi| normalize(counts.iter().map(|r| r[zi] as f64).collect())).collect();
    Ok(CorrespondenceMatrices { z_given_a, a_given_z, counts })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding; the lowest-inertia of
/// `restarts` runs wins.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, rng: &mut Stream) -> Result<KMeans> {
    if points.is_empty() || k == 0 || restarts == 0 {
        return Err(Error::domain("k-means needs points, k >= 1 and at least one restart"));
    }
    let mut best: Option<KMeans> = None;
    for _ in 0..restarts {
        let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
        while centroids.len() < k {
            let d: Vec<f64> =
                points.iter().map(|p| centroids.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min)).collect();
            let total: f64 = d.iter().sum();
            let pick = if total > 0.0 {
                crate::nn::dist::sample_index(&d.iter().map(|x| x / total).collect::<Vec<_>>(), rng)
            } else {
                rng.random_range(0..points.len())
            };
            centroids.push(points[pick].clone());
        }
        let mut labels = vec![0; points.len()];
        for _ in 0..100 {
            let mut changed = false;
            for (p, l) in points.iter().zip(labels.iter_mut()) {
                let mut bi = 0;
                for (ci, c) in centroids.iter().enumerate() {
                    if sq_dist(p, c) < sq_dist(p, &centroids[bi]) {
                        bi = ci;
                    }
                }
                changed |= *l != bi;
                *l = bi;
            }
            for (ci, c) in centroids.iter_mut().enumerate() {
                let members: Vec<&Vec<f64>> =
                    points.iter().zip(&labels).filter(|(_, &l)| l == ci).map(|(p, _)| p).collect();
                if members.is_empty() {
                    continue;
                }
                for (j, v) in c.iter_mut().enumerate() {
                    *v = members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64;
                }
            }
            if !changed {
                break;
            }
        }
        let inertia = points.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centroids[l])).sum();
        if best.as_ref().is_none_or(|b| inertia < b.inertia) {
            best = Some(KMeans { centroids, labels, inertia });
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Correspondence between the newest latent function and the other agents'
/// joint action over one rollout. Categorical latents are sampled; point
/// latents are clustered with `k = n_joint`.
pub fn model_correspondence<T: Scalar>(
    model: &EnvModel<T>,
    data: &RolloutBuffer,
    n_joint: usize,
    rng: &mut Stream,
) -> Result<CorrespondenceMatrices> {
    let newest = model.psis.len().checked_sub(1).ok_or_else(|| Error::contract("model has no latent functions"))?;
    let labels: Vec<Option<usize>> = data.transitions().map(|t| t.others).collect();
    let mut dists = Vec::with_capacity(labels.len());
    for t in data.transitions() {
        dists.push(model.psi_dist(newest, &t.obs)?);
    }
    use crate::model::LatentDist;
    let (z, n_z) = match dists.first() {
        Some(LatentDist::Categorical(p)) => {
            let n_z = p.len();
            let z = dists
                .iter()
                .map(|d| match d {
                    LatentDist::Categorical(p) => crate::nn::dist::sample_index(p, rng),
                    _ => 0,
                })
                .collect();
            (z, n_z)
        }
        Some(_) => {
            let points: Vec<Vec<f64>> = dists
                .iter()
                .map(|d| match d {
                    LatentDist::Point(z) => z.clone(),
                    LatentDist::Gaussian { mean, .. } => mean.clone(),
                    LatentDist::Categorical(p) => p.clone(),
                })
                .collect();
            (kmeans(&points, n_joint, 10, rng)?.labels, n_joint)
        }
        None => return Err(Error::domain("no transitions to analyse")),
    };
    latent_correspondence(&z, &labels, n_z, n_joint)
}

/// `(E_ψ, E_ψω)`: largest sup-norm step of a sequence of probability vectors
/// and of its soft update `ψ_ω^n = (1-α)ψ_ω^{n-1} + αψ^n`, `ψ_ω^0 = ψ^0`.
pub fn softupdate_gap(seq: &[Vec<f64>], alpha: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::domain(format!("alpha = {alpha} must lie in (0, 1)")));
    }
    if seq.len() < 2 {
        return Err(Error::domain("need at least two vectors"));
    }
    let d = seq[0].len();
    for p in seq {
        let s: f64 = p.iter().sum();
        if p.len() != d || p.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::domain("sequence entries must be probability vectors of one length"));
        }
    }
    let sup = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let mut w = seq[0].clone();
    let (mut e, mut ew) = (0.0f64, 0.0f64);
    for n in 1..seq.len() {
        e = e.max(sup(&seq[n], &seq[n - 1]));
        let next: Vec<f64> = w.iter().zip(&seq[n]).map(|(a, b)| a + alpha * (b - a)).collect();
        ew = ew.max(sup(&next, &w));
        w = next;
    }
    Ok((e, ew))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentLosses {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub model_loss: Option<f64>,
    pub predictor_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: u64,
    pub mean_return: f64,
    pub visitation_l1: Option<f64>,
    pub xent: Option<f64>,
    pub reward_l1: Option<f64>,
    pub agents: Vec<AgentLosses>,
}

impl MetricsRecord {
    pub fn header(n_agents: usize) -> Vec<String> {
        let mut h: Vec<String> =
            ["round", "mean_return", "visitation_l1", "xent", "reward_l1"].iter().map(|s| s.to_string()).collect();
        for i in 0..n_agents {
            for c in ["policy_loss", "value_loss", "model_loss", "predictor_loss"] {
                h.push(format!("agent{i}_{c}"));
            }
        }
        h
    }

    pub fn fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut f = vec![
            self.round.to_string(),
            self.mean_return.to_string(),
            opt(self.visitation_l1),
            opt(self.xent),
            opt(self.reward_l1),
        ];
        for a in &self.agents {
            f.extend([a.policy_loss.to_string(), a.value_loss.to_string(), opt(a.model_loss), opt(a.predictor_loss)]);
        }
        f
    }

    pub fn check_finite(&self) -> Result<()> {
        let mut vals = vec![Some(self.mean_return), self.visitation_l1, self.xent, self.reward_l1];
        for a in &self.agents {
            vals.extend([Some(a.policy_loss), Some(a.value_loss), a.model_loss, a.predictor_loss]);
        }
        if vals.into_iter().flatten().all(f64::is_finite) {
            Ok(())
        } else {
            Err(Error::numeric(format!("metrics.round{}", self.round), "non-finite metric"))
        }
    }
}

pub fn write_metrics_csv<W: Write>(out: W, n_agents: usize, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(MetricsRecord::header(n_agents))?;
    let mut last: Option<u64> = None;
    for r in records {
        if last.is_some_and(|l| r.round <= l) {
            return Err(Error::contract("metric rounds must be strictly increasing"));
        }
        last = Some(r.round);
        w.write_record(r.fields())?;
    }
    w.flush().map_err(|e| Error::io("metrics.csv", e))?;
    Ok(())
}

/// Reads a metrics CSV back as `(header, rows)`, with empty fields as `None`.
pub fn read_metrics_csv(path: &std::path::Path) -> Result<(Vec<String>, Vec<Vec<Option<f64>>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut row = Vec::with_capacity(rec.len());
        for f in rec.iter() {
            row.push(if f.is_empty() {
                None
            } else {
                Some(f.parse::<f64>().map_err(|e| Error::Serde(format!("bad metric '{f}': {e}")))?)
            });
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// Visitation of the discrete observations the agent trained on.
pub fn training_visitation<'a>(obs: impl Iterator<Item = &'a [f64]>, n_obs: usize) -> Result<VisitationVector> {
    let idx: Vec<usize> = obs.map(obs_index).collect();
    empirical_visitation(&idx, n_obs)
}
