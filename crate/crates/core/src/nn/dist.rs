//! Probability heads: categorical over logits, diagonal Gaussian, and the
//! deterministic latent with an L2 penalty.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub enum SampleValue<T> {
    Index(usize),
    Vector(Vec<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistSample<T> {
    pub value: SampleValue<T>,
    pub log_prob: T,
    pub entropy: T,
}

impl<T: Scalar> DistSample<T> {
    pub fn index(&self) -> Option<usize> {
        match self.value {
            SampleValue::Index(i) => Some(i),
            SampleValue::Vector(_) => None,
        }
    }
}

fn check_logits<T: Scalar>(logits: &[T]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::shape("categorical head needs at least one logit"));
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric("logits", format!("non-finite logit at {i}")));
    }
    Ok(())
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    check_logits(logits)?;
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let s: T = out.iter().copied().sum();
    out.iter_mut().for_each(|p| *p /= s);
    Ok(out)
}

pub fn log_softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    check_logits(logits)?;
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
    Ok(logits.iter().map(|&z| z - lse).collect())
}

/// Samples an index from probabilities that sum to one.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

pub fn categorical_entropy<T: Scalar>(probs: &[T]) -> T {
    probs.iter().filter(|p| **p > T::zero()).map(|&p| -p * p.ln()).sum()
}

pub fn categorical_head<T: Scalar, R: Rng + ?Sized>(logits: &[T], rng: &mut R) -> Result<DistSample<T>> {
    let probs = softmax(logits)?;
    let logp = log_softmax(logits)?;
    let pf: Vec<f64> = probs.iter().map(|p| p.as_f64()).collect();
    let idx = sample_index(&pf, rng);
    Ok(DistSample { value: SampleValue::Index(idx), log_prob: logp[idx], entropy: categorical_entropy(&probs) })
}

pub fn categorical_logprob<T: Scalar>(logits: &[T], index: usize) -> Result<T> {
    let logp = log_softmax(logits)?;
    logp.get(index)
        .copied()
        .ok_or_else(|| Error::shape(format!("category {index} out of range for {} logits", logits.len())))
}

/// d log p(index) / d logits = onehot(index) - softmax(logits)
pub fn categorical_logprob_grad<T: Scalar>(logits: &[T], index: usize) -> Result<Vec<T>> {
    let mut g = softmax(logits)?;
    if index >= g.len() {
        return Err(Error::shape(format!("category {index} out of range for {} logits", g.len())));
    }
    g.iter_mut().for_each(|v| *v = -*v);
    g[index] += T::one();
    Ok(g)
}

/// dH / d logits with H = -Σ p log p: `-p_j (log p_j + H)`.
pub fn categorical_entropy_grad<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    let p = softmax(logits)?;
    let logp = log_softmax(logits)?;
    let h = -p.iter().zip(&logp).map(|(&a, &b)| a * b).sum::<T>();
    Ok(p.iter().zip(&logp).map(|(&pj, &lj)| -pj * (lj + h)).collect())
}

fn check_gaussian<T: Scalar>(mean: &[T], log_std: &[T]) -> Result<()> {
    if mean.len() != log_std.len() {
        return Err(Error::shape(format!("gaussian mean has {} dims, log_std has {}", mean.len(), log_std.len())));
    }
    if log_std.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("log_std", "non-finite log standard deviation"));
    }
    Ok(())
}

pub fn gaussian_logprob<T: Scalar>(mean: &[T], log_std: &[T], x: &[T]) -> Result<T> {
    check_gaussian(mean, log_std)?;
    if x.len() != mean.len() {
        return Err(Error::shape("gaussian sample dimension mismatch"));
    }
    let half = T::of(0.5);
    let mut lp = T::zero();
    for i in 0..x.len() {
        let z = (x[i] - mean[i]) / log_std[i].exp();
        lp -= half * z * z + log_std[i] + half * T::of(LN_2PI);
    }
    Ok(lp)
}

pub fn gaussian_entropy<T: Scalar>(log_std: &[T]) -> T {
    let c = T::of(0.5 * (LN_2PI + 1.0));
    log_std.iter().map(|&s| s + c).sum()
}

/// Gradients of the log-density with respect to mean and log_std.
pub fn gaussian_logprob_grads<T: Scalar>(mean: &[T], log_std: &[T], x: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    check_gaussian(mean, log_std)?;
    if x.len() != mean.len() {
        return Err(Error::shape("gaussian sample dimension mismatch"));
    }
    let mut dm = Vec::with_capacity(x.len());
    let mut ds = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let inv_var = (-(log_std[i] + log_std[i])).exp();
        let d = x[i] - mean[i];
        dm.push(d * inv_var);
        ds.push(d * d * inv_var - T::one());
    }
    Ok((dm, ds))
}

pub fn gaussian_head<T: Scalar, R: Rng + ?Sized>(mean: &[T], log_std: &[T], rng: &mut R) -> Result<DistSample<T>> {
    check_gaussian(mean, log_std)?;
    let x: Vec<T> = mean
        .iter()
        .zip(log_std)
        .map(|(&m, &s)| {
            let e: f64 = rng.sample(StandardNormal);
            m + s.exp() * T::of(e)
        })
        .collect();
    let log_prob = gaussian_logprob(mean, log_std, &x)?;
    Ok(DistSample { log_prob, entropy: gaussian_entropy(log_std), value: SampleValue::Vector(x) })
}

pub const DEFAULT_LATENT_L2: f64 = 1e-3;

/// Penalty `coef * ||z||²` and its gradient.
pub fn l2_penalty<T: Scalar>(z: &[T], coef: T) -> (T, Vec<T>) {
    let v = z.iter().map(|&x| x * x).sum::<T>() * coef;
    let g = z.iter().map(|&x| (coef + coef) * x).collect();
    (v, g)
}
