//! Plaintext speculative sampling.
//!
//! This is the reference the secure protocol is checked against: draft
//! tokens are rejected when `r * q > p` for a fresh uniform `r`, which has
//! the same rejection probability as `max(0, 1 - p/q)`. The first rejected
//! position is resampled from the normalized residual `max(0, p - q)`; when
//! all drafts survive a bonus token is drawn from the last target
//! distribution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Tolerance on the total mass of a distribution.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// A probability distribution over a vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector {
    probs: Vec<f64>,
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        ProbVector::new(value)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(value: ProbVector) -> Self {
        value.probs
    }
}

impl ProbVector {
    /// Validates non-negativity and unit mass within [`SUM_TOLERANCE`].
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        Self::with_tolerance(probs, SUM_TOLERANCE)
    }

    pub fn with_tolerance(probs: Vec<f64>, tolerance: f64) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty vocabulary".into()));
        }
        if let Some((i, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0)
        {
            return Err(Error::InvalidDistribution(format!(
                "entry {i} is {p}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > tolerance {
            return Err(Error::InvalidDistribution(format!("entries sum to {sum}")));
        }
        Ok(Self { probs })
    }

    /// Scales non-negative weights to unit mass.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidDistribution(
                "weights must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::InvalidDistribution("weights sum to zero".into()));
        }
        Self::new(weights.into_iter().map(|w| w / sum).collect())
    }

    pub fn uniform(vocab: usize) -> Self {
        Self {
            probs: vec![1.0 / vocab as f64; vocab],
        }
    }

    pub fn one_hot(vocab: usize, token: usize) -> Self {
        let mut probs = vec![0.0; vocab];
        probs[token] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn get(&self, token: usize) -> f64 {
        self.probs[token]
    }

    pub fn argmax(&self) -> usize {
        self.probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| {
                if p > best.1 {
                    (i, p)
                } else {
                    best
                }
            })
            .0
    }

    /// Inverse-CDF sample with one uniform draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.sample_with(rng.gen::<f64>())
    }

    /// Inverse-CDF lookup of a given uniform in `[0, 1)`.
    pub fn sample_with(&self, u: f64) -> usize {
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, &p) in self.probs.iter().enumerate() {
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

    /// Total-variation distance.
    pub fn tv_distance(&self, other: &ProbVector) -> f64 {
        0.5 * self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }
}

/// Draft tokens and the public-model distributions they were drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DraftBatch {
    tokens: Vec<usize>,
    q_dists: Vec<ProbVector>,
}

impl DraftBatch {
    pub fn new(tokens: Vec<usize>, q_dists: Vec<ProbVector>) -> Result<Self> {
        if tokens.len() != q_dists.len() {
            return Err(Error::Shape(format!(
                "{} tokens but {} distributions",
                tokens.len(),
                q_dists.len()
            )));
        }
        for (i, (&t, q)) in tokens.iter().zip(&q_dists).enumerate() {
            if t >= q.len() {
                return Err(Error::Shape(format!(
                    "draft {i}: token {t} outside vocabulary of {}",
                    q.len()
                )));
            }
            if q.get(t) <= 0.0 {
                return Err(Error::ZeroDraftProbability);
            }
        }
        Ok(Self { tokens, q_dists })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn q_dists(&self) -> &[ProbVector] {
        &self.q_dists
    }

    /// Number of draft tokens.
    pub fn gamma(&self) -> usize {
        self.tokens.len()
    }

    pub fn vocab(&self) -> Option<usize> {
        self.q_dists.first().map(ProbVector::len)
    }
}

/// `max(0, 1 - p/q)`.
pub fn rejection_prob(p: f64, q: f64) -> Result<f64> {
    if !(q > 0.0) {
        return Err(Error::ZeroDraftProbability);
    }
    Ok((1.0 - p / q).max(0.0))
}

/// Rejects iff `r * q > p`. Ties accept.
pub fn refactored_reject(p: f64, q: f64, r: f64) -> bool {
    r * q > p
}

/// `max(0, p - q)` scaled to unit mass.
pub fn residual_distribution(p: &ProbVector, q: &ProbVector) -> Result<ProbVector> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "vocabularies differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let residual: Vec<f64> = p
        .probs()
        .iter()
        .zip(q.probs())
        .map(|(a, b)| (a - b).max(0.0))
        .collect();
    let mass: f64 = residual.iter().sum();
    if mass <= 0.0 {
        return Err(Error::DegenerateResidual);
    }
    Ok(ProbVector {
        probs: residual.into_iter().map(|x| x / mass).collect(),
    })
}

/// Result of verifying one draft batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyOutcome {
    /// Index of the first rejected draft, or `gamma` if none was rejected.
    pub k: usize,
    /// Target distribution at position `k`.
    pub p_k: ProbVector,
    pub accepted: Vec<usize>,
    pub final_token: usize,
}

impl VerifyOutcome {
    /// Accepted drafts followed by the resampled or bonus token.
    pub fn emitted(&self) -> Vec<usize> {
        let mut out = self.accepted.clone();
        out.push(self.final_token);
        out
    }
}

fn check_shapes(p_dists: &[ProbVector], batch: &DraftBatch) -> Result<()> {
    if p_dists.len() != batch.gamma() + 1 {
        return Err(Error::Shape(format!(
            "need gamma + 1 = {} target distributions, got {}",
            batch.gamma() + 1,
            p_dists.len()
        )));
    }
    if let Some(v) = batch.vocab() {
        if p_dists.iter().any(|p| p.len() != v) {
            return Err(Error::Shape("target and draft vocabularies differ".into()));
        }
    }
    Ok(())
}

/// First index whose draft is rejected under the given uniforms, or `gamma`.
pub fn first_rejection(p_dists: &[ProbVector], batch: &DraftBatch, uniforms: &[f64]) -> Result<usize> {
    check_shapes(p_dists, batch)?;
    if uniforms.len() < batch.gamma() {
        return Err(Error::Shape("one uniform per draft token required".into()));
    }
    Ok(batch
        .tokens()
        .iter()
        .zip(batch.q_dists())
        .zip(p_dists)
        .zip(uniforms)
        .position(|(((&t, q), p), &r)| refactored_reject(p.get(t), q.get(t), r))
        .unwrap_or(batch.gamma()))
}

/// Samples the token emitted at position `k`: from the residual when a
/// draft was rejected there, otherwise (the bonus) from `p_k` itself. A
/// degenerate residual falls back to `p_k`.
pub fn finalize_token<R: Rng + ?Sized>(
    p_k: &ProbVector,
    q_k: Option<&ProbVector>,
    rng: &mut R,
) -> Result<usize> {
    match q_k {
        None => Ok(p_k.sample(rng)),
        Some(q) => match residual_distribution(p_k, q) {
            Ok(res) => Ok(res.sample(rng)),
            Err(Error::DegenerateResidual) => Ok(p_k.sample(rng)),
            Err(e) => Err(e),
        },
    }
}

/// One speculative step driven by explicit acceptance uniforms.
pub fn speculative_step_with_uniforms<R: Rng + ?Sized>(
    p_dists: &[ProbVector],
    batch: &DraftBatch,
    uniforms: &[f64],
    rng: &mut R,
) -> Result<VerifyOutcome> {
    let k = first_rejection(p_dists, batch, uniforms)?;
    let p_k = p_dists[k].clone();
    let q_k = batch.q_dists().get(k);
    let final_token = finalize_token(&p_k, q_k, rng)?;
    Ok(VerifyOutcome {
        k,
        p_k,
        accepted: batch.tokens()[..k].to_vec(),
        final_token,
    })
}

/// One speculative step. Draws all `gamma` acceptance uniforms up front,
/// then the final token.
pub fn speculative_step_plaintext<R: Rng + ?Sized>(
    p_dists: &[ProbVector],
    batch: &DraftBatch,
    rng: &mut R,
) -> Result<VerifyOutcome> {
    let uniforms: Vec<f64> = (0..batch.gamma()).map(|_| rng.gen()).collect();
    speculative_step_with_uniforms(p_dists, batch, &uniforms, rng)
}
