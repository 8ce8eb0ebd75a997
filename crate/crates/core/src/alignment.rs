//! Distilling the public draft model towards the private target using only
//! the target's top-K probabilities, and measuring how often drafts survive.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::models::{generate, LanguageModel, NgramModel, SoftmaxModel};
use crate::protocol::draft_tokens;
use crate::sampling::speculative_step_plaintext;
use crate::{Error, Result};

/// Floor applied to draft probabilities inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

pub const DEFAULT_TOP_K: usize = 5;

/// The target's top-K probabilities along one decoded continuation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillationSample {
    pub prompt: Vec<usize>,
    /// Tokens the target emitted after the prompt.
    pub continuation: Vec<usize>,
    /// `top_k[t]` belongs to the prefix `prompt + continuation[..t]`, sorted
    /// by descending probability.
    pub top_k: Vec<Vec<(usize, f64)>>,
}

impl DistillationSample {
    pub fn validate(&self) -> Result<()> {
        if self.top_k.len() != self.continuation.len() {
            return Err(Error::Shape(format!(
                "{} positions but {} continuation tokens",
                self.top_k.len(),
                self.continuation.len()
            )));
        }
        let k = self.top_k.first().map_or(0, Vec::len);
        for (t, pos) in self.top_k.iter().enumerate() {
            if pos.len() != k || k == 0 {
                return Err(Error::Shape(format!("position {t}: expected {k} entries")));
            }
            if pos.iter().any(|&(_, p)| !(p > 0.0 && p <= 1.0)) {
                return Err(Error::InvalidDistribution(format!(
                    "position {t}: probabilities must lie in (0, 1]"
                )));
            }
            if pos.windows(2).any(|w| w[0].1 < w[1].1) {
                return Err(Error::InvalidDistribution(format!(
                    "position {t}: entries not in descending order"
                )));
            }
        }
        Ok(())
    }

    /// Prefix the distribution at position `t` conditions on.
    pub fn prefix(&self, t: usize) -> Vec<usize> {
        let mut p = self.prompt.clone();
        p.extend_from_slice(&self.continuation[..t]);
        p
    }

    /// Treats an observed sequence as one-hot targets.
    pub fn from_sequence(seq: &[usize]) -> Self {
        Self {
            prompt: Vec::new(),
            continuation: seq.to_vec(),
            top_k: seq.iter().map(|&t| vec![(t, 1.0)]).collect(),
        }
    }
}

fn top_k(probs: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<(usize, f64)> = probs.iter().copied().enumerate().filter(|&(_, p)| p > 0.0).collect();
    // ties broken by token id for determinism
    idx.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    idx.truncate(k);
    idx
}

/// Decodes `len` tokens from the target after every prompt and keeps the
/// top-K of each next-token distribution along the way.
pub fn collect_distillation_set<M: LanguageModel + ?Sized, R: Rng + ?Sized>(
    target: &M,
    prompts: &[Vec<usize>],
    k: usize,
    len: usize,
    rng: &mut R,
) -> Result<Vec<DistillationSample>> {
    if k == 0 {
        return Err(Error::Config {
            field: "top_k".into(),
            message: "must be at least 1".into(),
        });
    }
    let mut out = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        let mut ctx = prompt.clone();
        let mut continuation = Vec::with_capacity(len);
        let mut entries = Vec::with_capacity(len);
        for _ in 0..len {
            let p = target.next_distribution(&ctx);
            entries.push(top_k(p.probs(), k));
            let t = p.sample(rng);
            continuation.push(t);
            ctx.push(t);
        }
        out.push(DistillationSample {
            prompt: prompt.clone(),
            continuation,
            top_k: entries,
        });
    }
    Ok(out)
}

/// How top-K masses enter the cross entropy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopKMode {
    /// Use the target probabilities as given.
    #[default]
    Raw,
    /// Rescale the K probabilities to unit mass first.
    Renormalized,
}

fn weights(entries: &[(usize, f64)], mode: TopKMode) -> Vec<(usize, f64)> {
    match mode {
        TopKMode::Raw => entries.to_vec(),
        TopKMode::Renormalized => {
            let s: f64 = entries.iter().map(|e| e.1).sum();
            entries.iter().map(|&(t, p)| (t, p / s)).collect()
        }
    }
}

/// `sum_t sum_{j in top-K} p_j * -ln q_j` with `q` from `model`.
pub fn distill_loss<M: LanguageModel + ?Sized>(
    sample: &DistillationSample,
    model: &M,
    mode: TopKMode,
) -> f64 {
    sample
        .top_k
        .iter()
        .enumerate()
        .map(|(t, entries)| {
            let q = model.next_distribution(&sample.prefix(t));
            weights(entries, mode)
                .iter()
                .map(|&(j, p)| -p * q.get(j).max(PROB_FLOOR).ln())
                .sum::<f64>()
        })
        .sum()
}

pub fn mean_loss<M: LanguageModel + ?Sized>(
    dataset: &[DistillationSample],
    model: &M,
    mode: TopKMode,
) -> f64 {
    if dataset.is_empty() {
        return 0.0;
    }
    dataset.iter().map(|s| distill_loss(s, model, mode)).sum::<f64>() / dataset.len() as f64
}

/// Gradient of [`mean_loss`] with respect to the softmax parameters.
pub fn mean_loss_grad(dataset: &[DistillationSample], model: &SoftmaxModel, mode: TopKMode) -> Vec<f64> {
    let mut grad = vec![0.0; model.params().len()];
    let scale = 1.0 / dataset.len().max(1) as f64;
    for s in dataset {
        for (t, entries) in s.top_k.iter().enumerate() {
            model.accumulate_cross_entropy_grad(&s.prefix(t), &weights(entries, mode), scale, &mut grad);
        }
    }
    grad
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub mode: TopKMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 0.02,
            mode: TopKMode::Raw,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub model: SoftmaxModel,
    /// Mean loss before training and after every epoch.
    pub losses: Vec<f64>,
}

fn checked_mean_loss(dataset: &[DistillationSample], model: &SoftmaxModel, mode: TopKMode) -> f64 {
    let mut total = 0.0;
    for s in dataset {
        for (t, entries) in s.top_k.iter().enumerate() {
            let Ok(q) = model.try_distribution(&s.prefix(t)) else {
                return f64::NAN;
            };
            total += weights(entries, mode)
                .iter()
                .map(|&(j, p)| -p * q.get(j).max(PROB_FLOOR).ln())
                .sum::<f64>();
        }
    }
    total / dataset.len().max(1) as f64
}

/// Full-batch gradient descent on the mean distillation loss.
pub fn train_align(
    mut model: SoftmaxModel,
    dataset: &[DistillationSample],
    config: &TrainConfig,
) -> Result<TrainReport> {
    for s in dataset {
        s.validate()?;
    }
    let mut losses = vec![checked_mean_loss(dataset, &model, config.mode)];
    for epoch in 0..config.epochs {
        let grad = mean_loss_grad(dataset, &model, config.mode);
        for (p, g) in model.params_mut().iter_mut().zip(&grad) {
            *p -= config.learning_rate * g;
        }
        let loss = checked_mean_loss(dataset, &model, config.mode);
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        losses.push(loss);
    }
    Ok(TrainReport { model, losses })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceEstimate {
    /// Accepted drafts over drafts that were put to the test.
    pub alpha: f64,
    /// Number of drafts that were put to the test.
    pub samples: u64,
    pub stderr: f64,
    pub steps: u64,
    /// Tokens emitted, bonus and resampled tokens included.
    pub tokens: u64,
}

impl AcceptanceEstimate {
    pub fn tokens_per_step(&self) -> f64 {
        self.tokens as f64 / self.steps as f64
    }
}

fn prompt_seed(seed: u64, prompt: &[usize], run: usize) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for &t in prompt.iter().chain(std::iter::once(&usize::MAX)) {
        for b in (t as u64).to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h ^ (run as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Runs `runs` plaintext speculative steps after every prompt. Drafts after
/// the first rejection of a step are not counted. Each (prompt, run) pair
/// has its own seed, so the estimate does not depend on prompt order.
pub fn estimate_acceptance<P, Q>(
    target: &P,
    public: &Q,
    prompts: &[Vec<usize>],
    gamma: usize,
    runs: usize,
    seed: u64,
) -> Result<AcceptanceEstimate>
where
    P: LanguageModel + ?Sized,
    Q: LanguageModel + ?Sized,
{
    if runs == 0 {
        return Err(Error::Config {
            field: "runs".into(),
            message: "must be at least 1".into(),
        });
    }
    let (mut accepted, mut tested, mut steps, mut tokens) = (0u64, 0u64, 0u64, 0u64);
    for prompt in prompts {
        for run in 0..runs {
            let mut rng = ChaCha12Rng::seed_from_u64(prompt_seed(seed, prompt, run));
            let batch = draft_tokens(public, prompt, gamma, &mut rng)?;
            let mut ctx = prompt.clone();
            let mut p = Vec::with_capacity(gamma + 1);
            p.push(target.next_distribution(&ctx));
            for &t in batch.tokens() {
                ctx.push(t);
                p.push(target.next_distribution(&ctx));
            }
            let out = speculative_step_plaintext(&p, &batch, &mut rng)?;
            accepted += out.k as u64;
            tested += (out.k + usize::from(out.k < gamma)) as u64;
            steps += 1;
            tokens += out.k as u64 + 1;
        }
    }
    let alpha = if tested == 0 { 0.0 } else { accepted as f64 / tested as f64 };
    Ok(AcceptanceEstimate {
        alpha,
        samples: tested,
        stderr: (alpha * (1.0 - alpha) / tested.max(1) as f64).sqrt(),
        steps,
        tokens,
    })
}

pub fn write_dataset<W: Write>(dataset: &[DistillationSample], mut out: W) -> Result<()> {
    for s in dataset {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<DistillationSample>> {
    let path = path.as_ref();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: DistillationSample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        sample.validate().map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(sample);
    }
    Ok(out)
}

/// A target fitted on one corpus and a draft model pretrained on a corpus
/// drawn from an unrelated source.
#[derive(Clone, Debug)]
pub struct DisjointCorpusTask {
    pub target: NgramModel,
    pub public: SoftmaxModel,
    pub prompts: Vec<Vec<usize>>,
}

impl DisjointCorpusTask {
    pub fn build(vocab: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let source_a = NgramModel::random(1, vocab, 0.02, &mut rng)?;
        let source_b = NgramModel::random(1, vocab, 0.02, &mut rng)?;
        let corpus = |src: &NgramModel, rng: &mut ChaCha12Rng| -> Vec<Vec<usize>> {
            (0..40)
                .map(|_| {
                    let start = rng.gen_range(0..vocab);
                    generate(src, &[start], 40, rng)
                })
                .collect()
        };
        let corpus_a = corpus(&source_a, &mut rng);
        let corpus_b = corpus(&source_b, &mut rng);
        let target = NgramModel::fit(&corpus_a, 1, vocab, 0.01)?;
        let pretrain: Vec<DistillationSample> =
            corpus_b.iter().map(|s| DistillationSample::from_sequence(s)).collect();
        let init = SoftmaxModel::random(vocab, dim, 0.1, &mut rng)?;
        let public = train_align(
            init,
            &pretrain,
            &TrainConfig {
                epochs: 300,
                learning_rate: 0.02,
                mode: TopKMode::Raw,
            },
        )?
        .model;
        let prompts = (0..64).map(|i| vec![i % vocab]).collect();
        Ok(Self {
            target,
            public,
            prompts,
        })
    }
}
