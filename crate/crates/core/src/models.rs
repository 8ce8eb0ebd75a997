//! Toy language models and replayable distribution traces.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::sampling::ProbVector;
use crate::{Error, Result};

/// Anything that maps a token prefix to a next-token distribution.
pub trait LanguageModel {
    fn vocab_size(&self) -> usize;

    fn next_distribution(&self, prefix: &[usize]) -> ProbVector;
}

impl<M: LanguageModel + ?Sized> LanguageModel for &M {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn next_distribution(&self, prefix: &[usize]) -> ProbVector {
        (**self).next_distribution(prefix)
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for Box<M> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn next_distribution(&self, prefix: &[usize]) -> ProbVector {
        (**self).next_distribution(prefix)
    }
}

/// Wraps a closure as a model.
pub struct FnModel<F> {
    vocab: usize,
    f: F,
}

impl<F: Fn(&[usize]) -> ProbVector> FnModel<F> {
    pub fn new(vocab: usize, f: F) -> Self {
        Self { vocab, f }
    }
}

impl<F: Fn(&[usize]) -> ProbVector> LanguageModel for FnModel<F> {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_distribution(&self, prefix: &[usize]) -> ProbVector {
        (self.f)(prefix)
    }
}

/// Add-delta smoothed n-gram model conditioning on the last `order` tokens.
///
/// Contexts that never occurred in training, and prefixes shorter than
/// `order`, fall back to the unigram distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct NgramModel {
    order: usize,
    vocab: usize,
    smoothing: f64,
    table: BTreeMap<Vec<usize>, ProbVector>,
    unigram: ProbVector,
}

fn check_vocab(vocab: usize) -> Result<()> {
    if vocab < 2 {
        return Err(Error::Config {
            field: "vocab".into(),
            message: format!("need at least 2 tokens, got {vocab}"),
        });
    }
    Ok(())
}

fn smoothed(counts: &[f64], delta: f64) -> ProbVector {
    let total: f64 = counts.iter().sum::<f64>() + delta * counts.len() as f64;
    ProbVector::new(counts.iter().map(|c| (c + delta) / total).collect())
        .expect("smoothed counts form a distribution")
}

impl NgramModel {
    pub fn fit(corpus: &[Vec<usize>], order: usize, vocab: usize, smoothing: f64) -> Result<Self> {
        check_vocab(vocab)?;
        if !(smoothing > 0.0) || !smoothing.is_finite() {
            return Err(Error::Config {
                field: "smoothing".into(),
                message: format!("must be positive, got {smoothing}"),
            });
        }
        if corpus.iter().all(Vec::is_empty) {
            return Err(Error::EmptyCorpus);
        }
        let mut unigram = vec![0.0; vocab];
        let mut counts: BTreeMap<Vec<usize>, Vec<f64>> = BTreeMap::new();
        for seq in corpus {
            if let Some(&t) = seq.iter().find(|&&t| t >= vocab) {
                return Err(Error::Shape(format!(
                    "corpus token {t} outside vocabulary of {vocab}"
                )));
            }
            for (i, &t) in seq.iter().enumerate() {
                unigram[t] += 1.0;
                if order > 0 && i >= order {
                    counts
                        .entry(seq[i - order..i].to_vec())
                        .or_insert_with(|| vec![0.0; vocab])[t] += 1.0;
                }
            }
        }
        Ok(Self {
            order,
            vocab,
            smoothing,
            table: counts
                .into_iter()
                .map(|(ctx, c)| (ctx, smoothed(&c, smoothing)))
                .collect(),
            unigram: smoothed(&unigram, smoothing),
        })
    }

    /// A model with a random conditional for every context. Each row mixes a
    /// peaked random draw with `smoothing` mass spread uniformly.
    pub fn random<R: Rng + ?Sized>(
        order: usize,
        vocab: usize,
        smoothing: f64,
        rng: &mut R,
    ) -> Result<Self> {
        check_vocab(vocab)?;
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Config {
                field: "smoothing".into(),
                message: "must lie in [0, 1)".into(),
            });
        }
        let contexts = (vocab as u64)
            .checked_pow(order as u32)
            .filter(|&n| n <= 1 << 20)
            .ok_or_else(|| Error::Config {
                field: "order".into(),
                message: "too many contexts for a dense random table".into(),
            })?;
        let row = |rng: &mut R| {
            let w: Vec<f64> = (0..vocab).map(|_| rng.gen::<f64>().powi(3)).collect();
            let s: f64 = w.iter().sum();
            ProbVector::normalized(
                w.iter()
                    .map(|x| (1.0 - smoothing) * x / s + smoothing / vocab as f64)
                    .collect(),
            )
            .expect("positive weights")
        };
        let unigram = row(rng);
        let mut table = BTreeMap::new();
        for c in 0..contexts {
            let mut ctx = vec![0; order];
            let mut rest = c;
            for slot in ctx.iter_mut().rev() {
                *slot = (rest % vocab as u64) as usize;
                rest /= vocab as u64;
            }
            table.insert(ctx, row(rng));
        }
        Ok(Self {
            order,
            vocab,
            smoothing,
            table,
            unigram,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn unigram(&self) -> &ProbVector {
        &self.unigram
    }

    /// Number of contexts with their own conditional.
    pub fn contexts(&self) -> usize {
        self.table.len()
    }
}

impl LanguageModel for NgramModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_distribution(&self, prefix: &[usize]) -> ProbVector {
        if self.order == 0 || prefix.len() < self.order {
            return self.unigram.clone();
        }
        self.table
            .get(&prefix[prefix.len() - self.order..])
            .unwrap_or(&self.unigram)
            .clone()
    }
}

/// Single-layer softmax model over the previous token.
///
/// `logits[j] = out[j] . embed[c] + bias[j]` where `c` is the last token, or
/// a dedicated start row when the prefix is empty. Parameters are stored
/// flat as `embed ((vocab + 1) x dim) | out (vocab x dim) | bias (vocab)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxModel {
    vocab: usize,
    dim: usize,
    params: Vec<f64>,
}

const CHECKPOINT_MAGIC: &str = "softmax-lm";

impl SoftmaxModel {
    pub fn zeros(vocab: usize, dim: usize) -> Result<Self> {
        check_vocab(vocab)?;
        if dim == 0 {
            return Err(Error::Config {
                field: "dim".into(),
                message: "must be positive".into(),
            });
        }
        Ok(Self {
            vocab,
            dim,
            params: vec![0.0; Self::param_count(vocab, dim)],
        })
    }

    pub fn random<R: Rng + ?Sized>(vocab: usize, dim: usize, scale: f64, rng: &mut R) -> Result<Self> {
        let mut m = Self::zeros(vocab, dim)?;
        for p in &mut m.params {
            *p = scale * (2.0 * rng.gen::<f64>() - 1.0);
        }
        Ok(m)
    }

    pub fn param_count(vocab: usize, dim: usize) -> usize {
        (vocab + 1) * dim + vocab * dim + vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn context(&self, prefix: &[usize]) -> usize {
        prefix.last().copied().unwrap_or(self.vocab)
    }

    fn embed_at(&self, row: usize) -> usize {
        row * self.dim
    }

    fn out_at(&self, token: usize) -> usize {
        (self.vocab + 1) * self.dim + token * self.dim
    }

    fn bias_at(&self, token: usize) -> usize {
        (2 * self.vocab + 1) * self.dim + token
    }

    pub fn logits(&self, prefix: &[usize]) -> Vec<f64> {
        let e = self.embed_at(self.context(prefix));
        let emb = &self.params[e..e + self.dim];
        (0..self.vocab)
            .map(|j| {
                let o = self.out_at(j);
                let dot: f64 = self.params[o..o + self.dim]
                    .iter()
                    .zip(emb)
                    .map(|(a, b)| a * b)
                    .sum();
                dot + self.params[self.bias_at(j)]
            })
            .collect()
    }

    fn softmax(logits: &[f64]) -> Vec<f64> {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let s: f64 = exp.iter().sum();
        exp.into_iter().map(|e| e / s).collect()
    }

    /// Adds the gradient of `sum_j w_j * -ln q_j` at `prefix` into `grad`,
    /// where `targets` lists `(token, w_j)`.
    pub fn accumulate_cross_entropy_grad(
        &self,
        prefix: &[usize],
        targets: &[(usize, f64)],
        scale: f64,
        grad: &mut [f64],
    ) {
        let q = Self::softmax(&self.logits(prefix));
        let mass: f64 = targets.iter().map(|&(_, w)| w).sum();
        // d/dlogit_j = mass * q_j - w_j
        let mut dlogit: Vec<f64> = q.iter().map(|qj| mass * qj).collect();
        for &(t, w) in targets {
            dlogit[t] -= w;
        }
        let e = self.embed_at(self.context(prefix));
        for (j, &d) in dlogit.iter().enumerate() {
            let d = d * scale;
            let o = self.out_at(j);
            for k in 0..self.dim {
                grad[o + k] += d * self.params[e + k];
                grad[e + k] += d * self.params[o + k];
            }
            grad[self.bias_at(j)] += d;
        }
    }

    /// Plain text: a header line `softmax-lm vocab=V dim=D`, then one
    /// parameter row per line.
    pub fn to_checkpoint(&self) -> String {
        let mut s = format!("{CHECKPOINT_MAGIC} vocab={} dim={}\n", self.vocab, self.dim);
        let rows = self
            .params
            .chunks(self.dim)
            .take(2 * self.vocab + 1)
            .chain(std::iter::once(&self.params[self.bias_at(0)..]));
        for row in rows {
            let line: Vec<String> = row.iter().map(|p| format!("{p:e}")).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn from_checkpoint(text: &str, path: &str) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_string(),
            line,
            message,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| parse_err(1, "missing header".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(CHECKPOINT_MAGIC) {
            return Err(parse_err(1, format!("expected `{CHECKPOINT_MAGIC}` header")));
        }
        let mut get = |key: &str| -> Result<usize> {
            fields
                .next()
                .and_then(|f| f.strip_prefix(key))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| parse_err(1, format!("missing `{key}<n>`")))
        };
        let vocab = get("vocab=")?;
        let dim = get("dim=")?;
        let mut model = Self::zeros(vocab, dim)?;
        let mut params = Vec::with_capacity(model.params.len());
        for (i, line) in lines.enumerate() {
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| parse_err(i + 2, format!("bad number `{tok}`")))?;
                params.push(v);
            }
        }
        if params.len() != model.params.len() {
            return Err(parse_err(
                0,
                format!("expected {} parameters, found {}", model.params.len(), params.len()),
            ));
        }
        model.params = params;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_checkpoint(&fs::read_to_string(path)?, &path.display().to_string())
    }
}

impl SoftmaxModel {
    /// Fails when the parameters have blown up to non-finite logits.
    pub fn try_distribution(&self, prefix: &[usize]) -> Result<ProbVector> {
        let logits = self.logits(prefix);
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidDistribution("non-finite logits".into()));
        }
        ProbVector::normalized(Self::softmax(&logits))
    }
}

impl LanguageModel for SoftmaxModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_distribution(&self, prefix: &[usize]) -> ProbVector {
        self.try_distribution(prefix)
            .expect("softmax parameters are finite")
    }
}

/// One recorded verification position.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub position: usize,
    pub drafted_token: usize,
    pub p: ProbVector,
    pub q: ProbVector,
}

/// Externally computed `(p, q)` pairs.
///
/// A decoding step is a run of records whose positions count up from 0. A
/// step with `n` records verifies `n - 1` drafts: the last record only
/// contributes the target distribution for the bonus token.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DistributionTrace {
    pub records: Vec<TraceRecord>,
}

/// Tolerance accepted on the mass of each traced distribution before it is
/// renormalized.
pub const TRACE_TOLERANCE: f64 = 1e-6;

impl DistributionTrace {
    pub fn new(records: Vec<TraceRecord>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn steps(&self) -> Vec<&[TraceRecord]> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.records.len() {
            if i == self.records.len() || self.records[i].position == 0 {
                out.push(&self.records[start..i]);
                start = i;
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let _ = write!(s, "{},{}", r.position, r.drafted_token);
            for x in r.p.probs().iter().chain(r.q.probs()) {
                let _ = write!(s, ",{x}");
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |message: String| Error::Parse {
                path: path.to_string(),
                line: line_no,
                message,
            };
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() < 6 || fields.len() % 2 != 0 {
                return Err(err(format!(
                    "expected position, token and two equal-length distributions, got {} fields",
                    fields.len()
                )));
            }
            let position: usize = fields[0]
                .parse()
                .map_err(|_| err(format!("bad position `{}`", fields[0])))?;
            let drafted_token: usize = fields[1]
                .parse()
                .map_err(|_| err(format!("bad token `{}`", fields[1])))?;
            let nums = fields[2..]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|_| err(format!("bad probability `{f}`"))))
                .collect::<Result<Vec<f64>>>()?;
            let vocab = nums.len() / 2;
            let dist = |xs: &[f64], name: &str| {
                ProbVector::with_tolerance(xs.to_vec(), TRACE_TOLERANCE)
                    .and_then(|v| ProbVector::normalized(v.probs().to_vec()))
                    .map_err(|e| err(format!("position {position}: {name}: {e}")))
            };
            let p = dist(&nums[..vocab], "p")?;
            let q = dist(&nums[vocab..], "q")?;
            if drafted_token >= vocab {
                return Err(err(format!(
                    "position {position}: token {drafted_token} outside vocabulary of {vocab}"
                )));
            }
            if let Some(prev) = records.last().map(|r: &TraceRecord| r.p.len()) {
                if prev != vocab {
                    return Err(err(format!("vocabulary changed from {prev} to {vocab}")));
                }
            }
            records.push(TraceRecord {
                position,
                drafted_token,
                p,
                q,
            });
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path)?, &path.display().to_string())
    }
}

/// Whitespace-separated token ids, one sequence per line.
pub fn parse_corpus(text: &str, path: &str) -> Result<Vec<Vec<usize>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split_whitespace()
                .map(|t| {
                    t.parse().map_err(|_| Error::Parse {
                        path: path.to_string(),
                        line: i + 1,
                        message: format!("bad token id `{t}`"),
                    })
                })
                .collect()
        })
        .collect()
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Vec<usize>>> {
    let path = path.as_ref();
    parse_corpus(&fs::read_to_string(path)?, &path.display().to_string())
}

/// Draws a sequence of `len` tokens from `model` starting at `prefix`.
pub fn generate<M: LanguageModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    prefix: &[usize],
    len: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut seq = prefix.to_vec();
    for _ in 0..len {
        let t = model.next_distribution(&seq).sample(rng);
        seq.push(t);
    }
    seq
}
