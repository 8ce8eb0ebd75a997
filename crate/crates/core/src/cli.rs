//! Command-line front end.
//!
//! Settings resolve as command-line flags, then a flat `key = value` config
//! file, then built-in defaults. The seed additionally falls back to the
//! `SPECDEC_SEED` environment variable before its default.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::alignment::{
    collect_distillation_set, estimate_acceptance, train_align, write_dataset, DisjointCorpusTask,
    TrainConfig, DEFAULT_TOP_K,
};
use crate::compare::CompareBackend;
use crate::models::{load_corpus, DistributionTrace, LanguageModel, NgramModel, SoftmaxModel};
use crate::perf::{
    comm_cost, speedup, write_comm_sweep_csv, write_length_csv, write_speedup_csv, CommVariant,
    DecoderCostProfile, ForwardCostProfile, LengthScaling, SpeedupPoint,
};
use crate::protocol::{
    generate, naive_verify, replay_step, secure_verify, DecoderConfig, Generation, PartyRngs,
    SharedDistributions, VerifyOrdering,
};
use crate::ring::FixedPointConfig;
use crate::sampling::ProbVector;
use crate::transport::{Channel, NetworkModel};
use crate::{Error, Result};

pub const SEED_ENV: &str = "SPECDEC_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Ideal,
    Chunked,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    /// Generate tokens with the secure protocol
    Decode,
    /// Check that protocol output follows the private model
    VerifyDist,
    /// Measure naive and optimized verification traffic
    BenchComm,
    /// Distill the draft model and report acceptance before and after
    Align,
    /// Write speedup, length and communication curves
    Curves,
}

#[derive(Debug, Parser)]
#[command(name = "specdec", version, about = "Secure speculative decoding between a client and a server")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CommandKind,
    #[command(flatten)]
    pub flags: Flags,
}

/// Every flag is optional so that unset ones can come from the config file.
#[derive(Debug, Default, Args)]
pub struct Flags {
    /// Flat key = value settings file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub vocab: Option<usize>,
    #[arg(long, global = true)]
    pub ell: Option<u32>,
    #[arg(long, global = true)]
    pub frac: Option<u32>,
    #[arg(long, global = true)]
    pub gamma: Option<usize>,
    #[arg(long = "chunk-bits", global = true)]
    pub chunk_bits: Option<u32>,
    #[arg(long, value_enum, global = true)]
    pub backend: Option<BackendKind>,
    #[arg(long = "bandwidth-mbps", global = true)]
    pub bandwidth_mbps: Option<f64>,
    #[arg(long = "delay-ms", global = true)]
    pub delay_ms: Option<f64>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Tokens to generate (decode)
    #[arg(long, global = true)]
    pub tokens: Option<usize>,
    /// Repetitions (verify-dist, align)
    #[arg(long, global = true)]
    pub runs: Option<usize>,
    /// Corpus the private model is fitted on
    #[arg(long = "private-corpus", global = true)]
    pub private_corpus: Option<PathBuf>,
    /// Softmax checkpoint used as the public model
    #[arg(long = "public-model", global = true)]
    pub public_model: Option<PathBuf>,
    /// Recorded distributions to replay instead of running models (decode)
    #[arg(long, global = true)]
    pub trace: Option<PathBuf>,
}

/// Fully resolved settings of one invocation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: CommandKind,
    pub seed: u64,
    pub vocab: usize,
    pub ell: u32,
    pub frac: u32,
    pub gamma: usize,
    pub chunk_bits: u32,
    pub backend: BackendKind,
    pub bandwidth_mbps: f64,
    pub delay_ms: f64,
    #[serde(skip)]
    pub out: PathBuf,
    pub tokens: usize,
    pub runs: usize,
    pub private_corpus: Option<PathBuf>,
    pub public_model: Option<PathBuf>,
    pub trace: Option<PathBuf>,
}

impl RunConfig {
    pub fn defaults(command: CommandKind) -> Self {
        Self {
            command,
            seed: 0,
            vocab: 8,
            ell: 32,
            frac: 12,
            gamma: 4,
            chunk_bits: 4,
            backend: BackendKind::Chunked,
            bandwidth_mbps: 1000.0,
            delay_ms: 10.0,
            out: PathBuf::from("specdec-out"),
            tokens: 32,
            runs: 20_000,
            private_corpus: None,
            public_model: None,
            trace: None,
        }
    }

    /// Applies flags over the config file over defaults, with `env_seed`
    /// used when neither sets a seed.
    pub fn resolve(command: CommandKind, flags: &Flags, env_seed: Option<&str>) -> Result<Self> {
        let file = match &flags.config {
            Some(path) => parse_config_file(&fs::read_to_string(path)?, &path.display().to_string())?,
            None => BTreeMap::new(),
        };
        let mut cfg = Self::defaults(command);
        for (key, value) in &file {
            cfg.set(key, value)?;
        }
        if flags.seed.is_none() && !file.contains_key("seed") {
            if let Some(s) = env_seed {
                cfg.set("seed", s).map_err(|_| Error::Config {
                    field: SEED_ENV.into(),
                    message: format!("not an unsigned integer: `{s}`"),
                })?;
            }
        }
        macro_rules! over {
            ($($f:ident),*) => {$(
                if let Some(v) = flags.$f.clone() {
                    cfg.$f = v;
                }
            )*};
        }
        over!(seed, vocab, ell, frac, gamma, chunk_bits, backend, bandwidth_mbps, delay_ms, out, tokens, runs);
        macro_rules! over_opt {
            ($($f:ident),*) => {$(
                if flags.$f.is_some() {
                    cfg.$f = flags.$f.clone();
                }
            )*};
        }
        over_opt!(private_corpus, public_model, trace);
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::Config {
                field: key.into(),
                message: format!("cannot parse `{value}`"),
            })
        }
        match key.replace('_', "-").as_str() {
            "seed" => self.seed = parse(key, value)?,
            "vocab" => self.vocab = parse(key, value)?,
            "ell" => self.ell = parse(key, value)?,
            "frac" => self.frac = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "chunk-bits" => self.chunk_bits = parse(key, value)?,
            "backend" => {
                self.backend = BackendKind::from_str(value, true).map_err(|_| Error::Config {
                    field: key.into(),
                    message: format!("expected `ideal` or `chunked`, got `{value}`"),
                })?
            }
            "bandwidth-mbps" => self.bandwidth_mbps = parse(key, value)?,
            "delay-ms" => self.delay_ms = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "tokens" => self.tokens = parse(key, value)?,
            "runs" => self.runs = parse(key, value)?,
            "private-corpus" => self.private_corpus = Some(PathBuf::from(value)),
            "public-model" => self.public_model = Some(PathBuf::from(value)),
            "trace" => self.trace = Some(PathBuf::from(value)),
            _ => {
                return Err(Error::Config {
                    field: key.into(),
                    message: "unknown setting".into(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::Config {
                field: field.into(),
                message,
            })
        };
        if self.vocab < 2 {
            return bad("vocab", format!("need at least 2 tokens, got {}", self.vocab));
        }
        if self.gamma == 0 {
            return bad("gamma", "need at least one draft token".into());
        }
        if FixedPointConfig::new(self.ell, self.frac).is_err() {
            return bad("ell", format!("ell = {} and frac = {} need 2 <= frac < ell <= 64", self.ell, self.frac));
        }
        if self.backend == BackendKind::Chunked {
            if let Err(e) = CompareBackend::chunked(self.chunk_bits).chunks(self.ell) {
                return bad("chunk-bits", e.to_string());
            }
        }
        if !(self.bandwidth_mbps > 0.0) || !self.bandwidth_mbps.is_finite() {
            return bad("bandwidth-mbps", "must be positive".into());
        }
        if !(self.delay_ms >= 0.0) || !self.delay_ms.is_finite() {
            return bad("delay-ms", "must be non-negative".into());
        }
        if self.runs == 0 {
            return bad("runs", "must be positive".into());
        }
        Ok(())
    }

    pub fn ring(&self) -> FixedPointConfig {
        FixedPointConfig::new(self.ell, self.frac).expect("validated")
    }

    pub fn compare_backend(&self) -> CompareBackend {
        match self.backend {
            BackendKind::Ideal => CompareBackend::Ideal,
            BackendKind::Chunked => CompareBackend::chunked(self.chunk_bits),
        }
    }

    pub fn network(&self) -> NetworkModel {
        NetworkModel::new(self.bandwidth_mbps * 1e6, self.delay_ms / 1e3).expect("validated")
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            gamma: self.gamma,
            ring: self.ring(),
            backend: self.compare_backend(),
            ordering: VerifyOrdering::SelectThenCompare,
            forward: ForwardCostProfile::default(),
        }
    }
}

/// Parses `key = value` lines. `#` starts a comment.
pub fn parse_config_file(text: &str, path: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_string(),
            line: i + 1,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// What a command produced.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub summary: Vec<String>,
}

fn create(dir: &Path, name: &str, files: &mut Vec<PathBuf>) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    files.push(path.clone());
    Ok(BufWriter::new(File::create(path)?))
}

/// A public and a private model: the configured files when given, random
/// bigram tables derived from the seed otherwise.
fn load_models(cfg: &RunConfig) -> Result<(Box<dyn LanguageModel>, Box<dyn LanguageModel>)> {
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x6d6f_6465_6c73);
    let private: Box<dyn LanguageModel> = match &cfg.private_corpus {
        Some(path) => Box::new(NgramModel::fit(&load_corpus(path)?, 1, cfg.vocab, 0.01)?),
        None => Box::new(NgramModel::random(1, cfg.vocab, 0.05, &mut rng)?),
    };
    let public: Box<dyn LanguageModel> = match &cfg.public_model {
        Some(path) => Box::new(SoftmaxModel::load(path)?),
        None => Box::new(NgramModel::random(1, cfg.vocab, 0.05, &mut rng)?),
    };
    for (name, m) in [("private", &private), ("public", &public)] {
        if m.vocab_size() != cfg.vocab {
            return Err(Error::Config {
                field: "vocab".into(),
                message: format!("{name} model has {} tokens", m.vocab_size()),
            });
        }
    }
    Ok((public, private))
}

/// Runs one command, writing its artifacts under `cfg.out`.
pub fn dispatch(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out)?;
    match cfg.command {
        CommandKind::Decode => run_decode(cfg),
        CommandKind::VerifyDist => run_verify_dist(cfg),
        CommandKind::BenchComm => run_bench_comm(cfg),
        CommandKind::Align => run_align(cfg),
        CommandKind::Curves => run_curves(cfg),
    }
}

fn write_run_config(cfg: &RunConfig, files: &mut Vec<PathBuf>) -> Result<()> {
    let mut w = create(&cfg.out, "run_config.json", files)?;
    serde_json::to_writer_pretty(&mut w, cfg)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn run_decode(cfg: &RunConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let mut rngs = PartyRngs::from_seed(cfg.seed);
    let mut channel = Channel::new();
    let decoder = cfg.decoder();
    let generation = match &cfg.trace {
        Some(path) => {
            let trace = DistributionTrace::load(path)?;
            let mut tokens = Vec::new();
            let mut steps = Vec::new();
            for records in trace.steps() {
                let report = replay_step(records, &decoder, &mut channel, &mut rngs)?;
                tokens.extend(report.outcome.emitted());
                steps.push(report);
            }
            Generation { tokens, steps }
        }
        None => {
            let (public, private) = load_models(cfg)?;
            generate(&public, &private, &[0], cfg.tokens, &decoder, &mut channel, &mut rngs)?
        }
    };
    if generation.steps.iter().any(|s| s.outcome.emitted().is_empty()) {
        return Err(Error::Invariant("a step emitted no token".into()));
    }
    let mut w = create(&cfg.out, "tokens.txt", &mut out.files)?;
    let line: Vec<String> = generation.tokens.iter().map(usize::to_string).collect();
    writeln!(w, "{}", line.join(" "))?;
    w.flush()?;
    let mut w = create(&cfg.out, "ledger.csv", &mut out.files)?;
    channel.ledger().write_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&cfg.out, "trace.jsonl", &mut out.files)?;
    generation.write_trace(&mut w)?;
    w.flush()?;
    write_run_config(cfg, &mut out.files)?;
    out.summary.push(format!(
        "{} tokens in {} steps, {:.1} KiB exchanged, estimated {:.2} s",
        generation.tokens.len(),
        generation.steps.len(),
        channel.ledger().total_bytes() / 1024.0,
        generation.latency(&cfg.network())
    ));
    Ok(out)
}

#[derive(Serialize)]
struct TvRow {
    position: usize,
    tv: f64,
    samples: usize,
}

/// Generates two tokens `runs` times from the same prompt and compares the
/// empirical distribution at each position with the private model's exact
/// marginal.
fn run_verify_dist(cfg: &RunConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let (public, private) = load_models(cfg)?;
    let prompt = [0usize];
    let v = cfg.vocab;
    let first = private.next_distribution(&prompt);
    let mut second = vec![0.0; v];
    for (x, px) in first.probs().iter().enumerate() {
        for (y, py) in private.next_distribution(&[0, x]).probs().iter().enumerate() {
            second[y] += px * py;
        }
    }
    let exact = [first, ProbVector::normalized(second)?];
    let mut counts = vec![vec![0usize; v]; 2];
    let mut rngs = PartyRngs::from_seed(cfg.seed);
    let decoder = cfg.decoder();
    for _ in 0..cfg.runs {
        let mut channel = Channel::new();
        let g = generate(&public, &private, &prompt, 2, &decoder, &mut channel, &mut rngs)?;
        for (pos, c) in counts.iter_mut().enumerate() {
            c[g.tokens[prompt.len() + pos]] += 1;
        }
    }
    let mut w = csv::Writer::from_writer(create(&cfg.out, "tv.csv", &mut out.files)?);
    let threshold = tv_threshold(v, cfg.runs);
    let mut worst: f64 = 0.0;
    for (pos, c) in counts.iter().enumerate() {
        let empirical = ProbVector::normalized(c.iter().map(|&n| n as f64).collect())?;
        let tv = empirical.tv_distance(&exact[pos]);
        worst = worst.max(tv);
        w.serialize(TvRow {
            position: pos,
            tv,
            samples: cfg.runs,
        })?;
        out.summary.push(format!("position {pos}: TV = {tv:.4}"));
    }
    w.flush()?;
    write_run_config(cfg, &mut out.files)?;
    if worst > threshold {
        return Err(Error::Invariant(format!(
            "total variation {worst:.4} exceeds {threshold:.4} for {} runs",
            cfg.runs
        )));
    }
    Ok(out)
}

/// Five times the expected total variation of `n` samples from a uniform
/// distribution over `v` tokens, floored at 0.02.
pub fn tv_threshold(v: usize, n: usize) -> f64 {
    let noise = 0.5 * v as f64 * ((1.0 / v as f64) * (1.0 - 1.0 / v as f64) * 2.0 / (std::f64::consts::PI * n as f64)).sqrt();
    (5.0 * noise).max(0.02)
}

#[derive(Serialize)]
struct CommRow {
    #[serde(rename = "V")]
    vocab: usize,
    ell: u32,
    m: u32,
    variant: String,
    bits: u64,
}

fn run_bench_comm(cfg: &RunConfig) -> Result<Outcome> {
    if cfg.backend != BackendKind::Chunked {
        return Err(Error::Config {
            field: "backend".into(),
            message: "bench-comm measures the chunked comparison".into(),
        });
    }
    let mut out = Outcome::default();
    let mut vocabs = vec![8, 64, 256];
    if !vocabs.contains(&cfg.vocab) {
        vocabs.push(cfg.vocab);
        vocabs.sort_unstable();
    }
    let ring = cfg.ring();
    let backend = cfg.compare_backend();
    let mut w = csv::Writer::from_writer(create(&cfg.out, "bench_comm.csv", &mut out.files)?);
    for &v in &vocabs {
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ v as u64);
        let public = NgramModel::random(1, v, 0.05, &mut rng)?;
        let private = NgramModel::random(1, v, 0.05, &mut rng)?;
        let mut rngs = PartyRngs::from_seed(cfg.seed);
        let batch = crate::protocol::draft_tokens(&public, &[0], cfg.gamma, &mut rngs.client)?;
        let mut ctx = vec![0];
        let mut p = vec![private.next_distribution(&ctx)];
        for &t in batch.tokens() {
            ctx.push(t);
            p.push(private.next_distribution(&ctx));
        }
        let shares = SharedDistributions::share(&p, ring, &mut rngs.functionality)?;
        let mut measured = Vec::new();
        for variant in [CommVariant::NaiveChunked, CommVariant::OptimizedChunked] {
            let mut channel = Channel::new();
            let mut r = rngs.clone();
            match variant {
                CommVariant::NaiveChunked => naive_verify(&mut channel, &batch, &shares, backend, &mut r)?,
                _ => secure_verify(&mut channel, &batch, &shares, backend, &mut r)?,
            };
            let bits = channel.ledger().total_bits();
            let expect = comm_cost(v, cfg.ell, cfg.gamma, cfg.chunk_bits, variant)?;
            if bits as u128 != expect {
                return Err(Error::Invariant(format!(
                    "{variant} at V = {v}: measured {bits} bits, closed form {expect}"
                )));
            }
            w.serialize(CommRow {
                vocab: v,
                ell: cfg.ell,
                m: cfg.chunk_bits,
                variant: variant.to_string(),
                bits,
            })?;
            measured.push(bits);
        }
        if measured[1] >= measured[0] {
            return Err(Error::Invariant(format!(
                "optimized traffic {} not below naive {} at V = {v}",
                measured[1], measured[0]
            )));
        }
        out.summary.push(format!(
            "V = {v}: naive {} bits, optimized {} bits ({:.1}x)",
            measured[0],
            measured[1],
            measured[0] as f64 / measured[1] as f64
        ));
    }
    w.flush()?;
    write_run_config(cfg, &mut out.files)?;
    Ok(out)
}

#[derive(Serialize)]
struct AlignRow {
    stage: &'static str,
    alpha: f64,
    stderr: f64,
    samples: u64,
}

fn run_align(cfg: &RunConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let task = DisjointCorpusTask::build(cfg.vocab, cfg.vocab, cfg.seed)?;
    let runs = cfg.runs.div_ceil(task.prompts.len());
    let before = estimate_acceptance(&task.target, &task.public, &task.prompts, cfg.gamma, runs, cfg.seed)?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x61_6c69_676e);
    let data = collect_distillation_set(&task.target, &task.prompts, DEFAULT_TOP_K, 24, &mut rng)?;
    let mut w = create(&cfg.out, "distill.jsonl", &mut out.files)?;
    write_dataset(&data, &mut w)?;
    w.flush()?;
    let report = train_align(task.public.clone(), &data, &TrainConfig::default())?;
    let path = cfg.out.join("public_aligned.txt");
    report.model.save(&path)?;
    out.files.push(path);
    let after = estimate_acceptance(&task.target, &report.model, &task.prompts, cfg.gamma, runs, cfg.seed)?;
    let mut w = csv::Writer::from_writer(create(&cfg.out, "align.csv", &mut out.files)?);
    for (stage, e) in [("before", before), ("after", after)] {
        w.serialize(AlignRow {
            stage,
            alpha: e.alpha,
            stderr: e.stderr,
            samples: e.samples,
        })?;
        out.summary.push(format!("alpha {stage}: {:.3} +/- {:.3}", e.alpha, e.stderr));
    }
    w.flush()?;
    write_run_config(cfg, &mut out.files)?;
    Ok(out)
}

fn run_curves(cfg: &RunConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let net = cfg.network();
    let profile = if net == NetworkModel::wan() {
        DecoderCostProfile::reference_wan()
    } else {
        DecoderCostProfile::reference_lan()
    };
    let mut points: Vec<SpeedupPoint> = Vec::new();
    for gamma in [4, 8, 16] {
        for i in 0..=19 {
            points.push(speedup(i as f64 * 0.05, gamma, &profile, &net)?);
        }
    }
    let mut w = create(&cfg.out, "speedup.csv", &mut out.files)?;
    write_speedup_csv(&points, &mut w)?;
    w.flush()?;
    let forward = ForwardCostProfile::default();
    let lens: Vec<usize> = (1..=16).collect();
    let mut w = create(&cfg.out, "length.csv", &mut out.files)?;
    write_length_csv(&forward, &net, &lens, &mut w)?;
    w.flush()?;
    let mut w = create(&cfg.out, "comm.csv", &mut out.files)?;
    write_comm_sweep_csv(&[8, 64, 256, 1024, 32_000], &[cfg.ell], cfg.chunk_bits, cfg.gamma, &mut w)?;
    w.flush()?;
    write_run_config(cfg, &mut out.files)?;
    let scaling = LengthScaling::default();
    out.summary.push(format!(
        "forward latency ratio at 8 tokens: {:.2} (reference {:.2})",
        forward.latency(&net, 8)? / forward.latency(&net, 1)?,
        scaling.at(8.0)
    ));
    Ok(out)
}

/// Entry point of the `specdec` binary.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(64) } else { ExitCode::SUCCESS };
        }
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    let result = RunConfig::resolve(cli.command, &cli.flags, env_seed.as_deref()).and_then(|cfg| dispatch(&cfg));
    match result {
        Ok(outcome) => {
            let mut stdout = std::io::stdout().lock();
            for line in &outcome.summary {
                let _ = writeln!(stdout, "{line}");
            }
            for f in &outcome.files {
                let _ = writeln!(stdout, "wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e @ Error::Invariant(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags() -> Flags {
        Flags::default()
    }

    #[test]
    fn precedence_flags_over_file_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "# settings\nvocab = 16\ngamma=2\nseed = 5\n").unwrap();
        let mut f = flags();
        f.config = Some(path);
        f.gamma = Some(3);
        let cfg = RunConfig::resolve(CommandKind::Decode, &f, Some("99")).unwrap();
        assert_eq!(cfg.vocab, 16);
        assert_eq!(cfg.gamma, 3);
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.ell, 32);
    }

    #[test]
    fn env_seed_is_a_fallback() {
        let cfg = RunConfig::resolve(CommandKind::Decode, &flags(), Some("42")).unwrap();
        assert_eq!(cfg.seed, 42);
        let mut f = flags();
        f.seed = Some(7);
        assert_eq!(RunConfig::resolve(CommandKind::Decode, &f, Some("42")).unwrap().seed, 7);
        assert!(matches!(
            RunConfig::resolve(CommandKind::Decode, &flags(), Some("x")),
            Err(Error::Config { field, .. }) if field == SEED_ENV
        ));
    }

    #[test]
    fn validation_names_the_field() {
        let field_of = |f: Flags| match RunConfig::resolve(CommandKind::Decode, &f, None) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(field_of(Flags { chunk_bits: Some(5), ..flags() }), "chunk-bits");
        assert_eq!(field_of(Flags { vocab: Some(1), ..flags() }), "vocab");
        assert_eq!(field_of(Flags { frac: Some(40), ..flags() }), "ell");
        assert_eq!(field_of(Flags { delay_ms: Some(-1.0), ..flags() }), "delay-ms");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.conf");
        fs::write(&path, "colour = blue\n").unwrap();
        assert_eq!(field_of(Flags { config: Some(path), ..flags() }), "colour");
    }

    #[test]
    fn config_file_syntax_errors_carry_lines() {
        assert!(matches!(parse_config_file("a = 1\nnonsense\n", "f"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn cli_parses_subcommands_and_flags() {
        let cli = Cli::try_parse_from(["specdec", "bench-comm", "--vocab", "256", "--backend", "chunked"]).unwrap();
        assert_eq!(cli.command, CommandKind::BenchComm);
        assert_eq!(cli.flags.vocab, Some(256));
        assert!(Cli::try_parse_from(["specdec", "decode", "--backend", "fast"]).is_err());
    }

    fn run_in(command: CommandKind, dir: &Path, seed: u64) -> Outcome {
        let mut cfg = RunConfig::defaults(command);
        cfg.seed = seed;
        cfg.out = dir.to_path_buf();
        cfg.tokens = 12;
        cfg.runs = 640;
        dispatch(&cfg).unwrap()
    }

    fn contents(outcome: &Outcome) -> Vec<Vec<u8>> {
        outcome.files.iter().map(|f| fs::read(f).unwrap()).collect()
    }

    #[test]
    fn outputs_are_deterministic() {
        for command in [CommandKind::Decode, CommandKind::BenchComm, CommandKind::Curves, CommandKind::VerifyDist] {
            let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
            let first = run_in(command, a.path(), 3);
            let second = run_in(command, b.path(), 3);
            assert_eq!(first.summary, second.summary);
            assert_eq!(contents(&first), contents(&second), "{command:?}");
        }
    }

    #[test]
    fn bench_comm_optimized_below_naive() {
        let dir = tempfile::tempdir().unwrap();
        run_in(CommandKind::BenchComm, dir.path(), 0);
        let mut rdr = csv::Reader::from_path(dir.path().join("bench_comm.csv")).unwrap();
        let rows: Vec<(usize, String, u64)> = rdr
            .records()
            .map(|r| {
                let r = r.unwrap();
                (r[0].parse().unwrap(), r[3].to_string(), r[4].parse().unwrap())
            })
            .collect();
        let at_256: Vec<_> = rows.iter().filter(|r| r.0 == 256).collect();
        assert_eq!(at_256.len(), 2);
        let naive = at_256.iter().find(|r| r.1 == "naive_chunked").unwrap().2;
        let optimized = at_256.iter().find(|r| r.1 == "optimized_chunked").unwrap().2;
        assert!(optimized < naive);
    }

    #[test]
    fn decode_replays_a_trace() {
        let dir = tempfile::tempdir().unwrap();
        let trace = dir.path().join("trace.txt");
        let p = ProbVector::new(vec![0.5, 0.5]).unwrap();
        let rec = |position, drafted_token| crate::models::TraceRecord {
            position,
            drafted_token,
            p: p.clone(),
            q: p.clone(),
        };
        DistributionTrace::new(vec![rec(0, 1), rec(1, 0), rec(0, 0), rec(1, 1)])
            .save(&trace)
            .unwrap();
        let mut cfg = RunConfig::defaults(CommandKind::Decode);
        cfg.vocab = 2;
        cfg.out = dir.path().join("out");
        cfg.trace = Some(trace);
        let outcome = dispatch(&cfg).unwrap();
        assert!(outcome.summary[0].contains("in 2 steps"));
    }

    #[test]
    fn align_writes_a_loadable_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::defaults(CommandKind::Align);
        cfg.out = dir.path().to_path_buf();
        cfg.runs = 640;
        dispatch(&cfg).unwrap();
        let model = SoftmaxModel::load(dir.path().join("public_aligned.txt")).unwrap();
        assert_eq!(model.vocab_size(), 8);
    }

    #[test]
    fn tv_threshold_floor() {
        assert_eq!(tv_threshold(8, 10_000_000), 0.02);
        assert!(tv_threshold(8, 100) > 0.1);
    }
}
