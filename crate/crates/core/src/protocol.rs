//! Secure verification of draft tokens and the full decoding step.
//!
//! The client holds the public model, the draft tokens and their draft
//! probabilities. The target distributions exist only as additive shares
//! produced by the secure forward pass. Verification proceeds in four
//! phases:
//!
//! 1. `verify/select`: the client forms shares of `S = Q * R - P` locally and
//!    fetches the server's share of `S[i, x_i]` for each draft by a 1-of-V OT,
//!    masked by one fresh server value per row.
//! 2. `verify/compare`: shares of `[S[i, x_i] > 0]`, i.e. of "reject draft i".
//! 3. `verify/open`: the server opens its boolean shares to the client.
//! 4. `verify/retrieve`: the client fetches the server's share of the target
//!    distribution at the first rejection by a 1-of-(g+1) OT.
//!
//! Outside the OT and comparison functionalities the server receives nothing.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::compare::{f_less, BoolShares, CompareBackend};
use crate::models::{LanguageModel, TraceRecord};
use crate::ot::{self, ot_choose_batch, OtInstance, OtRequest};
use crate::perf::ForwardCostProfile;
use crate::ring::{encode_fixed, FixedPointConfig, RingValue, SharedVector};
use crate::sampling::{self, DraftBatch, ProbVector, VerifyOutcome};
use crate::transport::{Channel, NetworkModel, Party, PhaseCost};
use crate::{Error, Result};

pub const PHASE_FORWARD: &str = "secure_forward";
pub const PHASE_SELECT: &str = "verify/select";
pub const PHASE_COMPARE: &str = "verify/compare";
pub const PHASE_OPEN: &str = "verify/open";
pub const PHASE_RETRIEVE: &str = "verify/retrieve";

/// Independent randomness of the client, the server and the trusted
/// functionalities, all derived from one seed.
#[derive(Clone, Debug)]
pub struct PartyRngs {
    pub client: ChaCha12Rng,
    pub server: ChaCha12Rng,
    pub functionality: ChaCha12Rng,
}

impl PartyRngs {
    pub fn from_seed(seed: u64) -> Self {
        let stream = |s| {
            let mut r = ChaCha12Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        Self {
            client: stream(1),
            server: stream(2),
            functionality: stream(3),
        }
    }
}

/// Which verification ordering to run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyOrdering {
    /// Select the one needed score per draft, then compare it.
    #[default]
    SelectThenCompare,
    /// Compare every score, then select the needed sign bit.
    CompareThenSelect,
}

/// Draws `gamma` tokens autoregressively from the public model.
pub fn draft_tokens<M: LanguageModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    prefix: &[usize],
    gamma: usize,
    rng: &mut R,
) -> Result<DraftBatch> {
    if gamma == 0 {
        return Err(Error::Config {
            field: "gamma".into(),
            message: "need at least one draft token".into(),
        });
    }
    let mut ctx = prefix.to_vec();
    let mut tokens = Vec::with_capacity(gamma);
    let mut dists = Vec::with_capacity(gamma);
    for _ in 0..gamma {
        let q = model.next_distribution(&ctx);
        let t = q.sample(rng);
        ctx.push(t);
        tokens.push(t);
        dists.push(q);
    }
    DraftBatch::new(tokens, dists)
}

/// Both parties' shares of a list of distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedDistributions {
    pub client: Vec<SharedVector>,
    pub server: Vec<SharedVector>,
}

impl SharedDistributions {
    pub fn share<R: Rng + ?Sized>(
        dists: &[ProbVector],
        cfg: FixedPointConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut client = Vec::with_capacity(dists.len());
        let mut server = Vec::with_capacity(dists.len());
        for p in dists {
            let (c, s) = SharedVector::share_reals(p.probs(), cfg, rng)?;
            client.push(c);
            server.push(s);
        }
        Ok(Self { client, server })
    }

    pub fn len(&self) -> usize {
        self.client.len()
    }

    pub fn is_empty(&self) -> bool {
        self.client.is_empty()
    }

    /// Decoded plaintext rows.
    pub fn reconstruct(&self) -> Result<Vec<Vec<f64>>> {
        self.client
            .iter()
            .zip(&self.server)
            .map(|(c, s)| Ok(c.reconstruct_with(s)?.iter().map(RingValue::decode).collect()))
            .collect()
    }
}

/// Output of the stand-in secure forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub shares: SharedDistributions,
    /// Number of tokens the pass processed in parallel.
    pub input_len: usize,
    pub compute_seconds: f64,
}

/// Evaluates the private model in the clear on `prefix + drafts` and hands
/// out shares of the `drafts.len() + 1` next-token distributions. The ledger
/// is charged from `profile` for an input of `max(drafts.len(), 1)` tokens.
pub fn secure_forward_stub<M: LanguageModel + ?Sized, R: Rng + ?Sized>(
    private_model: &M,
    prefix: &[usize],
    drafts: &[usize],
    cfg: FixedPointConfig,
    profile: &ForwardCostProfile,
    channel: &mut Channel,
    rng: &mut R,
) -> Result<ForwardOutput> {
    let mut ctx = prefix.to_vec();
    let mut dists = Vec::with_capacity(drafts.len() + 1);
    dists.push(private_model.next_distribution(&ctx));
    for &t in drafts {
        ctx.push(t);
        dists.push(private_model.next_distribution(&ctx));
    }
    let shares = SharedDistributions::share(&dists, cfg, rng)?;
    let input_len = drafts.len().max(1);
    let bits = (8.0 * profile.bytes(input_len)).round() as u64;
    channel.barrier();
    channel.ledger_mut().charge_external(
        PHASE_FORWARD,
        profile.rounds().round() as u64,
        bits / 2,
        bits - bits / 2,
    );
    channel.barrier();
    Ok(ForwardOutput {
        shares,
        input_len,
        compute_seconds: profile.compute_seconds(input_len),
    })
}

/// First rejected index and the target distribution there.
#[derive(Clone, Debug, PartialEq)]
pub struct Rejection {
    pub k: usize,
    pub p_k: ProbVector,
}

fn check_inputs(batch: &DraftBatch, shares: &SharedDistributions) -> Result<(usize, FixedPointConfig)> {
    let gamma = batch.gamma();
    if shares.client.len() != gamma + 1 || shares.server.len() != gamma + 1 {
        return Err(Error::Shape(format!(
            "need {} shared distributions, got {} and {}",
            gamma + 1,
            shares.client.len(),
            shares.server.len()
        )));
    }
    let v = batch
        .vocab()
        .ok_or_else(|| Error::Shape("empty draft batch".into()))?;
    let cfg = shares.client[0].cfg();
    for (c, s) in shares.client.iter().zip(&shares.server) {
        if c.party() != Party::Client || s.party() != Party::Server {
            return Err(Error::Shape("shares passed for the wrong parties".into()));
        }
        if c.len() != v || s.len() != v {
            return Err(Error::Shape(format!("shared rows must have {v} entries")));
        }
        if c.cfg() != cfg || s.cfg() != cfg {
            return Err(Error::ConfigMismatch {
                left: cfg,
                right: if c.cfg() != cfg { c.cfg() } else { s.cfg() },
            });
        }
    }
    for (&t, q) in batch.tokens().iter().zip(batch.q_dists()) {
        if !(q.get(t) > 0.0) {
            return Err(Error::ZeroDraftProbability);
        }
    }
    Ok((v, cfg))
}

/// Client's uniforms for `Q * R`, one row of `V` per draft. Only the entry at
/// the drafted token affects the outcome.
pub fn draw_uniforms<R: Rng + ?Sized>(gamma: usize, vocab: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..gamma)
        .map(|_| (0..vocab).map(|_| rng.gen()).collect())
        .collect()
}

/// Client share of the score matrix: `encode(q * r) - P_c`. The server's
/// share is `-P_s`.
fn client_scores(
    batch: &DraftBatch,
    shares: &SharedDistributions,
    uniforms: &[Vec<f64>],
    cfg: FixedPointConfig,
) -> Result<Vec<Vec<RingValue>>> {
    batch
        .q_dists()
        .iter()
        .zip(uniforms)
        .zip(&shares.client)
        .map(|((q, r), pc)| {
            q.probs()
                .iter()
                .zip(r)
                .zip(pc.values())
                .map(|((&qj, &rj), &p)| Ok(encode_fixed(qj * rj, cfg)? - p))
                .collect()
        })
        .collect()
}

fn check_uniforms(uniforms: &[Vec<f64>], gamma: usize, vocab: usize) -> Result<()> {
    if uniforms.len() != gamma || uniforms.iter().any(|row| row.len() != vocab) {
        return Err(Error::Shape(format!("uniforms must be {gamma} x {vocab}")));
    }
    if uniforms.iter().flatten().any(|r| !(0.0..1.0).contains(r)) {
        return Err(Error::Shape("uniforms must lie in [0, 1)".into()));
    }
    Ok(())
}

fn pack_bools(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        out[i / 8] |= (b as u8) << (i % 8);
    }
    out
}

fn unpack_bools(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

/// First index whose reject bit is set, with an implicit set bit at `gamma`.
fn first_reject(bits: &[bool]) -> usize {
    bits.iter().position(|&b| b).unwrap_or(bits.len())
}

/// Client fetches the server's share of row `k` and reconstructs it.
fn retrieve_row(
    channel: &mut Channel,
    shares: &SharedDistributions,
    k: usize,
    cfg: FixedPointConfig,
) -> Result<ProbVector> {
    let v = shares.server[0].len();
    let instance = OtInstance::new(shares.len() as u64, (v as u64) * cfg.ell() as u64)?;
    let flat: Vec<u8> = shares
        .server
        .iter()
        .flat_map(|row| ot::pack_ring(row.values()))
        .collect();
    let got = ot_choose_batch(
        channel,
        PHASE_RETRIEVE,
        &[OtRequest {
            instance,
            strings: &flat,
            index: k,
        }],
    )?;
    let server_row = ot::unpack_ring(&got[0], v, cfg)?;
    let decoded: Vec<f64> = shares.client[k]
        .values()
        .iter()
        .zip(server_row)
        .map(|(&c, s)| (c + s).decode().max(0.0))
        .collect();
    ProbVector::normalized(decoded)
}

/// Secure rejection with the client's uniforms drawn from `rngs.client`.
pub fn secure_verify(
    channel: &mut Channel,
    batch: &DraftBatch,
    shares: &SharedDistributions,
    backend: CompareBackend,
    rngs: &mut PartyRngs,
) -> Result<Rejection> {
    let v = batch
        .vocab()
        .ok_or_else(|| Error::Shape("empty draft batch".into()))?;
    let uniforms = draw_uniforms(batch.gamma(), v, &mut rngs.client);
    secure_verify_with_uniforms(
        channel,
        batch,
        shares,
        backend,
        &uniforms,
        &mut rngs.server,
        &mut rngs.functionality,
    )
}

/// Secure rejection driven by explicit client uniforms (`gamma x V`).
pub fn secure_verify_with_uniforms<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    channel: &mut Channel,
    batch: &DraftBatch,
    shares: &SharedDistributions,
    backend: CompareBackend,
    uniforms: &[Vec<f64>],
    server_rng: &mut R1,
    functionality_rng: &mut R2,
) -> Result<Rejection> {
    let (v, cfg) = check_inputs(batch, shares)?;
    let gamma = batch.gamma();
    check_uniforms(uniforms, gamma, v)?;
    let client_scores = client_scores(batch, shares, uniforms, cfg)?;

    // one mask per row: exactly one entry of each row is revealed
    let masks: Vec<RingValue> = (0..gamma).map(|_| cfg.random(server_rng)).collect();
    let tables: Vec<Vec<u8>> = shares.server[..gamma]
        .iter()
        .zip(&masks)
        .map(|(row, &mask)| {
            row.values()
                .iter()
                .flat_map(|&p| ot::pack_ring(&[-p - mask]))
                .collect()
        })
        .collect();
    let instance = OtInstance::new(v as u64, cfg.ell() as u64)?;
    let requests: Vec<OtRequest<'_>> = tables
        .iter()
        .zip(batch.tokens())
        .map(|(strings, &index)| OtRequest {
            instance,
            strings,
            index,
        })
        .collect();
    let received = ot_choose_batch(channel, PHASE_SELECT, &requests)?;
    let mut selected = Vec::with_capacity(gamma);
    for ((row, &t), bytes) in client_scores.iter().zip(batch.tokens()).zip(&received) {
        selected.push(row[t] + ot::unpack_ring(bytes, 1, cfg)?[0]);
    }
    let client_sel = SharedVector::new(Party::Client, selected, cfg)?;
    let server_sel = SharedVector::new(Party::Server, masks, cfg)?;

    let reject = f_less(
        channel,
        PHASE_COMPARE,
        &client_sel,
        &server_sel,
        backend,
        server_rng,
        functionality_rng,
    )?;

    channel.send_bits(Party::Server, PHASE_OPEN, pack_bools(&reject.server), gamma as u64)?;
    let opened = channel
        .recv(Party::Client)
        .ok_or_else(|| Error::Invariant("opening message lost".into()))?;
    let server_bits = unpack_bools(&opened.payload, gamma);
    let bits: Vec<bool> = reject
        .client
        .iter()
        .zip(server_bits)
        .map(|(a, b)| a ^ b)
        .collect();
    let k = first_reject(&bits);

    let p_k = retrieve_row(channel, shares, k, cfg)?;
    Ok(Rejection { k, p_k })
}

/// Baseline ordering: compare all `V` scores of every row, then let the
/// client pick the needed sign bit by a 1-of-V OT of 1-bit strings.
pub fn naive_verify(
    channel: &mut Channel,
    batch: &DraftBatch,
    shares: &SharedDistributions,
    backend: CompareBackend,
    rngs: &mut PartyRngs,
) -> Result<Rejection> {
    let v = batch
        .vocab()
        .ok_or_else(|| Error::Shape("empty draft batch".into()))?;
    let uniforms = draw_uniforms(batch.gamma(), v, &mut rngs.client);
    naive_verify_with_uniforms(
        channel,
        batch,
        shares,
        backend,
        &uniforms,
        &mut rngs.server,
        &mut rngs.functionality,
    )
}

pub fn naive_verify_with_uniforms<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    channel: &mut Channel,
    batch: &DraftBatch,
    shares: &SharedDistributions,
    backend: CompareBackend,
    uniforms: &[Vec<f64>],
    server_rng: &mut R1,
    functionality_rng: &mut R2,
) -> Result<Rejection> {
    let (v, cfg) = check_inputs(batch, shares)?;
    let gamma = batch.gamma();
    check_uniforms(uniforms, gamma, v)?;
    let client_scores = client_scores(batch, shares, uniforms, cfg)?;
    let client_all = SharedVector::new(Party::Client, client_scores.concat(), cfg)?;
    let server_all = SharedVector::new(
        Party::Server,
        shares.server[..gamma]
            .iter()
            .flat_map(|row| row.values().iter().map(|&p| -p))
            .collect(),
        cfg,
    )?;
    let BoolShares { client, server } = f_less(
        channel,
        PHASE_COMPARE,
        &client_all,
        &server_all,
        backend,
        server_rng,
        functionality_rng,
    )?;

    let instance = OtInstance::new(v as u64, 1)?;
    let tables: Vec<Vec<u8>> = server
        .chunks(v)
        .map(|row| row.iter().map(|&b| b as u8).collect())
        .collect();
    let requests: Vec<OtRequest<'_>> = tables
        .iter()
        .zip(batch.tokens())
        .map(|(strings, &index)| OtRequest {
            instance,
            strings,
            index,
        })
        .collect();
    let received = ot_choose_batch(channel, PHASE_SELECT, &requests)?;
    let bits: Vec<bool> = batch
        .tokens()
        .iter()
        .enumerate()
        .zip(&received)
        .map(|((i, &t), s)| client[i * v + t] ^ (s[0] & 1 == 1))
        .collect();
    let k = first_reject(&bits);
    let p_k = retrieve_row(channel, shares, k, cfg)?;
    Ok(Rejection { k, p_k })
}

/// Samples the token emitted after the first rejection (or the bonus token).
pub fn finalize_token<R: Rng + ?Sized>(
    batch: &DraftBatch,
    rejection: &Rejection,
    rng: &mut R,
) -> Result<usize> {
    if rejection.k > batch.gamma() {
        return Err(Error::Shape(format!(
            "rejection index {} exceeds {} drafts",
            rejection.k,
            batch.gamma()
        )));
    }
    sampling::finalize_token(&rejection.p_k, batch.q_dists().get(rejection.k), rng)
}

/// Settings of a secure decoding run.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub gamma: usize,
    pub ring: FixedPointConfig,
    pub backend: CompareBackend,
    pub ordering: VerifyOrdering,
    pub forward: ForwardCostProfile,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            gamma: 4,
            ring: FixedPointConfig::default(),
            backend: CompareBackend::default(),
            ordering: VerifyOrdering::default(),
            forward: ForwardCostProfile::default(),
        }
    }
}

/// Per-phase costs of one step together with its outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub step: usize,
    pub phase: String,
    #[serde(flatten)]
    pub cost: PhaseCost,
    pub k: usize,
    pub tokens: Vec<usize>,
}

/// Everything one decoding step produced.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub outcome: VerifyOutcome,
    pub phases: Vec<(String, PhaseCost)>,
    pub compute_seconds: f64,
}

impl StepReport {
    pub fn records(&self, step: usize) -> Vec<PhaseRecord> {
        self.phases
            .iter()
            .map(|(phase, cost)| PhaseRecord {
                step,
                phase: phase.clone(),
                cost: cost.clone(),
                k: self.outcome.k,
                tokens: self.outcome.emitted(),
            })
            .collect()
    }
}

fn phase_totals(channel: &Channel) -> BTreeMap<String, PhaseCost> {
    channel
        .ledger()
        .phases()
        .map(|(p, c)| (p.to_string(), c.clone()))
        .collect()
}

fn phase_delta(before: &BTreeMap<String, PhaseCost>, channel: &Channel) -> Vec<(String, PhaseCost)> {
    let zero = PhaseCost::default();
    channel
        .ledger()
        .phases()
        .filter_map(|(phase, after)| {
            let b = before.get(phase).unwrap_or(&zero);
            let d = PhaseCost {
                rounds: after.rounds - b.rounds,
                bits_c2s: after.bits_c2s - b.bits_c2s,
                bits_s2c: after.bits_s2c - b.bits_s2c,
                ot_calls: after.ot_calls - b.ot_calls,
            };
            (d != zero).then(|| (phase.to_string(), d))
        })
        .collect()
}

fn verify_and_finalize(
    channel: &mut Channel,
    batch: &DraftBatch,
    shares: &SharedDistributions,
    config: &DecoderConfig,
    rngs: &mut PartyRngs,
) -> Result<VerifyOutcome> {
    let rejection = match config.ordering {
        VerifyOrdering::SelectThenCompare => secure_verify(channel, batch, shares, config.backend, rngs)?,
        VerifyOrdering::CompareThenSelect => naive_verify(channel, batch, shares, config.backend, rngs)?,
    };
    let final_token = finalize_token(batch, &rejection, &mut rngs.client)?;
    Ok(VerifyOutcome {
        k: rejection.k,
        accepted: batch.tokens()[..rejection.k].to_vec(),
        p_k: rejection.p_k,
        final_token,
    })
}

/// One full step: draft, secure forward, verify, finalize. The new tokens
/// are `report.outcome.emitted()`.
pub fn decode_step<P, Q>(
    public_model: &P,
    private_model: &Q,
    prefix: &[usize],
    config: &DecoderConfig,
    channel: &mut Channel,
    rngs: &mut PartyRngs,
) -> Result<StepReport>
where
    P: LanguageModel + ?Sized,
    Q: LanguageModel + ?Sized,
{
    if public_model.vocab_size() != private_model.vocab_size() {
        return Err(Error::Shape(format!(
            "public vocabulary {} differs from private {}",
            public_model.vocab_size(),
            private_model.vocab_size()
        )));
    }
    let before = phase_totals(channel);
    let batch = draft_tokens(public_model, prefix, config.gamma, &mut rngs.client)?;
    let forward = secure_forward_stub(
        private_model,
        prefix,
        batch.tokens(),
        config.ring,
        &config.forward,
        channel,
        &mut rngs.functionality,
    )?;
    let outcome = verify_and_finalize(channel, &batch, &forward.shares, config, rngs)?;
    Ok(StepReport {
        outcome,
        phases: phase_delta(&before, channel),
        compute_seconds: forward.compute_seconds,
    })
}

/// Replays one recorded step: drafts and both distributions come from the
/// trace instead of models.
pub fn replay_step(
    records: &[TraceRecord],
    config: &DecoderConfig,
    channel: &mut Channel,
    rngs: &mut PartyRngs,
) -> Result<StepReport> {
    if records.len() < 2 {
        return Err(Error::Shape("a replayed step needs at least one draft".into()));
    }
    let before = phase_totals(channel);
    let drafts = &records[..records.len() - 1];
    let batch = DraftBatch::new(
        drafts.iter().map(|r| r.drafted_token).collect(),
        drafts.iter().map(|r| r.q.clone()).collect(),
    )?;
    let p: Vec<ProbVector> = records.iter().map(|r| r.p.clone()).collect();
    let shares = SharedDistributions::share(&p, config.ring, &mut rngs.functionality)?;
    let outcome = verify_and_finalize(channel, &batch, &shares, config, rngs)?;
    Ok(StepReport {
        outcome,
        phases: phase_delta(&before, channel),
        compute_seconds: 0.0,
    })
}

/// Result of generating a sequence with repeated steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<usize>,
    pub steps: Vec<StepReport>,
}

impl Generation {
    /// Estimated wall-clock time of all steps on `net`.
    pub fn latency(&self, net: &NetworkModel) -> f64 {
        self.steps
            .iter()
            .map(|s| {
                let (rounds, bits) = s
                    .phases
                    .iter()
                    .fold((0, 0), |(r, b), (_, c)| (r + c.rounds, b + c.total_bits()));
                net.latency(rounds as f64, bits as f64, s.compute_seconds)
            })
            .sum()
    }

    /// One JSON object per phase of every step.
    pub fn write_trace<W: Write>(&self, mut out: W) -> Result<()> {
        for (i, step) in self.steps.iter().enumerate() {
            for rec in step.records(i) {
                serde_json::to_writer(&mut out, &rec)?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }
}

/// Runs steps until at least `new_tokens` tokens were appended to `prefix`.
pub fn generate<P, Q>(
    public_model: &P,
    private_model: &Q,
    prefix: &[usize],
    new_tokens: usize,
    config: &DecoderConfig,
    channel: &mut Channel,
    rngs: &mut PartyRngs,
) -> Result<Generation>
where
    P: LanguageModel + ?Sized,
    Q: LanguageModel + ?Sized,
{
    let mut tokens = prefix.to_vec();
    let mut steps = Vec::new();
    while tokens.len() < prefix.len() + new_tokens {
        let report = decode_step(public_model, private_model, &tokens, config, channel, rngs)?;
        let emitted = report.outcome.emitted();
        if emitted.is_empty() {
            return Err(Error::Invariant("decoding step emitted no token".into()));
        }
        tokens.extend(emitted);
        steps.push(report);
    }
    Ok(Generation { tokens, steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{FnModel, NgramModel};
    use crate::perf::{comm_cost, CommVariant};
    use crate::sampling::speculative_step_with_uniforms;
    use crate::transport::TrafficKind;

    fn cfg() -> FixedPointConfig {
        FixedPointConfig::default()
    }

    fn shares_of(p: &[ProbVector], seed: u64) -> SharedDistributions {
        SharedDistributions::share(p, cfg(), &mut ChaCha12Rng::seed_from_u64(seed)).unwrap()
    }

    fn random_pair(vocab: usize, seed: u64) -> (NgramModel, NgramModel) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (
            NgramModel::random(1, vocab, 0.05, &mut rng).unwrap(),
            NgramModel::random(1, vocab, 0.05, &mut rng).unwrap(),
        )
    }

    #[test]
    fn drafting_follows_argmax_for_one_hot_model() {
        let m = FnModel::new(5, |p: &[usize]| ProbVector::one_hot(5, (p.last().unwrap_or(&0) + 1) % 5));
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let b = draft_tokens(&m, &[2], 4, &mut rng).unwrap();
        assert_eq!(b.tokens(), &[3, 4, 0, 1]);
        let one = draft_tokens(&m, &[2], 1, &mut rng).unwrap();
        assert_eq!((one.tokens().len(), one.q_dists().len()), (1, 1));
        assert!(draft_tokens(&m, &[2], 0, &mut rng).is_err());
    }

    #[test]
    fn drafting_is_deterministic() {
        let (q, _) = random_pair(8, 1);
        let a = draft_tokens(&q, &[1], 6, &mut ChaCha12Rng::seed_from_u64(9)).unwrap();
        let b = draft_tokens(&q, &[1], 6, &mut ChaCha12Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_shares_reconstruct_the_distributions() {
        let (_, p) = random_pair(8, 2);
        let mut ch = Channel::new();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let out = secure_forward_stub(&p, &[1, 2], &[3, 4, 5], cfg(), &ForwardCostProfile::default(), &mut ch, &mut rng)
            .unwrap();
        assert_eq!(out.shares.len(), 4);
        let plain = out.shares.reconstruct().unwrap();
        let mut ctx = vec![1, 2];
        for (i, row) in plain.iter().enumerate() {
            let expect = p.next_distribution(&ctx);
            for (a, b) in row.iter().zip(expect.probs()) {
                assert!((a - b).abs() <= cfg().resolution());
            }
            if i < 3 {
                ctx.push(3 + i);
            }
        }
        assert!(ch.ledger().phase(PHASE_FORWARD).unwrap().total_bits() > 0);
        assert_eq!(ch.transcript(Party::Server).len(), 0);

        let standard = secure_forward_stub(&p, &[1], &[], cfg(), &ForwardCostProfile::default(), &mut ch, &mut rng)
            .unwrap();
        assert_eq!(standard.shares.len(), 1);
        assert_eq!(standard.input_len, 1);
    }

    #[test]
    fn identical_models_accept_everything() {
        let (q, _) = random_pair(8, 4);
        let mut rngs = PartyRngs::from_seed(5);
        for _ in 0..50 {
            let batch = draft_tokens(&q, &[0], 4, &mut rngs.client).unwrap();
            let p_aligned: Vec<ProbVector> = batch
                .q_dists()
                .iter()
                .cloned()
                .chain([ProbVector::uniform(8)])
                .collect();
            let shares = shares_of(&p_aligned, 6);
            let mut ch = Channel::new();
            let rej = secure_verify(&mut ch, &batch, &shares, CompareBackend::default(), &mut rngs).unwrap();
            assert_eq!(rej.k, 4);
        }
    }

    #[test]
    fn zero_target_mass_rejects_first_draft() {
        let q = ProbVector::new(vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        let batch = DraftBatch::new(vec![0, 1], vec![q.clone(), q]).unwrap();
        let p0 = ProbVector::new(vec![0.0, 0.2, 0.4, 0.4]).unwrap();
        let p = vec![p0.clone(), ProbVector::uniform(4), ProbVector::uniform(4)];
        let mut rngs = PartyRngs::from_seed(1);
        for _ in 0..20 {
            let mut ch = Channel::new();
            let rej = secure_verify(&mut ch, &batch, &shares_of(&p, 2), CompareBackend::default(), &mut rngs).unwrap();
            assert_eq!(rej.k, 0);
            assert!(rej.p_k.tv_distance(&p0) < 1e-3);
        }
    }

    #[test]
    fn matches_plaintext_oracle_away_from_boundaries() {
        let c = cfg();
        let margin = 2.0 / c.scale();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut compared = 0;
        for run in 0..300u64 {
            let (q_model, p_model) = random_pair(8, 100 + run);
            let batch = draft_tokens(&q_model, &[run as usize % 8], 3, &mut rng).unwrap();
            let mut ctx = vec![run as usize % 8];
            let mut p = vec![p_model.next_distribution(&ctx)];
            for &t in batch.tokens() {
                ctx.push(t);
                p.push(p_model.next_distribution(&ctx));
            }
            let uniforms = draw_uniforms(3, 8, &mut rng);
            let diag: Vec<f64> = batch.tokens().iter().zip(&uniforms).map(|(&t, r)| r[t]).collect();
            let near = (0..3).any(|i| {
                let t = batch.tokens()[i];
                (batch.q_dists()[i].get(t) * diag[i] - p[i].get(t)).abs() <= margin
            });
            if near {
                continue;
            }
            let oracle = speculative_step_with_uniforms(&p, &batch, &diag, &mut rng).unwrap();
            let shares = shares_of(&p, run);
            for naive in [false, true] {
                let mut ch = Channel::new();
                let mut srv = ChaCha12Rng::seed_from_u64(run);
                let mut fun = ChaCha12Rng::seed_from_u64(run + 1);
                let f = if naive { naive_verify_with_uniforms } else { secure_verify_with_uniforms };
                let rej = f(&mut ch, &batch, &shares, CompareBackend::default(), &uniforms, &mut srv, &mut fun).unwrap();
                assert_eq!(rej.k, oracle.k);
                for (a, b) in rej.p_k.probs().iter().zip(oracle.p_k.probs()) {
                    assert!((a - b).abs() < 1e-3);
                }
            }
            compared += 1;
        }
        assert!(compared > 250);
    }

    #[test]
    fn ledger_matches_closed_form() {
        for (v, ell, gamma) in [(8, 16, 1), (8, 32, 4), (64, 16, 2)] {
            let c = FixedPointConfig::new(ell, 8).unwrap();
            let (q_model, p_model) = random_pair(v, 11);
            let mut rngs = PartyRngs::from_seed(12);
            let batch = draft_tokens(&q_model, &[0], gamma, &mut rngs.client).unwrap();
            let p: Vec<ProbVector> = (0..=gamma).map(|i| p_model.next_distribution(&batch.tokens()[..i])).collect();
            let shares = SharedDistributions::share(&p, c, &mut rngs.functionality).unwrap();
            let backend = CompareBackend::chunked(4);
            let mut ch = Channel::new();
            secure_verify(&mut ch, &batch, &shares, backend, &mut rngs).unwrap();
            let expect = comm_cost(v, ell, gamma, 4, CommVariant::OptimizedChunked).unwrap();
            assert_eq!(ch.ledger().total_bits() as u128, expect);
            let mut ch = Channel::new();
            naive_verify(&mut ch, &batch, &shares, backend, &mut rngs).unwrap();
            let expect = comm_cost(v, ell, gamma, 4, CommVariant::NaiveChunked).unwrap();
            assert_eq!(ch.ledger().total_bits() as u128, expect);
        }
    }

    #[test]
    fn server_sees_only_functionality_traffic_of_fixed_shape() {
        let (q_model, p_model) = random_pair(8, 20);
        let mut views = Vec::new();
        for seed in 0..10 {
            let mut rngs = PartyRngs::from_seed(seed);
            let batch = draft_tokens(&q_model, &[seed as usize % 8], 3, &mut rngs.client).unwrap();
            let p: Vec<ProbVector> = (0..=3).map(|i| p_model.next_distribution(&batch.tokens()[..i])).collect();
            let shares = SharedDistributions::share(&p, cfg(), &mut rngs.functionality).unwrap();
            let mut ch = Channel::new();
            secure_verify(&mut ch, &batch, &shares, CompareBackend::default(), &mut rngs).unwrap();
            let view = ch.transcript(Party::Server).to_vec();
            assert!(view.iter().all(|e| matches!(e.kind, TrafficKind::Functionality(_))));
            views.push(view);
        }
        assert!(views.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn finalize_branches() {
        let q = ProbVector::one_hot(4, 2);
        let batch = DraftBatch::new(vec![2], vec![q]).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let reject = Rejection {
            k: 0,
            p_k: ProbVector::uniform(4),
        };
        for _ in 0..200 {
            assert_ne!(finalize_token(&batch, &reject, &mut rng).unwrap(), 2);
        }
        let bonus = Rejection {
            k: 1,
            p_k: ProbVector::one_hot(4, 3),
        };
        assert_eq!(finalize_token(&batch, &bonus, &mut rng).unwrap(), 3);
        let bad = Rejection {
            k: 2,
            p_k: ProbVector::uniform(4),
        };
        assert!(finalize_token(&batch, &bad, &mut rng).is_err());
    }

    #[test]
    fn all_rejected_still_emits_one_token() {
        let public = FnModel::new(6, |_: &[usize]| ProbVector::uniform(6));
        let private = FnModel::new(6, |_: &[usize]| ProbVector::one_hot(6, 4));
        let config = DecoderConfig {
            gamma: 3,
            ..DecoderConfig::default()
        };
        let mut rngs = PartyRngs::from_seed(2);
        let mut ch = Channel::new();
        for _ in 0..20 {
            let r = decode_step(&public, &private, &[0], &config, &mut ch, &mut rngs).unwrap();
            let emitted = r.outcome.emitted();
            assert!(!emitted.is_empty());
            if r.outcome.k == 0 {
                assert_eq!(emitted, vec![4]);
            }
        }
    }

    #[test]
    fn identical_models_emit_gamma_plus_one() {
        let (m, _) = random_pair(8, 30);
        let config = DecoderConfig {
            gamma: 5,
            ..DecoderConfig::default()
        };
        let mut rngs = PartyRngs::from_seed(31);
        let mut ch = Channel::new();
        let g = generate(&m, &m, &[1], 30, &config, &mut ch, &mut rngs).unwrap();
        assert!(g.steps.iter().all(|s| s.outcome.emitted().len() == 6));
        assert!(g.latency(&NetworkModel::lan()) > 0.0);
        let mut buf = Vec::new();
        g.write_trace(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let first: PhaseRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first.step, 0);
        assert!(text.lines().all(|l| l.contains("\"rounds\"")));
    }

    #[test]
    fn replay_reproduces_recorded_drafts() {
        let (q_model, p_model) = random_pair(8, 40);
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let mut records = Vec::new();
        for pos in 0..=3 {
            let ctx = vec![pos];
            let q = q_model.next_distribution(&ctx);
            records.push(TraceRecord {
                position: pos,
                drafted_token: q.sample(&mut rng),
                p: p_model.next_distribution(&ctx),
                q,
            });
        }
        let mut rngs = PartyRngs::from_seed(42);
        let mut ch = Channel::new();
        let r = replay_step(&records, &DecoderConfig::default(), &mut ch, &mut rngs).unwrap();
        let recorded: Vec<usize> = records[..3].iter().map(|r| r.drafted_token).collect();
        assert_eq!(r.outcome.accepted, recorded[..r.outcome.k]);
    }

    #[test]
    fn shape_errors() {
        let q = ProbVector::uniform(4);
        let batch = DraftBatch::new(vec![1, 2], vec![q.clone(), q.clone()]).unwrap();
        let mut rngs = PartyRngs::from_seed(0);
        let mut ch = Channel::new();
        let short = shares_of(&[q.clone(), q.clone()], 0);
        assert!(secure_verify(&mut ch, &batch, &short, CompareBackend::Ideal, &mut rngs).is_err());
        let wrong_v = shares_of(&vec![ProbVector::uniform(5); 3], 0);
        assert!(secure_verify(&mut ch, &batch, &wrong_v, CompareBackend::Ideal, &mut rngs).is_err());
        let ok = shares_of(&vec![q; 3], 0);
        let bad_uniforms = vec![vec![0.5; 4]];
        assert!(secure_verify_with_uniforms(
            &mut ch,
            &batch,
            &ok,
            CompareBackend::Ideal,
            &bad_uniforms,
            &mut rngs.server,
            &mut rngs.functionality
        )
        .is_err());
    }
}
