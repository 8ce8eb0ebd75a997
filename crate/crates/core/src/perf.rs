//! Closed-form cost and speedup models.
//!
//! Everything here is a pure function of its parameters. The chunked
//! communication formulas are what the protocol ledgers are audited against;
//! the monolithic ones are model curves only.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::Serialize;

use crate::transport::NetworkModel;
use crate::{Error, Result};

fn ceil_log2(k: u128) -> u128 {
    if k <= 1 {
        0
    } else {
        128 - (k - 1).leading_zeros() as u128
    }
}

/// Expected tokens emitted per step, `(1 - a^(g+1)) / (1 - a)`, and `g + 1`
/// at `a = 1`.
pub fn expected_tokens_per_step(alpha: f64, gamma: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config {
            field: "alpha".into(),
            message: format!("must lie in [0, 1], got {alpha}"),
        });
    }
    if gamma == 0 {
        return Err(Error::Config {
            field: "gamma".into(),
            message: "must be at least 1".into(),
        });
    }
    if alpha == 1.0 {
        return Ok(gamma as f64 + 1.0);
    }
    Ok((1.0 - alpha.powi(gamma as i32 + 1)) / (1.0 - alpha))
}

/// The unbounded-draft-length limit `1 / (1 - a)`.
pub fn expected_tokens_unbounded(alpha: f64) -> f64 {
    1.0 / (1.0 - alpha)
}

/// Which verification ordering and comparison realization to cost.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CommVariant {
    NaiveMonolithic,
    OptimizedMonolithic,
    NaiveChunked,
    OptimizedChunked,
}

impl CommVariant {
    pub const ALL: [CommVariant; 4] = [
        CommVariant::NaiveMonolithic,
        CommVariant::OptimizedMonolithic,
        CommVariant::NaiveChunked,
        CommVariant::OptimizedChunked,
    ];

    pub fn is_chunked(self) -> bool {
        matches!(self, CommVariant::NaiveChunked | CommVariant::OptimizedChunked)
    }
}

impl fmt::Display for CommVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CommVariant::NaiveMonolithic => "naive_monolithic",
            CommVariant::OptimizedMonolithic => "optimized_monolithic",
            CommVariant::NaiveChunked => "naive_chunked",
            CommVariant::OptimizedChunked => "optimized_chunked",
        })
    }
}

impl FromStr for CommVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CommVariant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::Config {
                field: "variant".into(),
                message: format!("unknown variant `{s}`"),
            })
    }
}

/// Bits of one chunked sign test on `ell`-bit values with `m`-bit digits:
/// `q (2^(m+1) + m) + 5 (q - 1)` for `q = ell / m`.
pub fn chunked_compare_bits(ell: u32, m: u32) -> Result<u128> {
    if m == 0 || ell % m != 0 || m > 64 {
        return Err(Error::Config {
            field: "chunk_bits".into(),
            message: format!("{m} does not divide ell = {ell}"),
        });
    }
    let q = (ell / m) as u128;
    Ok(q * ((1u128 << m) * 2 + m as u128) + (q - 1) * 5)
}

fn check_positive(v: usize, ell: u32, gamma: usize) -> Result<()> {
    let bad = |field: &str| Error::Config {
        field: field.into(),
        message: "must be positive".into(),
    };
    if v < 2 {
        return Err(bad("vocab"));
    }
    if ell == 0 || ell > 64 {
        return Err(Error::Config {
            field: "ell".into(),
            message: format!("must lie in 1..=64, got {ell}"),
        });
    }
    if gamma == 0 {
        return Err(bad("gamma"));
    }
    Ok(())
}

/// Bits contributed by each draft token.
pub fn per_token_cost(v: usize, ell: u32, m: u32, variant: CommVariant) -> Result<u128> {
    let vv = v as u128;
    let l = ell as u128;
    let logv = ceil_log2(vv);
    let mono = 2u128 << ell;
    Ok(match variant {
        CommVariant::NaiveMonolithic => 2 * vv * (1u128 << ell) + vv * l + vv + logv,
        CommVariant::OptimizedMonolithic => vv * l + logv + mono + l,
        CommVariant::NaiveChunked => vv * chunked_compare_bits(ell, m)? + vv + logv,
        // selection, one comparison, then one opened bit
        CommVariant::OptimizedChunked => vv * l + logv + chunked_compare_bits(ell, m)? + 1,
    })
}

/// Bits of the closing transfer of the target distribution at the rejection
/// point: one 1-out-of-(g+1) OT of `V * ell`-bit strings.
pub fn final_transfer_cost(v: usize, ell: u32, gamma: usize) -> u128 {
    let k = gamma as u128 + 1;
    k * v as u128 * ell as u128 + ceil_log2(k)
}

/// Bits for one decoding step's verification.
pub fn comm_cost(v: usize, ell: u32, gamma: usize, m: u32, variant: CommVariant) -> Result<u128> {
    check_positive(v, ell, gamma)?;
    Ok(gamma as u128 * per_token_cost(v, ell, m, variant)? + final_transfer_cost(v, ell, gamma))
}

/// Rounds of one verification with the chunked comparison.
pub fn verify_rounds(ell: u32, m: u32, variant: CommVariant) -> Result<u64> {
    chunked_compare_bits(ell, m)?;
    let q = (ell / m) as u64;
    Ok(match variant {
        // selection OT, comparison, opening, final OT
        CommVariant::OptimizedChunked | CommVariant::OptimizedMonolithic => 2 + 2 * q + 1 + 2,
        CommVariant::NaiveChunked | CommVariant::NaiveMonolithic => 2 * q + 2 + 2,
    })
}

/// Number of OT invocations of one chunked verification.
pub fn verify_ot_calls(v: usize, ell: u32, gamma: usize, m: u32, variant: CommVariant) -> Result<u64> {
    chunked_compare_bits(ell, m)?;
    let q = (ell / m) as u64;
    let per_compare = 2 * q - 1;
    let per_token = match variant {
        CommVariant::OptimizedChunked | CommVariant::OptimizedMonolithic => 1 + per_compare,
        CommVariant::NaiveChunked | CommVariant::NaiveMonolithic => v as u64 * per_compare + 1,
    };
    Ok(gamma as u64 * per_token + 1)
}

/// Piecewise-linear multiplier of forward latency as a function of the number
/// of input tokens. Extrapolates the last segment beyond the final knot.
#[derive(Clone, Debug, PartialEq)]
pub struct LengthScaling {
    knots: Vec<(f64, f64)>,
}

impl Default for LengthScaling {
    fn default() -> Self {
        Self {
            knots: vec![(1.0, 1.0), (4.0, 1.05), (8.0, 1.2), (16.0, 1.5)],
        }
    }
}

impl LengthScaling {
    pub fn new(mut knots: Vec<(f64, f64)>) -> Result<Self> {
        knots.sort_by(|a, b| a.0.total_cmp(&b.0));
        let err = |message: &str| Error::Config {
            field: "length_scaling".into(),
            message: message.into(),
        };
        if knots.first() != Some(&(1.0, 1.0)) {
            return Err(err("must start at (1, 1)"));
        }
        if knots.windows(2).any(|w| w[1].0 <= w[0].0 || w[1].1 < w[0].1) {
            return Err(err("lengths must be distinct and multipliers nondecreasing"));
        }
        Ok(Self { knots })
    }

    pub fn constant() -> Self {
        Self {
            knots: vec![(1.0, 1.0)],
        }
    }

    pub fn at(&self, len: f64) -> f64 {
        let k = &self.knots;
        if k.len() == 1 || len <= 1.0 {
            return 1.0;
        }
        let seg = k
            .windows(2)
            .find(|w| len <= w[1].0)
            .unwrap_or(&k[k.len() - 2..]);
        let (x0, y0) = seg[0];
        let (x1, y1) = seg[1];
        y0 + (y1 - y0) * (len - x0) / (x1 - x0)
    }
}

/// Forward-pass timing of the private model plus the secure sampling
/// overhead on specific links.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderCostProfile {
    pub base_time_at_len1: f64,
    pub length_scaling: LengthScaling,
    pub sampling_overhead: Vec<SamplingOverhead>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingOverhead {
    pub network: NetworkModel,
    pub gamma: usize,
    pub seconds: f64,
}

impl DecoderCostProfile {
    pub fn new(base_time_at_len1: f64, length_scaling: LengthScaling) -> Result<Self> {
        if !(base_time_at_len1 > 0.0) {
            return Err(Error::Config {
                field: "base_time_at_len1".into(),
                message: "must be positive".into(),
            });
        }
        Ok(Self {
            base_time_at_len1,
            length_scaling,
            sampling_overhead: Vec::new(),
        })
    }

    pub fn with_overhead(mut self, network: NetworkModel, gamma: usize, seconds: f64) -> Self {
        self.sampling_overhead.push(SamplingOverhead {
            network,
            gamma,
            seconds,
        });
        self
    }

    /// Measured decoder and optimized-sampling times on the 1 Gbps / 10 ms link.
    pub fn reference_lan() -> Self {
        Self::new(8.67, LengthScaling::default())
            .expect("positive")
            .with_overhead(NetworkModel::lan(), 4, 1.19)
            .with_overhead(NetworkModel::lan(), 8, 1.45)
    }

    /// Same for 400 Mbps / 40 ms.
    pub fn reference_wan() -> Self {
        Self::new(22.49, LengthScaling::default())
            .expect("positive")
            .with_overhead(NetworkModel::wan(), 4, 3.04)
            .with_overhead(NetworkModel::wan(), 8, 4.12)
    }

    /// Overhead for `(net, gamma)`, zero when none was recorded.
    pub fn overhead(&self, net: &NetworkModel, gamma: usize) -> f64 {
        self.sampling_overhead
            .iter()
            .find(|o| o.network == *net && o.gamma == gamma)
            .map_or(0.0, |o| o.seconds)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SpeedupPoint {
    pub alpha: f64,
    pub gamma: usize,
    pub speedup: f64,
}

/// End-to-end speedup over one-token-per-step secure decoding. Drafting on
/// the client is free.
pub fn speedup(
    alpha: f64,
    gamma: usize,
    profile: &DecoderCostProfile,
    net: &NetworkModel,
) -> Result<SpeedupPoint> {
    let tokens = expected_tokens_per_step(alpha, gamma)?;
    let base = profile.base_time_at_len1;
    let step = base * profile.length_scaling.at(gamma as f64) + profile.overhead(net, gamma);
    Ok(SpeedupPoint {
        alpha,
        gamma,
        speedup: tokens * base / step,
    })
}

/// `base * len^exponent`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Growth {
    pub base: f64,
    pub exponent: f64,
}

impl Growth {
    pub const fn new(base: f64, exponent: f64) -> Self {
        Self { base, exponent }
    }

    pub const fn constant(base: f64) -> Self {
        Self::new(base, 0.0)
    }

    pub fn at(&self, len: f64) -> f64 {
        self.base * len.powf(self.exponent)
    }
}

/// Cost of one layer of a secure forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCost {
    pub name: String,
    pub rounds: f64,
    pub bytes: Growth,
    pub compute_seconds: Growth,
}

impl LayerCost {
    pub fn new(name: &str, rounds: f64, bytes: Growth, compute_seconds: Growth) -> Self {
        Self {
            name: name.to_string(),
            rounds,
            bytes,
            compute_seconds,
        }
    }
}

/// Per-layer costs of one decoder block.
///
/// Linear layers run under HE, where a longer input fills more slots of the
/// same ciphertexts, so their traffic and compute grow slowly. Nonlinear
/// layers run as MPC protocols whose traffic is linear in the number of
/// tokens. Round counts do not depend on the length.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardCostProfile {
    pub layers: Vec<LayerCost>,
}

impl Default for ForwardCostProfile {
    fn default() -> Self {
        Self {
            layers: vec![
                LayerCost::new("attention-linear", 4.0, Growth::new(6.0e6, 0.1), Growth::new(0.10, 0.1)),
                LayerCost::new("ffn-linear", 4.0, Growth::new(12.0e6, 0.1), Growth::new(0.18, 0.1)),
                LayerCost::new("softmax", 60.0, Growth::new(2.5e6, 1.0), Growth::new(0.0125, 0.5)),
                LayerCost::new("gelu", 50.0, Growth::new(3.75e6, 1.0), Growth::new(0.0125, 0.5)),
                LayerCost::new("layernorm", 40.0, Growth::new(0.5e6, 1.0), Growth::new(0.0025, 0.5)),
            ],
        }
    }
}

impl ForwardCostProfile {
    pub fn constant(rounds: f64, bytes: f64, compute_seconds: f64) -> Self {
        Self {
            layers: vec![LayerCost::new(
                "constant",
                rounds,
                Growth::constant(bytes),
                Growth::constant(compute_seconds),
            )],
        }
    }

    pub fn rounds(&self) -> f64 {
        self.layers.iter().map(|l| l.rounds).sum()
    }

    pub fn bytes(&self, len: usize) -> f64 {
        self.layers.iter().map(|l| l.bytes.at(len as f64)).sum()
    }

    pub fn compute_seconds(&self, len: usize) -> f64 {
        self.layers.iter().map(|l| l.compute_seconds.at(len as f64)).sum()
    }

    pub fn latency(&self, net: &NetworkModel, len: usize) -> Result<f64> {
        length_latency(net, &self.layers, len)
    }
}

/// Sum over layers of `rounds * delay + 8 * bytes(len) / bandwidth + compute(len)`.
pub fn length_latency(net: &NetworkModel, layers: &[LayerCost], len: usize) -> Result<f64> {
    if len == 0 {
        return Err(Error::Config {
            field: "len".into(),
            message: "input length must be at least 1".into(),
        });
    }
    let n = len as f64;
    Ok(layers
        .iter()
        .map(|l| net.latency(l.rounds, 8.0 * l.bytes.at(n), l.compute_seconds.at(n)))
        .sum())
}

/// Wall-clock model of a secure sampling run driven by its closed-form
/// traffic: `rounds * delay + (bits + ot_setup * ot_calls) * (1/bandwidth +
/// seconds_per_bit)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingTimeModel {
    pub vocab: usize,
    pub ell: u32,
    pub chunk_bits: u32,
    /// Extra bits per OT invocation for the extension it runs on.
    pub ot_setup_bits: f64,
    pub seconds_per_bit: f64,
}

impl SamplingTimeModel {
    pub fn new(vocab: usize, ell: u32, chunk_bits: u32) -> Self {
        Self {
            vocab,
            ell,
            chunk_bits,
            ot_setup_bits: 128.0,
            seconds_per_bit: 0.0,
        }
    }

    fn effective_bits(&self, gamma: usize, variant: CommVariant) -> Result<f64> {
        let bits = comm_cost(self.vocab, self.ell, gamma, self.chunk_bits, variant)? as f64;
        let ots = verify_ot_calls(self.vocab, self.ell, gamma, self.chunk_bits, variant)? as f64;
        Ok(bits + self.ot_setup_bits * ots)
    }

    pub fn seconds(&self, gamma: usize, variant: CommVariant, net: &NetworkModel) -> Result<f64> {
        let rounds = verify_rounds(self.ell, self.chunk_bits, variant)? as f64;
        let bits = self.effective_bits(gamma, variant)?;
        Ok(rounds * net.one_way_delay() + bits * (1.0 / net.bandwidth_bps() + self.seconds_per_bit))
    }

    /// Fits `seconds_per_bit` so that one observed configuration is matched
    /// exactly.
    pub fn calibrate(
        mut self,
        gamma: usize,
        variant: CommVariant,
        net: &NetworkModel,
        observed_seconds: f64,
    ) -> Result<Self> {
        let rounds = verify_rounds(self.ell, self.chunk_bits, variant)? as f64;
        let bits = self.effective_bits(gamma, variant)?;
        let c = (observed_seconds - rounds * net.one_way_delay()) / bits - 1.0 / net.bandwidth_bps();
        if !(c >= 0.0) {
            return Err(Error::Config {
                field: "observed_seconds".into(),
                message: "too small to be explained by network time".into(),
            });
        }
        self.seconds_per_bit = c;
        Ok(self)
    }
}

/// One cell of the naive vs optimized sampling comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingReference {
    pub network: NetworkModel,
    pub gamma: usize,
    pub decoder_seconds: f64,
    pub naive_seconds: f64,
    pub optimized_seconds: f64,
}

/// Measured sampling times for a 32000-token vocabulary.
pub fn sampling_reference() -> [SamplingReference; 4] {
    let cell = |network, gamma, decoder_seconds, naive_seconds, optimized_seconds| SamplingReference {
        network,
        gamma,
        decoder_seconds,
        naive_seconds,
        optimized_seconds,
    };
    [
        cell(NetworkModel::lan(), 4, 7.11, 14.78, 1.19),
        cell(NetworkModel::lan(), 8, 8.67, 28.26, 1.45),
        cell(NetworkModel::wan(), 4, 20.32, 24.44, 3.04),
        cell(NetworkModel::wan(), 8, 22.49, 46.62, 4.12),
    ]
}

/// The sampling model used to predict [`sampling_reference`]: 64-bit ring,
/// 4-bit digits, calibrated on the naive LAN run with eight drafts.
pub fn reference_sampling_model() -> Result<SamplingTimeModel> {
    let cal = sampling_reference()[1];
    SamplingTimeModel::new(32_000, 64, 4).calibrate(
        cal.gamma,
        CommVariant::NaiveChunked,
        &cal.network,
        cal.naive_seconds,
    )
}

#[derive(Debug, Serialize)]
struct CommRow {
    #[serde(rename = "V")]
    vocab: usize,
    ell: u32,
    m: u32,
    variant: String,
    bits: String,
}

#[derive(Debug, Serialize)]
struct LengthRow {
    len: usize,
    seconds: f64,
}

/// CSV with header `alpha,gamma,speedup`.
pub fn write_speedup_csv<W: Write>(points: &[SpeedupPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// CSV with header `V,ell,m,variant,bits` for every combination.
pub fn write_comm_sweep_csv<W: Write>(
    vocabs: &[usize],
    ells: &[u32],
    m: u32,
    gamma: usize,
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for &vocab in vocabs {
        for &ell in ells {
            for variant in CommVariant::ALL {
                let bits = comm_cost(vocab, ell, gamma, m, variant)?;
                w.serialize(CommRow {
                    vocab,
                    ell,
                    m,
                    variant: variant.to_string(),
                    bits: bits.to_string(),
                })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// CSV with header `len,seconds`.
pub fn write_length_csv<W: Write>(
    profile: &ForwardCostProfile,
    net: &NetworkModel,
    lens: &[usize],
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for &len in lens {
        w.serialize(LengthRow {
            len,
            seconds: profile.latency(net, len)?,
        })?;
    }
    w.flush()?;
    Ok(())
}
