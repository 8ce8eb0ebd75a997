//! Fixed-point values in `Z_{2^ell}` and two-party additive secret sharing.
//!
//! Probabilities are carried as fixed-point integers with `frac` fractional
//! bits. Sharing splits a ring element into a uniformly random client share
//! and a server share such that the two sum to the value modulo `2^ell`.

use std::ops::{Add, Neg, Sub};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::transport::Party;
use crate::{Error, Result};

/// Bit width of the ring and the position of the binary point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedPointConfig {
    ell: u32,
    frac: u32,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self { ell: 32, frac: 12 }
    }
}

impl FixedPointConfig {
    /// Requires `2 <= frac < ell <= 64`.
    pub fn new(ell: u32, frac: u32) -> Result<Self> {
        if !(2..=64).contains(&ell) || frac < 2 || frac >= ell {
            return Err(Error::InvalidConfig { ell, frac });
        }
        Ok(Self { ell, frac })
    }

    pub fn ell(&self) -> u32 {
        self.ell
    }

    pub fn frac(&self) -> u32 {
        self.frac
    }

    /// `2^ell - 1`.
    pub fn mask(&self) -> u64 {
        if self.ell == 64 {
            u64::MAX
        } else {
            (1u64 << self.ell) - 1
        }
    }

    /// `2^frac` as a float.
    pub fn scale(&self) -> f64 {
        (self.frac as f64).exp2()
    }

    /// Exclusive bound on the magnitude of encodable reals, `2^(ell-frac-1)`.
    pub fn bound(&self) -> f64 {
        ((self.ell - self.frac - 1) as f64).exp2()
    }

    /// Largest decoding error of a round trip, `2^(-frac-1)`.
    pub fn resolution(&self) -> f64 {
        (-(self.frac as f64) - 1.0).exp2()
    }

    /// Wraps a raw integer into the ring.
    pub fn ring(&self, raw: u64) -> RingValue {
        RingValue {
            raw: raw & self.mask(),
            cfg: *self,
        }
    }

    pub fn zero(&self) -> RingValue {
        self.ring(0)
    }

    /// Draws a uniform ring element.
    pub fn random<R: Rng + ?Sized>(&self, rng: &mut R) -> RingValue {
        self.ring(rng.gen::<u64>())
    }

    pub fn encode(&self, x: f64) -> Result<RingValue> {
        encode_fixed(x, *self)
    }
}

/// An element of `Z_{2^ell}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RingValue {
    raw: u64,
    cfg: FixedPointConfig,
}

impl RingValue {
    pub fn raw(&self) -> u64 {
        self.raw
    }

    pub fn cfg(&self) -> FixedPointConfig {
        self.cfg
    }

    /// Two's-complement interpretation.
    pub fn signed(&self) -> i128 {
        let ell = self.cfg.ell;
        let half = 1u128 << (ell - 1);
        let raw = self.raw as u128;
        if raw >= half {
            raw as i128 - (1i128 << ell)
        } else {
            raw as i128
        }
    }

    /// Most significant bit of the `ell`-bit representation.
    pub fn msb(&self) -> bool {
        (self.raw >> (self.cfg.ell - 1)) & 1 == 1
    }

    pub fn decode(&self) -> f64 {
        decode_fixed(*self)
    }

    fn check_same(&self, other: &Self) {
        assert_eq!(
            self.cfg.ell, other.cfg.ell,
            "ring arithmetic across different bit widths"
        );
    }
}

impl Add for RingValue {
    type Output = RingValue;

    fn add(self, rhs: Self) -> Self::Output {
        self.check_same(&rhs);
        self.cfg.ring(self.raw.wrapping_add(rhs.raw))
    }
}

impl Sub for RingValue {
    type Output = RingValue;

    fn sub(self, rhs: Self) -> Self::Output {
        self.check_same(&rhs);
        self.cfg.ring(self.raw.wrapping_sub(rhs.raw))
    }
}

impl Neg for RingValue {
    type Output = RingValue;

    fn neg(self) -> Self::Output {
        self.cfg.ring(self.raw.wrapping_neg())
    }
}

/// Encodes `x` as `round(x * 2^frac) mod 2^ell`, rounding half away from zero.
pub fn encode_fixed(x: f64, cfg: FixedPointConfig) -> Result<RingValue> {
    let bound = cfg.bound();
    if !x.is_finite() || x.abs() >= bound {
        return Err(Error::Overflow { value: x, bound });
    }
    let scaled = (x * cfg.scale()).round();
    let half = (1i128 << (cfg.ell - 1)) as f64;
    if scaled >= half || scaled < -half {
        return Err(Error::Overflow { value: x, bound });
    }
    let n = scaled as i128;
    Ok(cfg.ring(n.rem_euclid(1i128 << cfg.ell) as u64))
}

pub fn decode_fixed(v: RingValue) -> f64 {
    v.signed() as f64 / v.cfg.scale()
}

/// Splits `v` into `(client, server)` with a uniform client share.
pub fn make_shares<R: Rng + ?Sized>(v: RingValue, rng: &mut R) -> (RingValue, RingValue) {
    let client = v.cfg.random(rng);
    (client, v - client)
}

/// `(a + b) mod 2^ell`.
pub fn reconstruct(a: RingValue, b: RingValue) -> Result<RingValue> {
    if a.cfg != b.cfg {
        return Err(Error::ConfigMismatch {
            left: a.cfg,
            right: b.cfg,
        });
    }
    Ok(a + b)
}

/// One party's share of a vector of ring values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SharedVector {
    party: Party,
    values: Vec<RingValue>,
    cfg: FixedPointConfig,
}

impl SharedVector {
    pub fn new(party: Party, values: Vec<RingValue>, cfg: FixedPointConfig) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| v.cfg != cfg) {
            return Err(Error::ConfigMismatch {
                left: cfg,
                right: bad.cfg,
            });
        }
        Ok(Self { party, values, cfg })
    }

    /// Shares a plaintext vector, returning `(client, server)` halves.
    pub fn share<R: Rng + ?Sized>(
        plain: &[RingValue],
        cfg: FixedPointConfig,
        rng: &mut R,
    ) -> Result<(SharedVector, SharedVector)> {
        let mut client = Vec::with_capacity(plain.len());
        let mut server = Vec::with_capacity(plain.len());
        for &v in plain {
            if v.cfg != cfg {
                return Err(Error::ConfigMismatch {
                    left: cfg,
                    right: v.cfg,
                });
            }
            let (c, s) = make_shares(v, rng);
            client.push(c);
            server.push(s);
        }
        Ok((
            SharedVector {
                party: Party::Client,
                values: client,
                cfg,
            },
            SharedVector {
                party: Party::Server,
                values: server,
                cfg,
            },
        ))
    }

    /// Encodes and shares a vector of reals.
    pub fn share_reals<R: Rng + ?Sized>(
        plain: &[f64],
        cfg: FixedPointConfig,
        rng: &mut R,
    ) -> Result<(SharedVector, SharedVector)> {
        let encoded = plain
            .iter()
            .map(|&x| encode_fixed(x, cfg))
            .collect::<Result<Vec<_>>>()?;
        Self::share(&encoded, cfg, rng)
    }

    pub fn party(&self) -> Party {
        self.party
    }

    pub fn cfg(&self) -> FixedPointConfig {
        self.cfg
    }

    pub fn values(&self) -> &[RingValue] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Elementwise reconstruction against the other party's share.
    pub fn reconstruct_with(&self, other: &SharedVector) -> Result<Vec<RingValue>> {
        if self.cfg != other.cfg {
            return Err(Error::ConfigMismatch {
                left: self.cfg,
                right: other.cfg,
            });
        }
        if self.len() != other.len() {
            return Err(Error::Shape(format!(
                "share lengths differ: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| reconstruct(a, b))
            .collect()
    }
}
