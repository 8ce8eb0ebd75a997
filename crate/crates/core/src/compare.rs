//! Secure sign test: from additive shares of `x`, produce XOR shares of
//! `[signed(x) > 0]`.
//!
//! Two backends are provided. [`CompareBackend::Ideal`] is a trusted
//! functionality charging two bits per element. [`CompareBackend::Chunked`]
//! runs the digit-decomposed millionaires' comparison: one 1-out-of-2^m OT of
//! 2-bit strings per m-bit digit, then a most-significant-first ripple of
//! secure-AND steps, each charged as one 1-out-of-2 OT of 2-bit strings.
//!
//! The chunked realization tests `x - 1` rather than `x`. With client share
//! `a`, server share `b`, `z = x - 1 = (a - 1) + b`:
//!
//! * `msb(z) = msb(a - 1) ^ msb(b) ^ [a' > c]`
//! * the low `ell - 1` bits of `z` are all ones iff `a' == c`
//!
//! where `a'` and `b'` are the low `ell - 1` bits of the shares and
//! `c = 2^(ell-1) - 1 - b'`. Then `x > 0` iff `msb(z) == 0` and the low bits
//! are not all ones, which reduces to `lt(a', c)` when the two MSBs agree and
//! `gt(a', c)` when they differ. Appending the MSB of each share as the
//! lowest bit of each comparison operand folds that case split into the
//! least significant digit, so one `ell`-bit comparison suffices.

use rand::Rng;

use crate::ot::{self, ceil_log2, OtInstance, OtRequest};
use crate::ring::{RingValue, SharedVector};
use crate::transport::{Channel, OtRecord, Party};
use crate::{Error, Result};

/// Which realization of the comparison to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompareBackend {
    Ideal,
    Chunked { chunk_bits: u32 },
}

impl Default for CompareBackend {
    fn default() -> Self {
        CompareBackend::Chunked { chunk_bits: 4 }
    }
}

impl CompareBackend {
    pub fn chunked(chunk_bits: u32) -> Self {
        CompareBackend::Chunked { chunk_bits }
    }

    /// Number of digits for a ring of `ell` bits.
    pub fn chunks(&self, ell: u32) -> Result<u32> {
        match *self {
            CompareBackend::Ideal => Ok(1),
            CompareBackend::Chunked { chunk_bits: m } => {
                if m == 0 || m > 16 || ell % m != 0 {
                    return Err(Error::Compare(format!(
                        "chunk size {m} must divide ell = {ell} (and be at most 16)"
                    )));
                }
                Ok(ell / m)
            }
        }
    }

    /// Exact ledger bits charged per compared element.
    pub fn bits_per_element(&self, ell: u32) -> Result<u64> {
        match *self {
            CompareBackend::Ideal => Ok(2),
            CompareBackend::Chunked { chunk_bits: m } => {
                let q = self.chunks(ell)? as u64;
                let digit = OtInstance::new(1 << m, 2)?.cost_bits();
                let and = OtInstance::new(2, 2)?.cost_bits();
                Ok(q * digit + (q - 1) * and)
            }
        }
    }

    /// Rounds taken by one (vectorized) comparison.
    pub fn rounds(&self, ell: u32) -> Result<u64> {
        Ok(2 * self.chunks(ell)? as u64)
    }
}

/// XOR shares of one boolean per compared element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolShares {
    pub client: Vec<bool>,
    pub server: Vec<bool>,
}

impl BoolShares {
    pub fn reconstruct(&self) -> Vec<bool> {
        self.client
            .iter()
            .zip(&self.server)
            .map(|(a, b)| a ^ b)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.client.len()
    }

    pub fn is_empty(&self) -> bool {
        self.client.is_empty()
    }
}

/// Computes shares of `[signed(x) > 0]` for every element of the shared
/// vector. `server_rng` drives the server's masks; `functionality_rng` the
/// resharing done inside ideal sub-functionalities.
pub fn f_less<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    channel: &mut Channel,
    phase: &str,
    client: &SharedVector,
    server: &SharedVector,
    backend: CompareBackend,
    server_rng: &mut R1,
    functionality_rng: &mut R2,
) -> Result<BoolShares> {
    if client.party() != Party::Client || server.party() != Party::Server {
        return Err(Error::Compare("shares passed for the wrong parties".into()));
    }
    if client.cfg() != server.cfg() || client.len() != server.len() {
        return Err(Error::Compare(
            "client and server shares disagree in config or length".into(),
        ));
    }
    let ell = client.cfg().ell();
    match backend {
        CompareBackend::Ideal => ideal(channel, phase, client, server, functionality_rng),
        CompareBackend::Chunked { chunk_bits } => {
            backend.chunks(ell)?;
            chunked(
                channel,
                phase,
                client.values(),
                server.values(),
                chunk_bits,
                server_rng,
                functionality_rng,
            )
        }
    }
}

fn ideal<R: Rng + ?Sized>(
    channel: &mut Channel,
    phase: &str,
    client: &SharedVector,
    server: &SharedVector,
    rng: &mut R,
) -> Result<BoolShares> {
    let n = client.len();
    channel.barrier();
    for _ in 0..n {
        channel.functionality_traffic(Party::Server, phase, "f-less-input", 1)?;
    }
    for _ in 0..n {
        channel.functionality_traffic(Party::Client, phase, "f-less-output", 1)?;
    }
    channel.barrier();
    let mut out = BoolShares {
        client: Vec::with_capacity(n),
        server: Vec::with_capacity(n),
    };
    for (&a, &b) in client.values().iter().zip(server.values()) {
        let bit = (a + b).signed() > 0;
        let s: bool = rng.gen();
        out.client.push(bit ^ s);
        out.server.push(s);
    }
    Ok(out)
}

/// Client's comparison operand: low `ell-1` bits of `a - 1`, then its MSB.
fn client_operand(a: RingValue) -> u64 {
    let ell = a.cfg().ell();
    let az = a - a.cfg().ring(1);
    let low = low_mask(ell);
    ((az.raw() & low) << 1) | az.msb() as u64
}

/// Server's comparison operand: `2^(ell-1) - 1 - b'`, then the MSB of `b`.
fn server_operand(b: RingValue) -> u64 {
    let ell = b.cfg().ell();
    let low = low_mask(ell);
    let c = low - (b.raw() & low);
    (c << 1) | b.msb() as u64
}

fn low_mask(ell: u32) -> u64 {
    (1u64 << (ell - 1)) - 1
}

fn digit(value: u64, ell: u32, m: u32, i: u32) -> u64 {
    (value >> (ell - m * (i + 1))) & ((1u64 << m) - 1)
}

/// (lt, eq) of one digit. The lowest digit carries the share MSBs in its
/// last bit: ties in the remaining bits resolve to "less" iff they differ.
fn digit_relation(j: u64, v: u64, lowest: bool) -> (bool, bool) {
    if lowest {
        let (jh, vh) = (j >> 1, v >> 1);
        let differ = (j ^ v) & 1 == 1;
        (jh < vh || (jh == vh && differ), jh == vh)
    } else {
        (j < v, j == v)
    }
}

fn chunked<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    channel: &mut Channel,
    phase: &str,
    client: &[RingValue],
    server: &[RingValue],
    m: u32,
    server_rng: &mut R1,
    functionality_rng: &mut R2,
) -> Result<BoolShares> {
    let n = client.len();
    if n == 0 {
        return Ok(BoolShares {
            client: Vec::new(),
            server: Vec::new(),
        });
    }
    let ell = client[0].cfg().ell();
    let q = ell / m;
    let digit_ot = OtInstance::new(1 << m, 2)?;

    let client_ops: Vec<u64> = client.iter().map(|&a| client_operand(a)).collect();
    let server_ops: Vec<u64> = server.iter().map(|&b| server_operand(b)).collect();

    // Server side: masked (lt, eq) tables for every element and digit.
    // one byte per 2-bit string, 2^m strings per (element, digit)
    let width = 1usize << m;
    let mut tables: Vec<u8> = Vec::with_capacity(n * q as usize * width);
    let mut server_lt = vec![vec![false; q as usize]; n];
    let mut server_eq = vec![vec![false; q as usize]; n];
    for (e, &v) in server_ops.iter().enumerate() {
        for i in 0..q {
            let vd = digit(v, ell, m, i);
            let (r_lt, r_eq): (bool, bool) = (server_rng.gen(), server_rng.gen());
            server_lt[e][i as usize] = r_lt;
            server_eq[e][i as usize] = r_eq;
            tables.extend((0..1u64 << m).map(|j| {
                let (lt, eq) = digit_relation(j, vd, i == q - 1);
                (lt ^ r_lt) as u8 | (((eq ^ r_eq) as u8) << 1)
            }));
        }
    }

    let requests: Vec<OtRequest<'_>> = client_ops
        .iter()
        .enumerate()
        .flat_map(|(e, &u)| {
            let tables = &tables;
            (0..q).map(move |i| OtRequest {
                instance: digit_ot,
                strings: {
                    let at = (e * q as usize + i as usize) * width;
                    &tables[at..at + width]
                },
                index: digit(u, ell, m, i) as usize,
            })
        })
        .collect();
    let received = ot::ot_choose_batch(channel, phase, &requests)?;

    let mut client_lt = vec![vec![false; q as usize]; n];
    let mut client_eq = vec![vec![false; q as usize]; n];
    for (idx, bytes) in received.iter().enumerate() {
        let (e, i) = (idx / q as usize, idx % q as usize);
        let bits = ot::unpack_bits(bytes);
        client_lt[e][i] = bits & 1 == 1;
        client_eq[e][i] = bits & 2 == 2;
    }

    // Ripple from the most significant digit down.
    let mut acc = BoolPairShares {
        lt_c: client_lt.iter().map(|d| d[0]).collect(),
        lt_s: server_lt.iter().map(|d| d[0]).collect(),
        eq_c: client_eq.iter().map(|d| d[0]).collect(),
        eq_s: server_eq.iter().map(|d| d[0]).collect(),
    };
    for i in 1..q as usize {
        let next = BoolPairShares {
            lt_c: client_lt.iter().map(|d| d[i]).collect(),
            lt_s: server_lt.iter().map(|d| d[i]).collect(),
            eq_c: client_eq.iter().map(|d| d[i]).collect(),
            eq_s: server_eq.iter().map(|d| d[i]).collect(),
        };
        acc = combine_step(channel, phase, &acc, &next, functionality_rng)?;
    }

    // Local XOR of each party's own MSB turns lt into the sign test.
    let client_bits = acc
        .lt_c
        .iter()
        .zip(&client_ops)
        .map(|(&l, &u)| l ^ (u & 1 == 1))
        .collect();
    let server_bits = acc
        .lt_s
        .iter()
        .zip(&server_ops)
        .map(|(&l, &v)| l ^ (v & 1 == 1))
        .collect();
    Ok(BoolShares {
        client: client_bits,
        server: server_bits,
    })
}

/// XOR-shared (lt, eq) pairs for a vector of comparisons.
struct BoolPairShares {
    lt_c: Vec<bool>,
    lt_s: Vec<bool>,
    eq_c: Vec<bool>,
    eq_s: Vec<bool>,
}

/// `(lt, eq) <- (lt ^ eq & lt_next, eq & eq_next)` for every element.
///
/// Both products share the operand `eq`, so one step is charged as a single
/// 1-out-of-2 OT with 2-bit payloads; the products themselves are computed by
/// an ideal AND functionality that reshares its outputs.
fn combine_step<R: Rng + ?Sized>(
    channel: &mut Channel,
    phase: &str,
    acc: &BoolPairShares,
    next: &BoolPairShares,
    rng: &mut R,
) -> Result<BoolPairShares> {
    let n = acc.lt_c.len();
    let and_ot = OtInstance::new(2, 2)?;
    charge_batch(channel, phase, and_ot, n)?;
    let mut out = BoolPairShares {
        lt_c: Vec::with_capacity(n),
        lt_s: Vec::with_capacity(n),
        eq_c: Vec::with_capacity(n),
        eq_s: Vec::with_capacity(n),
    };
    for e in 0..n {
        let eq = acc.eq_c[e] ^ acc.eq_s[e];
        let lt_next = next.lt_c[e] ^ next.lt_s[e];
        let eq_next = next.eq_c[e] ^ next.eq_s[e];
        let (p1, p2) = (eq & lt_next, eq & eq_next);
        let (m1, m2): (bool, bool) = (rng.gen(), rng.gen());
        // lt is XOR-linear in the product, so only the product is reshared.
        out.lt_c.push(acc.lt_c[e] ^ p1 ^ m1);
        out.lt_s.push(acc.lt_s[e] ^ m1);
        out.eq_c.push(p2 ^ m2);
        out.eq_s.push(m2);
    }
    Ok(out)
}

/// Accounts `count` parallel transfers of shape `instance` without data.
fn charge_batch(channel: &mut Channel, phase: &str, instance: OtInstance, count: usize) -> Result<()> {
    channel.barrier();
    for _ in 0..count {
        channel.functionality_traffic(Party::Server, phase, "ot-request", ceil_log2(instance.k()))?;
    }
    for _ in 0..count {
        channel.functionality_traffic(
            Party::Client,
            phase,
            "ot-response",
            instance.response_bits(),
        )?;
        channel.ledger_record_ot(OtRecord {
            phase: phase.to_string(),
            k: instance.k(),
            bitlen: instance.bitlen(),
            bits: instance.cost_bits(),
            rounds: 2,
        });
    }
    channel.barrier();
    Ok(())
}
