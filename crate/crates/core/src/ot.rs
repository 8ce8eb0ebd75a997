//! Ideal 1-out-of-k oblivious transfer.
//!
//! The functionality hands the receiver (always the client here) the chosen
//! string and tells the sender nothing. The choice index never enters the
//! server's inbox: the sender only observes a content-free request of
//! `ceil(log2 k)` bits. Each invocation is charged `k * bitlen + ceil(log2 k)`
//! bits over two rounds.

use bitvec::prelude::*;

use crate::ring::{FixedPointConfig, RingValue};
use crate::transport::{Channel, OtRecord, Party};
use crate::{Error, Result};

/// Shape of one transfer: `k` strings of `bitlen` bits each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct OtInstance {
    k: u64,
    bitlen: u64,
}

impl OtInstance {
    pub fn new(k: u64, bitlen: u64) -> Result<Self> {
        if k < 2 {
            return Err(Error::Ot(format!("need k >= 2 strings, got {k}")));
        }
        if bitlen < 1 {
            return Err(Error::Ot("bitlen must be at least 1".into()));
        }
        Ok(Self { k, bitlen })
    }

    pub fn k(&self) -> u64 {
        self.k
    }

    pub fn bitlen(&self) -> u64 {
        self.bitlen
    }

    /// Bits sent by the receiver.
    pub fn request_bits(&self) -> u64 {
        ceil_log2(self.k)
    }

    /// Bits sent by the sender.
    pub fn response_bits(&self) -> u64 {
        self.k * self.bitlen
    }

    /// `k * bitlen + ceil(log2 k)`.
    pub fn cost_bits(&self) -> u64 {
        self.response_bits() + self.request_bits()
    }
}

pub fn ceil_log2(k: u64) -> u64 {
    if k <= 1 {
        0
    } else {
        64 - (k - 1).leading_zeros() as u64
    }
}

/// One transfer within a batch. `strings` holds the `k` sender strings back
/// to back, each padded to `ceil(bitlen / 8)` bytes.
#[derive(Clone, Debug)]
pub struct OtRequest<'a> {
    pub instance: OtInstance,
    pub strings: &'a [u8],
    pub index: usize,
}

impl OtRequest<'_> {
    fn stride(&self) -> usize {
        self.instance.bitlen.div_ceil(8) as usize
    }

    fn chosen(&self) -> Vec<u8> {
        let w = self.stride();
        self.strings[self.index * w..(self.index + 1) * w].to_vec()
    }
}

/// Concatenates separately held strings into the flat request layout.
pub fn flatten(strings: &[Vec<u8>]) -> Vec<u8> {
    strings.concat()
}

fn validate(req: &OtRequest<'_>) -> Result<()> {
    let inst = req.instance;
    let w = req.stride();
    if req.strings.len() as u64 != inst.k * w as u64 {
        return Err(Error::Ot(format!(
            "expected {} strings of {w} bytes, got {} bytes",
            inst.k,
            req.strings.len()
        )));
    }
    if req.index as u64 >= inst.k {
        return Err(Error::Ot(format!(
            "choice index {} out of range for k = {}",
            req.index, inst.k
        )));
    }
    let spare = (w as u64 * 8 - inst.bitlen) as u32;
    if spare > 0 {
        let top_mask = !(0xffu8 >> spare);
        if let Some(i) = req
            .strings
            .chunks(w)
            .position(|s| s[w - 1] & top_mask != 0)
        {
            return Err(Error::Ot(format!(
                "string {i} is not exactly {} bits",
                inst.bitlen
            )));
        }
    }
    Ok(())
}

/// Runs a batch of independent transfers in parallel: all requests travel in
/// one round, all responses in the next.
pub fn ot_choose_batch(
    channel: &mut Channel,
    phase: &str,
    requests: &[OtRequest<'_>],
) -> Result<Vec<Vec<u8>>> {
    for req in requests {
        validate(req)?;
    }
    channel.barrier();
    for req in requests {
        channel.functionality_traffic(
            Party::Server,
            phase,
            "ot-request",
            req.instance.request_bits(),
        )?;
    }
    for req in requests {
        channel.functionality_traffic(
            Party::Client,
            phase,
            "ot-response",
            req.instance.response_bits(),
        )?;
        channel.ledger_record_ot(OtRecord {
            phase: phase.to_string(),
            k: req.instance.k,
            bitlen: req.instance.bitlen,
            bits: req.instance.cost_bits(),
            rounds: 2,
        });
    }
    channel.barrier();
    Ok(requests.iter().map(OtRequest::chosen).collect())
}

/// A single transfer; the client receives `strings[index]`.
pub fn ot_choose(
    channel: &mut Channel,
    phase: &str,
    instance: OtInstance,
    strings: &[Vec<u8>],
    index: usize,
) -> Result<Vec<u8>> {
    let stride = instance.bitlen.div_ceil(8) as usize;
    if let Some(i) = strings.iter().position(|s| s.len() != stride) {
        return Err(Error::Ot(format!(
            "string {i} is not exactly {} bits",
            instance.bitlen
        )));
    }
    let flat = flatten(strings);
    let mut out = ot_choose_batch(
        channel,
        phase,
        &[OtRequest {
            instance,
            strings: &flat,
            index,
        }],
    )?;
    Ok(out.pop().expect("one request yields one output"))
}

/// Packs ring values LSB-first, `ell` bits each.
pub fn pack_ring(values: &[RingValue]) -> Vec<u8> {
    let Some(first) = values.first() else {
        return Vec::new();
    };
    let ell = first.cfg().ell() as usize;
    let mut bits: BitVec<u8, Lsb0> = BitVec::with_capacity(values.len() * ell);
    for v in values {
        let raw = v.raw();
        bits.extend_from_bitslice(&raw.view_bits::<Lsb0>()[..ell]);
    }
    bits.into_vec()
}

/// Inverse of [`pack_ring`].
pub fn unpack_ring(bytes: &[u8], n: usize, cfg: FixedPointConfig) -> Result<Vec<RingValue>> {
    let ell = cfg.ell() as usize;
    let bits = bytes.view_bits::<Lsb0>();
    if bits.len() < n * ell {
        return Err(Error::Shape(format!(
            "{} bits cannot hold {n} values of {ell} bits",
            bits.len()
        )));
    }
    Ok(bits[..n * ell]
        .chunks(ell)
        .map(|c| cfg.ring(c.load_le::<u64>()))
        .collect())
}

/// Packs a small integer into a `bitlen`-bit string.
pub fn pack_bits(value: u64, bitlen: u64) -> Vec<u8> {
    let bytes = bitlen.div_ceil(8) as usize;
    let masked = if bitlen >= 64 {
        value
    } else {
        value & ((1u64 << bitlen) - 1)
    };
    masked.to_le_bytes()[..bytes.min(8)]
        .iter()
        .copied()
        .chain(std::iter::repeat(0).take(bytes.saturating_sub(8)))
        .collect()
}

pub fn unpack_bits(bytes: &[u8]) -> u64 {
    let mut buf = [0u8; 8];
    let n = bytes.len().min(8);
    buf[..n].copy_from_slice(&bytes[..n]);
    u64::from_le_bytes(buf)
}
