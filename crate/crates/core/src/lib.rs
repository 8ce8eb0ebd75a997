//! Two-party secure speculative decoding.
//!
//! A client holding a small public model drafts tokens in the clear; a
//! server holding the private model verifies them under secret sharing.
//! Verification never divides or truncates inside the secure domain: the
//! client folds its uniforms into the draft probabilities locally, one
//! oblivious transfer per draft token selects the single score that matters,
//! and one sign comparison decides acceptance.
//!
//! The crate is organized bottom-up:
//!
//! * [`ring`]: fixed-point encoding into `Z_{2^ell}` and additive sharing.
//! * [`transport`]: the in-process two-party channel and its cost ledger.
//! * [`ot`]: ideal 1-out-of-k oblivious transfer with exact accounting.
//! * [`compare`]: the secure "value > 0" functionality.
//! * [`sampling`]: plaintext speculative sampling, used as the oracle.
//! * [`protocol`]: secure verification and the full decoding step.
//! * [`models`]: toy n-gram and softmax models, trace files.
//! * [`alignment`]: top-K distillation and acceptance-ratio estimation.
//! * [`perf`]: closed-form communication, latency and speedup models.
//! * [`cli`]: configuration and dispatch behind the `specdec` binary.

pub mod alignment;
pub mod cli;
pub mod compare;
mod error;
pub mod models;
pub mod ot;
pub mod perf;
pub mod protocol;
pub mod ring;
pub mod sampling;
pub mod transport;

pub use error::{Error, Result};
