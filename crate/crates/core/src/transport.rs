//! In-process two-party channel with exact communication accounting.
//!
//! Both parties run in one thread in lockstep; the channel keeps each
//! party's inbox separate and records every delivered message in a
//! [`CostLedger`]. A round is counted whenever the direction of traffic
//! flips, or when the next message follows an explicit [`Channel::barrier`].

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Party {
    Client,
    Server,
}

impl Party {
    pub fn peer(self) -> Party {
        match self {
            Party::Client => Party::Server,
            Party::Server => Party::Client,
        }
    }

    fn index(self) -> usize {
        match self {
            Party::Client => 0,
            Party::Server => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    ClientToServer,
    ServerToClient,
}

impl Direction {
    pub fn from_sender(sender: Party) -> Self {
        match sender {
            Party::Client => Direction::ClientToServer,
            Party::Server => Direction::ServerToClient,
        }
    }
}

/// Costs attributed to one protocol phase.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseCost {
    pub rounds: u64,
    pub bits_c2s: u64,
    pub bits_s2c: u64,
    pub ot_calls: u64,
}

impl PhaseCost {
    pub fn total_bits(&self) -> u64 {
        self.bits_c2s + self.bits_s2c
    }
}

/// One audited oblivious-transfer invocation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OtRecord {
    pub phase: String,
    pub k: u64,
    pub bitlen: u64,
    pub bits: u64,
    pub rounds: u64,
}

/// Totals of a ledger at one point in time.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub rounds: u64,
    pub bits_c2s: u64,
    pub bits_s2c: u64,
    pub ot_invocations: u64,
}

/// Per-direction bit, round and OT accounting of a protocol run.
///
/// Counters only grow. Totals are always the sum of the per-phase entries.
#[derive(Clone, Debug, Default)]
pub struct CostLedger {
    phases: Vec<(String, PhaseCost)>,
    last_direction: Option<Direction>,
    ot_log: Vec<OtRecord>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    fn phase_mut(&mut self, phase: &str) -> &mut PhaseCost {
        let idx = match self.phases.iter().position(|(p, _)| p == phase) {
            Some(i) => i,
            None => {
                self.phases.push((phase.to_string(), PhaseCost::default()));
                self.phases.len() - 1
            }
        };
        &mut self.phases[idx].1
    }

    /// Accounts one message of `bits` bits travelling in `direction`.
    pub fn record_message(&mut self, direction: Direction, phase: &str, bits: u64) {
        let new_round = self.last_direction != Some(direction);
        self.last_direction = Some(direction);
        let entry = self.phase_mut(phase);
        if new_round {
            entry.rounds += 1;
        }
        match direction {
            Direction::ClientToServer => entry.bits_c2s += bits,
            Direction::ServerToClient => entry.bits_s2c += bits,
        }
    }

    /// The next message starts a new round regardless of its direction.
    pub fn barrier(&mut self) {
        self.last_direction = None;
    }

    /// Charges costs of a sub-protocol that is modeled rather than executed.
    pub fn charge_external(&mut self, phase: &str, rounds: u64, bits_c2s: u64, bits_s2c: u64) {
        let entry = self.phase_mut(phase);
        entry.rounds += rounds;
        entry.bits_c2s += bits_c2s;
        entry.bits_s2c += bits_s2c;
        self.last_direction = None;
    }

    pub(crate) fn record_ot(&mut self, record: OtRecord) {
        self.phase_mut(&record.phase).ot_calls += 1;
        self.ot_log.push(record);
    }

    pub fn rounds(&self) -> u64 {
        self.phases.iter().map(|(_, c)| c.rounds).sum()
    }

    pub fn bits_c2s(&self) -> u64 {
        self.phases.iter().map(|(_, c)| c.bits_c2s).sum()
    }

    pub fn bits_s2c(&self) -> u64 {
        self.phases.iter().map(|(_, c)| c.bits_s2c).sum()
    }

    pub fn total_bits(&self) -> u64 {
        self.bits_c2s() + self.bits_s2c()
    }

    /// Total traffic in bytes; fractional when a message is not byte aligned.
    pub fn total_bytes(&self) -> f64 {
        self.total_bits() as f64 / 8.0
    }

    pub fn ot_invocations(&self) -> u64 {
        self.phases.iter().map(|(_, c)| c.ot_calls).sum()
    }

    pub fn ot_log(&self) -> &[OtRecord] {
        &self.ot_log
    }

    pub fn phase(&self, phase: &str) -> Option<&PhaseCost> {
        self.phases.iter().find(|(p, _)| p == phase).map(|(_, c)| c)
    }

    /// Phases in first-use order.
    pub fn phases(&self) -> impl Iterator<Item = (&str, &PhaseCost)> {
        self.phases.iter().map(|(p, c)| (p.as_str(), c))
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            rounds: self.rounds(),
            bits_c2s: self.bits_c2s(),
            bits_s2c: self.bits_s2c(),
            ot_invocations: self.ot_invocations(),
        }
    }

    /// Adds every phase of `other` into this ledger.
    pub fn absorb(&mut self, other: &CostLedger) {
        for (phase, cost) in &other.phases {
            let entry = self.phase_mut(phase);
            entry.rounds += cost.rounds;
            entry.bits_c2s += cost.bits_c2s;
            entry.bits_s2c += cost.bits_s2c;
            entry.ot_calls += cost.ot_calls;
        }
        self.ot_log.extend(other.ot_log.iter().cloned());
        self.last_direction = None;
    }

    /// Writes `phase,rounds,bytes_c2s,bytes_s2c,ot_calls`, one row per phase.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["phase", "rounds", "bytes_c2s", "bytes_s2c", "ot_calls"])?;
        for (phase, c) in &self.phases {
            w.write_record([
                phase.clone(),
                c.rounds.to_string(),
                format_bytes(c.bits_c2s),
                format_bytes(c.bits_s2c),
                c.ot_calls.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn format_bytes(bits: u64) -> String {
    if bits % 8 == 0 {
        (bits / 8).to_string()
    } else {
        format!("{}", bits as f64 / 8.0)
    }
}

/// Link parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    bandwidth_bps: f64,
    one_way_delay: f64,
}

impl NetworkModel {
    pub fn new(bandwidth_bps: f64, one_way_delay: f64) -> Result<Self> {
        if !(bandwidth_bps > 0.0) || !(one_way_delay >= 0.0) {
            return Err(Error::Config {
                field: "network".into(),
                message: format!(
                    "bandwidth must be > 0 and delay >= 0 (got {bandwidth_bps} bps, {one_way_delay} s)"
                ),
            });
        }
        Ok(Self {
            bandwidth_bps,
            one_way_delay,
        })
    }

    /// 1 Gbps, 10 ms.
    pub fn lan() -> Self {
        Self {
            bandwidth_bps: 1e9,
            one_way_delay: 0.010,
        }
    }

    /// 400 Mbps, 40 ms.
    pub fn wan() -> Self {
        Self {
            bandwidth_bps: 400e6,
            one_way_delay: 0.040,
        }
    }

    pub fn bandwidth_bps(&self) -> f64 {
        self.bandwidth_bps
    }

    pub fn one_way_delay(&self) -> f64 {
        self.one_way_delay
    }

    /// `rounds * delay + bits / bandwidth + compute`.
    pub fn latency(&self, rounds: f64, bits: f64, compute_seconds: f64) -> f64 {
        rounds * self.one_way_delay + bits / self.bandwidth_bps + compute_seconds
    }
}

/// Latency of a recorded run: delay per round, transmission, and compute.
pub fn estimate_latency(ledger: &CostLedger, net: &NetworkModel, compute_seconds: f64) -> f64 {
    net.latency(
        ledger.rounds() as f64,
        ledger.total_bits() as f64,
        compute_seconds,
    )
}

/// A delivered protocol message.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Message {
    pub phase: String,
    pub payload: Vec<u8>,
    pub bits: u64,
}

/// How a party came to see some traffic.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrafficKind {
    /// A message sent directly by the peer.
    Protocol,
    /// Traffic of an ideal functionality (OT, comparison); carries no
    /// content, only its length.
    Functionality(String),
}

/// One entry of a party's incoming transcript.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub phase: String,
    pub kind: TrafficKind,
    pub bits: u64,
}

/// The two-party channel.
#[derive(Debug)]
pub struct Channel {
    ledger: CostLedger,
    inboxes: [VecDeque<Message>; 2],
    transcripts: [Vec<TranscriptEntry>; 2],
    attached: [bool; 2],
}

impl Default for Channel {
    fn default() -> Self {
        Self::new()
    }
}

impl Channel {
    pub fn new() -> Self {
        Self {
            ledger: CostLedger::new(),
            inboxes: [VecDeque::new(), VecDeque::new()],
            transcripts: [Vec::new(), Vec::new()],
            attached: [true, true],
        }
    }

    pub fn ledger(&self) -> &CostLedger {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut CostLedger {
        &mut self.ledger
    }

    pub fn into_ledger(self) -> CostLedger {
        self.ledger
    }

    pub fn detach(&mut self, party: Party) {
        self.attached[party.index()] = false;
    }

    pub fn attach(&mut self, party: Party) {
        self.attached[party.index()] = true;
    }

    fn check_attached(&self, from: Party) -> Result<()> {
        for p in [from, from.peer()] {
            if !self.attached[p.index()] {
                return Err(Error::Detached(p));
            }
        }
        Ok(())
    }

    /// Sends a byte message; its cost is `8 * payload.len()` bits.
    pub fn send(&mut self, from: Party, phase: &str, payload: Vec<u8>) -> Result<()> {
        let bits = 8 * payload.len() as u64;
        self.send_bits(from, phase, payload, bits)
    }

    /// Sends a bit-packed message whose wire length is `bits`.
    pub fn send_bits(&mut self, from: Party, phase: &str, payload: Vec<u8>, bits: u64) -> Result<()> {
        self.check_attached(from)?;
        if bits > 8 * payload.len() as u64 {
            return Err(Error::Shape(format!(
                "{bits} wire bits exceed a {}-byte payload",
                payload.len()
            )));
        }
        self.ledger
            .record_message(Direction::from_sender(from), phase, bits);
        let to = from.peer().index();
        self.transcripts[to].push(TranscriptEntry {
            phase: phase.to_string(),
            kind: TrafficKind::Protocol,
            bits,
        });
        self.inboxes[to].push_back(Message {
            phase: phase.to_string(),
            payload,
            bits,
        });
        Ok(())
    }

    pub fn recv(&mut self, party: Party) -> Option<Message> {
        self.inboxes[party.index()].pop_front()
    }

    /// Sends and immediately delivers, returning what the receiver got.
    pub fn transfer(&mut self, from: Party, phase: &str, payload: Vec<u8>) -> Result<Vec<u8>> {
        self.send(from, phase, payload)?;
        let msg = self
            .recv(from.peer())
            .ok_or_else(|| Error::Invariant("message lost in transfer".into()))?;
        Ok(msg.payload)
    }

    pub fn barrier(&mut self) {
        self.ledger.barrier();
    }

    /// Accounts content-free functionality traffic arriving at `to`.
    pub fn functionality_traffic(
        &mut self,
        to: Party,
        phase: &str,
        label: &str,
        bits: u64,
    ) -> Result<()> {
        self.check_attached(to)?;
        self.ledger
            .record_message(Direction::from_sender(to.peer()), phase, bits);
        self.transcripts[to.index()].push(TranscriptEntry {
            phase: phase.to_string(),
            kind: TrafficKind::Functionality(label.to_string()),
            bits,
        });
        Ok(())
    }

    /// Everything `party` has received so far, in arrival order.
    pub fn transcript(&self, party: Party) -> &[TranscriptEntry] {
        &self.transcripts[party.index()]
    }

    /// Received entries that came directly from the peer.
    pub fn protocol_messages(&self, party: Party) -> impl Iterator<Item = &TranscriptEntry> {
        self.transcripts[party.index()]
            .iter()
            .filter(|e| e.kind == TrafficKind::Protocol)
    }

    pub(crate) fn ledger_record_ot(&mut self, record: OtRecord) {
        self.ledger.record_ot(record);
    }
}
