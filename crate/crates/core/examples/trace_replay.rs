//! Runs the secure protocol on recorded distributions instead of live models.

use specdec::models::{DistributionTrace, TraceRecord};
use specdec::protocol::{replay_step, DecoderConfig, PartyRngs};
use specdec::sampling::ProbVector;
use specdec::transport::Channel;

fn main() -> specdec::Result<()> {
    let q = ProbVector::new(vec![0.4, 0.4, 0.1, 0.1])?;
    let p = ProbVector::new(vec![0.7, 0.1, 0.1, 0.1])?;
    let record = |position, drafted_token| TraceRecord {
        position,
        drafted_token,
        p: p.clone(),
        q: q.clone(),
    };
    let text = DistributionTrace::new(vec![record(0, 0), record(1, 1), record(2, 0)]).to_text();
    println!("trace file:\n{text}");
    let trace = DistributionTrace::parse(&text, "inline")?;

    let config = DecoderConfig {
        gamma: 2,
        ..DecoderConfig::default()
    };
    let mut rngs = PartyRngs::from_seed(5);
    for step in trace.steps() {
        let mut channel = Channel::new();
        let report = replay_step(step, &config, &mut channel, &mut rngs)?;
        println!(
            "k = {}, emitted {:?}, {} bits",
            report.outcome.k,
            report.outcome.emitted(),
            channel.ledger().total_bits()
        );
    }
    Ok(())
}
