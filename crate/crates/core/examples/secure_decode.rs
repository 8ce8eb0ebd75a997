//! Two-party decoding with a public draft model on the client and a private
//! model behind the secure forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use specdec::compare::CompareBackend;
use specdec::models::NgramModel;
use specdec::protocol::{generate, DecoderConfig, PartyRngs};
use specdec::transport::{Channel, NetworkModel, Party};

fn main() -> specdec::Result<()> {
    let mut rng = ChaCha12Rng::seed_from_u64(8);
    let private = NgramModel::random(1, 16, 0.05, &mut rng)?;
    let public = NgramModel::random(1, 16, 0.05, &mut rng)?;
    let config = DecoderConfig {
        gamma: 4,
        backend: CompareBackend::chunked(4),
        ..DecoderConfig::default()
    };
    let mut channel = Channel::new();
    let mut rngs = PartyRngs::from_seed(42);
    let out = generate(&public, &private, &[0], 24, &config, &mut channel, &mut rngs)?;

    println!("tokens: {:?}", out.tokens);
    println!("steps: {}", out.steps.len());
    for (phase, cost) in channel.ledger().phases() {
        println!(
            "{phase:<16} rounds {:>5} bits {:>12} OTs {:>4}",
            cost.rounds,
            cost.total_bits(),
            cost.ot_calls
        );
    }
    println!(
        "messages the server received outside ideal functionalities: {}",
        channel.protocol_messages(Party::Server).count()
    );
    for (name, net) in [("LAN", NetworkModel::lan()), ("WAN", NetworkModel::wan())] {
        println!("estimated {name} time {:.2} s", out.latency(&net));
    }
    Ok(())
}
