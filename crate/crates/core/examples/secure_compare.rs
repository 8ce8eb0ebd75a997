//! Sign test on shared values, ideal and chunked.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use specdec::compare::{f_less, CompareBackend};
use specdec::ring::{FixedPointConfig, SharedVector};
use specdec::transport::Channel;

fn main() -> specdec::Result<()> {
    let cfg = FixedPointConfig::new(32, 12)?;
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    let mut server_rng = ChaCha12Rng::seed_from_u64(4);
    let mut func_rng = ChaCha12Rng::seed_from_u64(5);
    let xs = [-2.0, -0.001, 0.0, 0.001, 7.5];
    let (client, server) = SharedVector::share_reals(&xs, cfg, &mut rng)?;

    for backend in [CompareBackend::Ideal, CompareBackend::chunked(4), CompareBackend::chunked(8)] {
        let mut channel = Channel::new();
        let bits = f_less(&mut channel, "compare", &client, &server, backend, &mut server_rng, &mut func_rng)?;
        let positive = bits.reconstruct();
        let ledger = channel.ledger();
        println!(
            "{backend:?}: {positive:?} in {} rounds, {} bits, {} OTs",
            ledger.rounds(),
            ledger.total_bits(),
            ledger.ot_invocations()
        );
    }
    Ok(())
}
