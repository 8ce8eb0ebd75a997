//! Fixed-point encoding and additive sharing over the ring.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use specdec::ring::{decode_fixed, encode_fixed, FixedPointConfig, SharedVector};

fn main() -> specdec::Result<()> {
    let cfg = FixedPointConfig::new(32, 12)?;
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    println!("ell = {}, frac = {}, resolution {:e}", cfg.ell(), cfg.frac(), cfg.resolution());

    let reals = [0.25, -1.5, 3.14159, 1e-4];
    let (client, server) = SharedVector::share_reals(&reals, cfg, &mut rng)?;
    let opened = client.reconstruct_with(&server)?;
    for (i, x) in reals.iter().enumerate() {
        println!(
            "{x:>9} -> client {:>10} server {:>10} -> {}",
            client.values()[i].raw(),
            server.values()[i].raw(),
            decode_fixed(opened[i])
        );
    }

    // Shares add locally.
    let a = encode_fixed(1.25, cfg)?;
    let b = encode_fixed(-0.5, cfg)?;
    let (a0, a1) = specdec::ring::make_shares(a, &mut rng);
    let (b0, b1) = specdec::ring::make_shares(b, &mut rng);
    let sum = specdec::ring::reconstruct(a0 + b0, a1 + b1)?;
    println!("1.25 + -0.5 on shares = {}", decode_fixed(sum));
    Ok(())
}
