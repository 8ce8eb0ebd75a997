//! Oblivious transfer through the ideal functionality and what it costs.

use specdec::ot::{ot_choose, pack_bits, unpack_bits, OtInstance};
use specdec::transport::Channel;

fn main() -> specdec::Result<()> {
    let mut channel = Channel::new();
    for (k, bitlen) in [(2, 1), (16, 2), (256, 32), (32_000, 64)] {
        let instance = OtInstance::new(k, bitlen)?;
        let strings: Vec<Vec<u8>> = (0..k).map(|i| pack_bits(i * 3 % (1 << bitlen.min(63)), bitlen)).collect();
        let index = (k / 3) as usize;
        let got = ot_choose(&mut channel, "demo", instance, &strings, index)?;
        println!(
            "1-of-{k:<6} {bitlen:>2}-bit strings: chose {index}, received {}, cost {} bits",
            unpack_bits(&got),
            instance.cost_bits()
        );
    }
    let ledger = channel.ledger();
    println!(
        "ledger: {} OT calls, {} rounds, {} bits",
        ledger.ot_invocations(),
        ledger.rounds(),
        ledger.total_bits()
    );
    Ok(())
}
