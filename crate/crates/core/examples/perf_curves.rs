//! Analytic speedup and communication curves, and the fitted sampling-time
//! model against the measured reference cells.

use specdec::perf::{
    comm_cost, expected_tokens_per_step, reference_sampling_model, sampling_reference, speedup,
    CommVariant, DecoderCostProfile, ForwardCostProfile,
};
use specdec::transport::NetworkModel;

fn main() -> specdec::Result<()> {
    let lan = NetworkModel::lan();
    let profile = DecoderCostProfile::reference_lan();
    println!("alpha  gamma  tokens/step  speedup (LAN)");
    for alpha in [0.3, 0.52, 0.7, 0.9] {
        for gamma in [4, 8, 16] {
            let s = speedup(alpha, gamma, &profile, &lan)?;
            println!(
                "{alpha:>5}  {gamma:>5}  {:>11.3}  {:>7.3}",
                expected_tokens_per_step(alpha, gamma)?,
                s.speedup
            );
        }
    }

    println!("\nverification bits, gamma = 4, ell = 32, m = 4");
    for v in [8, 64, 256, 32_000] {
        let row: Vec<String> = CommVariant::ALL
            .iter()
            .map(|&variant| Ok(format!("{variant}={}", comm_cost(v, 32, 4, 4, variant)?)))
            .collect::<specdec::Result<_>>()?;
        println!("V = {v:>5}: {}", row.join("  "));
    }

    let forward = ForwardCostProfile::default();
    let base = forward.latency(&lan, 1)?;
    println!("\nforward latency relative to one token:");
    for len in [1, 4, 8, 16] {
        println!("  len {len:>2}: {:.3}", forward.latency(&lan, len)? / base);
    }

    let model = reference_sampling_model()?;
    println!("\nsampling time (model vs measured):");
    for cell in sampling_reference() {
        let naive = model.seconds(cell.gamma, CommVariant::NaiveChunked, &cell.network)?;
        let opt = model.seconds(cell.gamma, CommVariant::OptimizedChunked, &cell.network)?;
        println!(
            "  delay {:>3} ms gamma {:>2}: naive {naive:>6.2} / {:>6.2}  optimized {opt:>5.2} / {:>5.2}",
            cell.network.one_way_delay() * 1e3,
            cell.gamma,
            cell.naive_seconds,
            cell.optimized_seconds
        );
    }
    Ok(())
}
