//! Plaintext speculative sampling: the output follows the target no matter
//! how poor the draft is.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use specdec::sampling::{speculative_step_plaintext, DraftBatch, ProbVector};

fn main() -> specdec::Result<()> {
    let p = ProbVector::new(vec![0.5, 0.3, 0.15, 0.05])?;
    let q = ProbVector::new(vec![0.1, 0.1, 0.4, 0.4])?;
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    let n = 200_000;
    let mut counts = vec![0usize; p.len()];
    let mut accepted = 0;
    for _ in 0..n {
        let batch = DraftBatch::new(vec![q.sample(&mut rng)], vec![q.clone()])?;
        let out = speculative_step_plaintext(&[p.clone(), p.clone()], &batch, &mut rng)?;
        accepted += out.accepted.len();
        counts[out.emitted()[0]] += 1;
    }
    let empirical = ProbVector::normalized(counts.iter().map(|&c| c as f64).collect())?;
    println!("target    {:?}", p.probs());
    println!("empirical {:?}", empirical.probs());
    println!("TV distance {:.4}", empirical.tv_distance(&p));
    let overlap: f64 = p.probs().iter().zip(q.probs()).map(|(a, b)| a.min(*b)).sum();
    println!("acceptance {:.4} (expected {overlap:.4})", accepted as f64 / n as f64);
    Ok(())
}
