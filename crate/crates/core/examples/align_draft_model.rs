//! Distills a draft model towards a target it was not trained on and reports
//! the acceptance ratio before and after.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use specdec::alignment::{
    collect_distillation_set, estimate_acceptance, mean_loss, train_align, DisjointCorpusTask,
    TopKMode, TrainConfig, DEFAULT_TOP_K,
};

fn main() -> specdec::Result<()> {
    let task = DisjointCorpusTask::build(8, 8, 2024)?;
    let gamma = 4;
    let before = estimate_acceptance(&task.target, &task.public, &task.prompts, gamma, 200, 1)?;

    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let data = collect_distillation_set(&task.target, &task.prompts, DEFAULT_TOP_K, 24, &mut rng)?;
    let config = TrainConfig::default();
    let report = train_align(task.public.clone(), &data, &config)?;
    let after = estimate_acceptance(&task.target, &report.model, &task.prompts, gamma, 200, 1)?;

    println!(
        "distillation loss {:.4} -> {:.4}",
        mean_loss(&data, &task.public, TopKMode::Raw),
        report.losses.last().copied().unwrap_or(f64::NAN)
    );
    println!("alpha before {:.3} (+/- {:.3})", before.alpha, before.stderr);
    println!("alpha after  {:.3} (+/- {:.3})", after.alpha, after.stderr);
    println!(
        "tokens per step {:.2} -> {:.2}",
        before.tokens_per_step(),
        after.tokens_per_step()
    );
    Ok(())
}
