//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use specdec::alignment::{
    collect_distillation_set, estimate_acceptance, mean_loss, mean_loss_grad, train_align,
    DisjointCorpusTask, TopKMode, TrainConfig, DEFAULT_TOP_K,
};
use specdec::compare::{f_less, CompareBackend};
use specdec::models::{FnModel, LanguageModel, NgramModel, TraceRecord};
use specdec::ot::ceil_log2;
use specdec::perf::{comm_cost, speedup, CommVariant, DecoderCostProfile};
use specdec::protocol::{
    decode_step, draft_tokens, draw_uniforms, naive_verify, replay_step, secure_verify,
    secure_verify_with_uniforms, DecoderConfig, PartyRngs, SharedDistributions,
};
use specdec::ring::{FixedPointConfig, SharedVector};
use specdec::sampling::{refactored_reject, speculative_step_with_uniforms, DraftBatch, ProbVector};
use specdec::transport::{Channel, Party, TrafficKind};

// Tolerances.
const TV_LIMIT: f64 = 0.02;
const DIST_RUNTIME_LIMIT: Duration = Duration::from_secs(300);
const ORACLE_MARGIN_ULPS: f64 = 2.0;
const PK_TOLERANCE: f64 = 1e-12;
const REJECT_SIGMAS: f64 = 3.0;
const RATIO_MIN: f64 = 50.0;
const SPEEDUP_BAND: (f64, f64) = (1.8, 6.5);
const ALPHA_GAIN_MIN: f64 = 0.1;
const ALPHA_STDERR_MAX: f64 = 0.01;
const GRAD_REL_TOL: f64 = 1e-5;

/// Every OT seen by any protocol run of the suite.
#[derive(Default)]
struct OtAudit {
    calls: u64,
    bad: Vec<String>,
    channels: u64,
}

impl OtAudit {
    fn absorb(&mut self, ch: &Channel) {
        self.channels += 1;
        let log = ch.ledger().ot_log();
        for rec in log {
            self.calls += 1;
            let expect = rec.k * rec.bitlen + ceil_log2(rec.k);
            if rec.bits != expect || rec.rounds != 2 {
                self.bad.push(format!(
                    "{}: 1-of-{} {}-bit charged {} bits / {} rounds",
                    rec.phase, rec.k, rec.bitlen, rec.bits, rec.rounds
                ));
            }
        }
        let counted: u64 = ch.ledger().phases().map(|(_, c)| c.ot_calls).sum();
        if counted != log.len() as u64 {
            self.bad.push(format!("ledger counts {counted} OT calls, log has {}", log.len()));
        }
    }
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn ring() -> FixedPointConfig {
    FixedPointConfig::new(32, 12).unwrap()
}

fn model_pair(v: usize, seed: u64) -> (NgramModel, NgramModel) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let public = NgramModel::random(1, v, 0.05, &mut rng).unwrap();
    let private = NgramModel::random(1, v, 0.05, &mut rng).unwrap();
    (public, private)
}

/// Target distributions at every drafted position and the bonus position.
fn target_rows(private: &impl LanguageModel, prefix: &[usize], batch: &DraftBatch) -> Vec<ProbVector> {
    let mut ctx = prefix.to_vec();
    let mut rows = vec![private.next_distribution(&ctx)];
    for &t in batch.tokens() {
        ctx.push(t);
        rows.push(private.next_distribution(&ctx));
    }
    rows
}

fn tv_of_counts(counts: &[u64], target: &ProbVector) -> f64 {
    let n: u64 = counts.iter().sum();
    counts
        .iter()
        .zip(target.probs())
        .map(|(&c, p)| (c as f64 / n as f64 - p).abs())
        .sum::<f64>()
        / 2.0
}

fn distribution_preservation(audit: &mut OtAudit) -> Verdict {
    const V: usize = 8;
    const PAIRS: u64 = 4;
    const STEPS_PER_PAIR: usize = 50_000;
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut steps = 0;
    for gamma in [2, 4] {
        let config = DecoderConfig {
            gamma,
            ring: ring(),
            backend: CompareBackend::chunked(4),
            ..DecoderConfig::default()
        };
        for pair in 0..PAIRS {
            let (public, private) = model_pair(V, 1000 + pair);
            let prefix = [pair as usize % V];
            let target = private.next_distribution(&prefix);
            let mut rngs = PartyRngs::from_seed(gamma as u64 * 100 + pair);
            let mut counts = vec![0u64; V];
            for _ in 0..STEPS_PER_PAIR {
                let mut ch = Channel::new();
                let report = decode_step(&public, &private, &prefix, &config, &mut ch, &mut rngs).unwrap();
                counts[report.outcome.emitted()[0]] += 1;
                audit.absorb(&ch);
                steps += 1;
            }
            worst = worst.max(tv_of_counts(&counts, &target));
        }
    }
    let elapsed = start.elapsed();
    verdict(
        worst < TV_LIMIT && elapsed < DIST_RUNTIME_LIMIT,
        format!(
            "{steps} steps, worst TV {worst:.4} (limit {TV_LIMIT}), {:.1} s (limit {} s)",
            elapsed.as_secs_f64(),
            DIST_RUNTIME_LIMIT.as_secs()
        ),
    )
}

fn oracle_equivalence(audit: &mut OtAudit) -> Verdict {
    const RUNS_PER_CELL: u64 = 2_500;
    let cfg = ring();
    let margin = ORACLE_MARGIN_ULPS / cfg.scale();
    let backend = CompareBackend::chunked(4);
    let (mut compared, mut boundary, mut mismatched) = (0, 0, 0);
    for (cell, (v, gamma)) in [(8, 1), (8, 4), (64, 1), (64, 4)].into_iter().enumerate() {
        for run in 0..RUNS_PER_CELL {
            let seed = cell as u64 * 1_000_000 + run;
            let (public, private) = model_pair(v, seed);
            let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xabcdef);
            let prefix = [rng.gen_range(0..v)];
            let batch = draft_tokens(&public, &prefix, gamma, &mut rng).unwrap();
            let p = target_rows(&private, &prefix, &batch);
            let uniforms = draw_uniforms(gamma, v, &mut rng);
            let diag: Vec<f64> = batch.tokens().iter().zip(&uniforms).map(|(&t, r)| r[t]).collect();
            let near = (0..gamma).any(|i| {
                let t = batch.tokens()[i];
                (batch.q_dists()[i].get(t) * diag[i] - p[i].get(t)).abs() <= margin
            });
            if near {
                boundary += 1;
                continue;
            }
            let oracle = speculative_step_with_uniforms(&p, &batch, &diag, &mut rng).unwrap();
            let expected_pk = ProbVector::normalized(
                oracle
                    .p_k
                    .probs()
                    .iter()
                    .map(|&x| cfg.encode(x).unwrap().decode())
                    .collect(),
            )
            .unwrap();
            let mut share_rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5eed);
            let shares = SharedDistributions::share(&p, cfg, &mut share_rng).unwrap();
            let mut ch = Channel::new();
            let mut server = ChaCha12Rng::seed_from_u64(seed ^ 1);
            let mut func = ChaCha12Rng::seed_from_u64(seed ^ 2);
            let got = secure_verify_with_uniforms(&mut ch, &batch, &shares, backend, &uniforms, &mut server, &mut func)
                .unwrap();
            audit.absorb(&ch);
            compared += 1;
            let same_pk = got
                .p_k
                .probs()
                .iter()
                .zip(expected_pk.probs())
                .all(|(a, b)| (a - b).abs() <= PK_TOLERANCE);
            if got.k != oracle.k || !same_pk {
                mismatched += 1;
            }
        }
    }
    verdict(
        mismatched == 0,
        format!("{compared} compared, {mismatched} mismatched, {boundary} boundary cases skipped"),
    )
}

fn refactored_rejection_rate() -> Verdict {
    const PAIRS: usize = 1000;
    const N: u64 = 100_000;
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    let mut outside = 0;
    let mut random_pairs = 0;
    let mut worst_z: f64 = 0.0;
    for _ in 0..PAIRS {
        let p: f64 = rng.gen();
        let q: f64 = 1.0 - rng.gen::<f64>();
        let expected = (1.0 - p / q).max(0.0);
        let rejected = (0..N).filter(|_| refactored_reject(p, q, rng.gen())).count();
        let rate = rejected as f64 / N as f64;
        let se = (expected * (1.0 - expected) / N as f64).sqrt();
        let diff = (rate - expected).abs();
        if se == 0.0 {
            if diff > 0.0 {
                outside += 1;
                worst_z = f64::INFINITY;
            }
            continue;
        }
        random_pairs += 1;
        let z = diff / se;
        worst_z = worst_z.max(z);
        if z > REJECT_SIGMAS {
            outside += 1;
        }
    }
    // Two-sided normal tail beyond three sigma.
    let by_chance = random_pairs as f64 * 0.0027;
    verdict(
        outside == 0,
        format!(
            "{PAIRS} pairs x {N} draws, {outside} outside {REJECT_SIGMAS} sigma (about {by_chance:.1} expected by chance over {random_pairs} non-degenerate pairs), max |z| {worst_z:.2}"
        ),
    )
}

fn comparison_soundness(audit: &mut OtAudit) -> Verdict {
    let mut rng = ChaCha12Rng::seed_from_u64(4);
    let small = FixedPointConfig::new(16, 8).unwrap();
    let all: Vec<_> = (0..1u64 << 16).map(|x| small.ring(x)).collect();
    let truth: Vec<bool> = all.iter().map(|x| x.signed() > 0).collect();
    let (c, s) = SharedVector::share(&all, small, &mut rng).unwrap();
    let mut exhaustive_ok = true;
    for m in [4, 8] {
        let mut ch = Channel::new();
        let out = f_less(&mut ch, "compare", &c, &s, CompareBackend::chunked(m), &mut rng.clone(), &mut rng)
            .unwrap()
            .reconstruct();
        audit.absorb(&ch);
        exhaustive_ok &= out == truth;
    }

    let cfg = ring();
    let values: Vec<_> = (0..10_000).map(|_| cfg.random(&mut rng)).collect();
    let (c, s) = SharedVector::share(&values, cfg, &mut rng).unwrap();
    let mut ch = Channel::new();
    let ideal = f_less(&mut ch, "compare", &c, &s, CompareBackend::Ideal, &mut rng.clone(), &mut rng)
        .unwrap()
        .reconstruct();
    let mut ch = Channel::new();
    let chunked = f_less(&mut ch, "compare", &c, &s, CompareBackend::chunked(4), &mut rng.clone(), &mut rng)
        .unwrap()
        .reconstruct();
    audit.absorb(&ch);
    let disagree = ideal.iter().zip(&chunked).filter(|(a, b)| a != b).count();
    verdict(
        exhaustive_ok && disagree == 0,
        format!(
            "ell=16 exhaustive (m=4, m=8): {}, ell=32 random: {disagree}/10000 disagree with ideal",
            if exhaustive_ok { "exact" } else { "MISMATCH" }
        ),
    )
}

fn verify_bits(
    v: usize,
    ell: u32,
    gamma: usize,
    naive: bool,
    audit: &mut OtAudit,
) -> u64 {
    let cfg = FixedPointConfig::new(ell, 8).unwrap();
    let (public, private) = model_pair(v, v as u64 * 31 + gamma as u64);
    let mut rngs = PartyRngs::from_seed(ell as u64);
    let batch = draft_tokens(&public, &[0], gamma, &mut rngs.client).unwrap();
    let p = target_rows(&private, &[0], &batch);
    let shares = SharedDistributions::share(&p, cfg, &mut rngs.functionality).unwrap();
    let mut ch = Channel::new();
    if naive {
        naive_verify(&mut ch, &batch, &shares, CompareBackend::chunked(4), &mut rngs).unwrap();
    } else {
        secure_verify(&mut ch, &batch, &shares, CompareBackend::chunked(4), &mut rngs).unwrap();
    }
    audit.absorb(&ch);
    ch.ledger().total_bits()
}

fn cost_model_soundness(audit: &mut OtAudit) -> Verdict {
    let mut exact = 0;
    let mut off = Vec::new();
    for v in [8, 64, 256] {
        for ell in [16, 32] {
            for gamma in [1, 4, 8] {
                let measured = verify_bits(v, ell, gamma, false, audit);
                let model = comm_cost(v, ell, gamma, 4, CommVariant::OptimizedChunked).unwrap();
                if measured as u128 == model {
                    exact += 1;
                } else {
                    off.push(format!("V={v} ell={ell} gamma={gamma}: {measured} vs {model}"));
                }
            }
        }
    }
    let mut ratios = Vec::new();
    for ell in [16, 32] {
        let naive = verify_bits(256, ell, 4, true, audit);
        let optimized = verify_bits(256, ell, 4, false, audit);
        ratios.push((ell, naive as f64 / optimized as f64));
    }
    let ratio_ok = ratios.iter().all(|&(_, r)| r > RATIO_MIN);
    let ratio_text: Vec<String> = ratios.iter().map(|(ell, r)| format!("ell={ell}: {r:.2}x")).collect();
    verdict(
        off.is_empty() && ratio_ok,
        format!(
            "closed form exact on {exact}/18 grid points{}; naive/optimized at V=256 gamma=4 {} (need > {RATIO_MIN}x)",
            if off.is_empty() { String::new() } else { format!(" [{}]", off.join("; ")) },
            ratio_text.join(", ")
        ),
    )
}

fn ot_accounting(audit: &OtAudit) -> Verdict {
    verdict(
        audit.bad.is_empty() && audit.calls > 0,
        format!(
            "{} OT calls over {} protocol runs, {} violations{}",
            audit.calls,
            audit.channels,
            audit.bad.len(),
            audit.bad.first().map(|b| format!(" (first: {b})")).unwrap_or_default()
        ),
    )
}

fn speedup_band() -> Verdict {
    let (lo, hi) = SPEEDUP_BAND;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut text = Vec::new();
    for (name, profile, net) in [
        ("LAN", DecoderCostProfile::reference_lan(), specdec::transport::NetworkModel::lan()),
        ("WAN", DecoderCostProfile::reference_wan(), specdec::transport::NetworkModel::wan()),
    ] {
        let values: Vec<f64> = (52..=84)
            .map(|a| speedup(a as f64 / 100.0, 8, &profile, &net).unwrap().speedup)
            .collect();
        let (a, b) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        min = min.min(a);
        max = max.max(b);
        text.push(format!("{name} {a:.2}..{b:.2}"));
    }
    verdict(
        min >= lo && max <= hi,
        format!("speedup(alpha in [0.52, 0.84], gamma=8): {} (band [{lo}, {hi}])", text.join(", ")),
    )
}

fn alignment_property() -> Verdict {
    let task = DisjointCorpusTask::build(8, 8, 2024).unwrap();
    let gamma = 4;
    let runs = 200;
    let before = estimate_acceptance(&task.target, &task.public, &task.prompts, gamma, runs, 1).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let data = collect_distillation_set(&task.target, &task.prompts, DEFAULT_TOP_K, 24, &mut rng).unwrap();
    let report = train_align(task.public.clone(), &data, &TrainConfig::default()).unwrap();
    let after = estimate_acceptance(&task.target, &report.model, &task.prompts, gamma, runs, 1).unwrap();
    let gain = after.alpha - before.alpha;

    let mut worst_rel: f64 = 0.0;
    for mode in [TopKMode::Raw, TopKMode::Renormalized] {
        let model = task.public.clone();
        let grad = mean_loss_grad(&data, &model, mode);
        let h = 1e-5;
        let mut fd = Vec::with_capacity(grad.len());
        for i in 0..grad.len() {
            let mut plus = model.clone();
            plus.params_mut()[i] += h;
            let mut minus = model.clone();
            minus.params_mut()[i] -= h;
            fd.push((mean_loss(&data, &plus, mode) - mean_loss(&data, &minus, mode)) / (2.0 * h));
        }
        let diff = grad.iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let scale = fd.iter().map(|x| x.abs()).fold(0.0, f64::max);
        worst_rel = worst_rel.max(diff / scale);
    }
    let stderr_ok = before.stderr < ALPHA_STDERR_MAX && after.stderr < ALPHA_STDERR_MAX;
    verdict(
        gain >= ALPHA_GAIN_MIN && stderr_ok && worst_rel <= GRAD_REL_TOL,
        format!(
            "alpha {:.3} (se {:.4}) -> {:.3} (se {:.4}), gain {gain:.3} (need >= {ALPHA_GAIN_MIN}); gradient rel err {worst_rel:.2e} (limit {GRAD_REL_TOL:.0e})",
            before.alpha, before.stderr, after.alpha, after.stderr
        ),
    )
}

fn privacy_structure(audit: &mut OtAudit) -> Verdict {
    let (public, private) = model_pair(8, 77);
    let config = DecoderConfig {
        gamma: 4,
        ring: ring(),
        backend: CompareBackend::chunked(4),
        ..DecoderConfig::default()
    };
    let mut views = Vec::new();
    let mut direct = 0;
    let mut drafts = std::collections::BTreeSet::new();
    for run in 0..100u64 {
        let mut rngs = PartyRngs::from_seed(9);
        rngs.client = ChaCha12Rng::seed_from_u64(run);
        let mut ch = Channel::new();
        let report = decode_step(&public, &private, &[3], &config, &mut ch, &mut rngs).unwrap();
        drafts.insert(report.outcome.emitted());
        audit.absorb(&ch);
        direct += ch.protocol_messages(Party::Server).count();
        direct += ch
            .transcript(Party::Server)
            .iter()
            .filter(|e| !matches!(e.kind, TrafficKind::Functionality(_)))
            .count();
        views.push(ch.transcript(Party::Server).to_vec());
    }
    let identical = views.windows(2).all(|w| w[0] == w[1]);
    verdict(
        identical && direct == 0,
        format!(
            "100 runs ({} distinct outputs): server views {}, {direct} direct messages to the server",
            drafts.len(),
            if identical { "identical" } else { "DIFFER" }
        ),
    )
}

fn worst_case_progress(audit: &mut OtAudit) -> Verdict {
    const V: usize = 8;
    let uniform = ProbVector::uniform(V);
    let mut steps = 0;
    let mut wrong = 0;
    let mut rng = ChaCha12Rng::seed_from_u64(10);
    for gamma in [1, 4, 8] {
        let config = DecoderConfig {
            gamma,
            ring: ring(),
            backend: CompareBackend::chunked(4),
            ..DecoderConfig::default()
        };
        let mut rngs = PartyRngs::from_seed(gamma as u64);
        for _ in 0..500 {
            let target = rng.gen_range(0..V);
            let p = ProbVector::one_hot(V, target);
            let records: Vec<TraceRecord> = (0..=gamma)
                .map(|position| TraceRecord {
                    position,
                    drafted_token: (target + 1 + rng.gen_range(0..V - 1)) % V,
                    p: p.clone(),
                    q: uniform.clone(),
                })
                .collect();
            let mut ch = Channel::new();
            let report = replay_step(&records, &config, &mut ch, &mut rngs).unwrap();
            audit.absorb(&ch);
            steps += 1;
            if report.outcome.emitted() != vec![target] {
                wrong += 1;
            }
        }
    }

    // Drafts sampled from the uniform model: a draft that happens to hit the
    // one-hot token is accepted, every other step must emit one token.
    let public = FnModel::new(V, |_: &[usize]| ProbVector::uniform(V));
    let private = FnModel::new(V, |prefix: &[usize]| ProbVector::one_hot(V, (prefix.last().unwrap_or(&0) + 3) % V));
    let config = DecoderConfig {
        gamma: 4,
        ring: ring(),
        ..DecoderConfig::default()
    };
    let mut rngs = PartyRngs::from_seed(11);
    let (mut sampled, mut all_rejected, mut sampled_wrong) = (0, 0, 0);
    for _ in 0..500 {
        let mut ch = Channel::new();
        let report = decode_step(&public, &private, &[2], &config, &mut ch, &mut rngs).unwrap();
        audit.absorb(&ch);
        sampled += 1;
        let emitted = report.outcome.emitted();
        if report.outcome.k == 0 {
            all_rejected += 1;
            if emitted != vec![5] {
                sampled_wrong += 1;
            }
        } else if emitted.len() != report.outcome.k + 1 {
            sampled_wrong += 1;
        }
    }
    verdict(
        wrong == 0 && sampled_wrong == 0,
        format!(
            "adversarial drafts: {steps} steps, {wrong} not emitting exactly the target token; sampled drafts: {all_rejected}/{sampled} fully rejected, {sampled_wrong} wrong"
        ),
    )
}

fn main() -> ExitCode {
    let mut audit = OtAudit::default();
    let mut results: Vec<(&str, Verdict)> = Vec::new();
    results.push(("distribution preservation", distribution_preservation(&mut audit)));
    results.push(("oracle equivalence", oracle_equivalence(&mut audit)));
    results.push(("refactored rejection rate", refactored_rejection_rate()));
    results.push(("comparison soundness", comparison_soundness(&mut audit)));
    results.push(("cost model soundness", cost_model_soundness(&mut audit)));
    let privacy = privacy_structure(&mut audit);
    let worst = worst_case_progress(&mut audit);
    results.push(("OT accounting", ot_accounting(&audit)));
    results.push(("speedup band", speedup_band()));
    results.push(("alignment property", alignment_property()));
    results.push(("privacy structure", privacy));
    results.push(("worst-case progress", worst));

    let mut failed = 0;
    for (i, (name, v)) in results.iter().enumerate() {
        if !v.pass {
            failed += 1;
        }
        println!(
            "{} [{:>2}] {name}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            i + 1,
            v.detail
        );
    }
    println!("acceptance: {}/{} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
