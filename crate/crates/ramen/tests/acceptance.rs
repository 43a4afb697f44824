//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run with `cargo test -p ramen --test acceptance`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ramen::bench::bench_k_doubling;
use ramen::core::analysis::{
    bias_gradient_check, evaluate, mirror_across_bisector, similarity_bins, EvalReport, MAX_PAIRS,
};
use ramen::core::datagen::{generate, StreamConfig, StreamOrdering};
use ramen::core::{
    aggregate, forward, predict, ClassMemory, GradRecord, MemoryEntry, MemoryMode, Ramen,
    RamenConfig, Sample, TextBank,
};
use ramen::method::run_method;
use ramen::verify::{cache_suite, grad_suite, theorem_suite, Check};
use ramen::Method;

// gradient exactness
const GRAD_INSTANCES: u64 = 100;
const GRAD_LIMIT: Duration = Duration::from_secs(5);
// cache equivalence
const CACHE_SAMPLES: usize = 1000;
const CACHE_LIMIT: Duration = Duration::from_secs(30);
// feature-importance closed form
const THEOREM_SEEDS: u64 = 100;
const THEOREM_LIMIT: Duration = Duration::from_secs(10);
// weight-scale invariance
const SCALES: [f64; 5] = [1e-9, 0.37, 1.0 + 1e-12, 7.0, 1e9];
const INVARIANCE_SAMPLES: usize = 600;
// retrieval oracle
const RETRIEVAL_TRIALS: u64 = 2000;
// reference benchmark, frozen from the first seeded run
const REFERENCE_SEED: u64 = 0;
const FROZEN_RAMEN_MIXED: f64 = 0.9837;
const FROZEN_TOL: f64 = 0.005;
const MIN_MARGIN_OVER_ENTMIN: f64 = 0.02;
const MAX_MIXED_SEQUENTIAL_GAP: f64 = 0.02;
const BENCHMARK_LIMIT: Duration = Duration::from_secs(120);
// ablations
const ABLATION_SEEDS: u64 = 5;
// composition
const DIAGONAL_FACTOR: f64 = 2.0;
// similarity bins, as fractions
const MAX_INVERSION: f64 = 0.01;
// timing
const TIMING_CLASSES: usize = 50;
const TIMING_K: usize = 1;
const TIMING_CAPACITY: usize = 8;
const TIMING_DIM: usize = 128;
const TIMING_SAMPLES: usize = 400;
const TIMING_ROUNDS: usize = 7;
const MIN_SPEEDUP: f64 = 5.0;
const MIN_NAIVE_GROWTH: f64 = 1.5;
const MAX_CACHED_CHANGE: f64 = 0.2;
// mirrored bias
const BIAS_TOL: f64 = 1e-12;
const BIAS_SEEDS: u64 = 200;

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

fn checks_pass(checks: &[Check]) -> (bool, String) {
    let detail = checks
        .iter()
        .map(|c| format!("{}={:.2e}", c.name, c.value))
        .collect::<Vec<_>>()
        .join(" ");
    (checks.iter().all(|c| c.passed), detail)
}

fn within(limit: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let t = Instant::now();
    let (ok, detail) = f()?;
    let took = t.elapsed();
    Ok((
        ok && took < limit,
        format!("{detail} in {:.2}s (limit {}s)", took.as_secs_f64(), limit.as_secs()),
    ))
}

fn gradient_exactness() -> Outcome {
    within(GRAD_LIMIT, || Ok(checks_pass(&grad_suite(GRAD_INSTANCES)?)))
}

fn cache_equivalence() -> Outcome {
    within(CACHE_LIMIT, || Ok(checks_pass(&cache_suite(CACHE_SAMPLES)?)))
}

fn theorem_exactness() -> Outcome {
    within(THEOREM_LIMIT, || {
        let checks: Vec<Check> = theorem_suite(THEOREM_SEEDS)?
            .into_iter()
            .filter(|c| c.name != "mirrored_bias_inf_norm")
            .collect();
        Ok(checks_pass(&checks))
    })
}

fn reference_stream(seed: u64, ordering: StreamOrdering) -> Result<(Vec<Sample>, TextBank), ramen::core::Error> {
    let g = generate(&StreamConfig {
        seed,
        ordering,
        ..StreamConfig::default()
    })?;
    Ok((g.samples, g.bank))
}

fn reference_config(seed: u64) -> RamenConfig {
    RamenConfig {
        seed,
        ..RamenConfig::reference()
    }
}

fn signsgd_invariance() -> Outcome {
    let (stream, bank) = reference_stream(REFERENCE_SEED, StreamOrdering::Mixed)?;
    let cfg = reference_config(REFERENCE_SEED);
    let mut engine = Ramen::new(cfg.clone(), bank.clone())?;
    let pretrained = engine.pretrained().clone();
    let (mut compared, mut mismatches) = (0usize, 0usize);
    for batch in stream[..INVARIANCE_SAMPLES].chunks(cfg.batch_size) {
        let outcomes = engine.process_batch(batch)?;
        for (s, o) in batch.iter().zip(&outcomes) {
            let mut support = engine.support_for(&s.v)?;
            let base = cfg.optimizer.step(&pretrained, &aggregate(&support)?, cfg.lr)?;
            let base_pred = predict(&forward(&s.v, &base)?, &bank)?;
            if base_pred != o.prediction {
                mismatches += 1;
            }
            for c in SCALES {
                support.rescale(c)?;
                let stepped = cfg.optimizer.step(&pretrained, &aggregate(&support)?, cfg.lr)?;
                let pred = predict(&forward(&s.v, &stepped)?, &bank)?;
                let same = pred.pseudo_label == base_pred.pseudo_label
                    && pred
                        .logits
                        .iter()
                        .zip(&base_pred.logits)
                        .all(|(a, b)| a.to_bits() == b.to_bits());
                compared += 1;
                if !same {
                    mismatches += 1;
                }
            }
        }
    }
    Ok((
        mismatches == 0,
        format!("{compared} rescaled episodes, {mismatches} not bitwise equal"),
    ))
}

// Brute-force scan: every queue sorted by similarity, then by recency.
fn oracle_retrieve(memory: &ClassMemory, query: &[f64], k: usize) -> Vec<(u64, f64)> {
    let take = match memory.mode() {
        MemoryMode::Split => k,
        MemoryMode::Unsplit => k * memory.num_classes(),
    };
    let mut out = Vec::new();
    for q in memory.queues() {
        let mut all: Vec<(u64, f64)> = q
            .iter()
            .map(|e| (e.seq, query.iter().zip(&e.z).map(|(a, b)| a * b).sum()))
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(b.0.cmp(&a.0)));
        out.extend(all.into_iter().take(take));
    }
    out
}

fn retrieval_oracle() -> Outcome {
    let (mut failures, mut tied_trials) = (0u64, 0u64);
    for trial in 0..RETRIEVAL_TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let c = rng.random_range(1..=5);
        let cap = rng.random_range(1..=8);
        let d = rng.random_range(2..=4);
        let mode = if rng.random_bool(0.5) {
            MemoryMode::Split
        } else {
            MemoryMode::Unsplit
        };
        // half-integer grid coordinates make exact ties common
        let grid = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..d).map(|_| rng.random_range(-2i32..=2) as f64 * 0.5).collect()
        };
        let mut memory = ClassMemory::new(c, cap, mode)?;
        for _ in 0..rng.random_range(0..60) {
            let z = grid(&mut rng);
            let label = rng.random_range(0..c);
            memory.insert(MemoryEntry::new(z, GradRecord::zeros(d), 0.5, None), label)?;
        }
        let query = grid(&mut rng);
        let k = rng.random_range(1..=6);
        let got: Vec<(u64, f64)> = memory
            .retrieve(&query, k)?
            .iter()
            .map(|it| (it.entry.seq, it.similarity))
            .collect();
        let want = oracle_retrieve(&memory, &query, k);
        if got != want {
            failures += 1;
        }
        let mut sims: Vec<f64> = want.iter().map(|p| p.1).collect();
        let n = sims.len();
        sims.dedup();
        tied_trials += u64::from(sims.len() < n);
    }
    Ok((
        failures == 0 && tied_trials > 0,
        format!("{RETRIEVAL_TRIALS} trials, {tied_trials} with ties, {failures} mismatches"),
    ))
}

fn macro_of(method: Method, stream: &[Sample], bank: &TextBank, seed: u64) -> Result<EvalReport, Box<dyn std::error::Error>> {
    let run = run_method(method, stream, bank, &reference_config(seed))?;
    Ok(evaluate(&run.outcomes, stream)?)
}

fn mixed_domain_trend() -> Outcome {
    within(BENCHMARK_LIMIT, || {
        let (mixed, bank) = reference_stream(REFERENCE_SEED, StreamOrdering::Mixed)?;
        let (sequential, seq_bank) = reference_stream(REFERENCE_SEED, StreamOrdering::Sequential)?;
        let ramen = macro_of(Method::Ramen, &mixed, &bank, REFERENCE_SEED)?.macro_average;
        let entmin = macro_of(Method::Entmin, &mixed, &bank, REFERENCE_SEED)?.macro_average;
        let seq = macro_of(Method::Ramen, &sequential, &seq_bank, REFERENCE_SEED)?.macro_average;
        let ok = ramen - entmin >= MIN_MARGIN_OVER_ENTMIN
            && (ramen - seq).abs() <= MAX_MIXED_SEQUENTIAL_GAP
            && (ramen - FROZEN_RAMEN_MIXED).abs() <= FROZEN_TOL;
        Ok((
            ok,
            format!(
                "ramen mixed {ramen:.4} (frozen {FROZEN_RAMEN_MIXED}), entmin mixed {entmin:.4}, ramen sequential {seq:.4}"
            ),
        ))
    })
}

fn ablation_trends() -> Outcome {
    let mut sums = vec![0.0; 1 + Method::ABLATIONS.len()];
    for seed in 0..ABLATION_SEEDS {
        let (stream, bank) = reference_stream(seed, StreamOrdering::Mixed)?;
        for (sum, m) in sums.iter_mut().zip([Method::Ramen].iter().chain(&Method::ABLATIONS)) {
            *sum += macro_of(*m, &stream, &bank, seed)?.macro_average / ABLATION_SEEDS as f64;
        }
    }
    let full = sums[0];
    let ok = sums[1..].iter().all(|&a| full >= a);
    let detail = Method::ABLATIONS
        .iter()
        .zip(&sums[1..])
        .map(|(m, a)| format!("{m} {a:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((ok, format!("ramen {full:.4} vs {detail}")))
}

fn composition_diagonal() -> Outcome {
    let (stream, bank) = reference_stream(REFERENCE_SEED, StreamOrdering::Mixed)?;
    let report = macro_of(Method::Ramen, &stream, &bank, REFERENCE_SEED)?;
    let uniform = 100.0 / report.composition_matrix.len() as f64;
    let diag = report.mean_diagonal();
    Ok((
        diag >= DIAGONAL_FACTOR * uniform,
        format!("mean diagonal {diag:.1}% vs uniform {uniform:.1}%"),
    ))
}

fn similarity_deciles() -> Outcome {
    let (stream, _) = reference_stream(REFERENCE_SEED, StreamOrdering::Mixed)?;
    let bins = similarity_bins(&stream, MAX_PAIRS, REFERENCE_SEED)?;
    let rises: Vec<f64> = bins
        .windows(2)
        .map(|w| w[1] - w[0])
        .filter(|&r| r > 0.0)
        .collect();
    let ok = rises.len() <= 1 && rises.iter().all(|&r| r <= MAX_INVERSION);
    let shown = bins
        .iter()
        .map(|b| format!("{:.1}", 100.0 * b))
        .collect::<Vec<_>>()
        .join(" ");
    Ok((ok, format!("same-domain % by decile: {shown}")))
}

fn efficiency() -> Outcome {
    let warmup = 3 * TIMING_CLASSES * TIMING_CAPACITY;
    let g = generate(&StreamConfig {
        num_classes: TIMING_CLASSES,
        dim: TIMING_DIM,
        class_dims: TIMING_DIM / 2,
        domain_dims: TIMING_DIM / 4,
        samples_per_domain: (warmup + TIMING_SAMPLES).div_ceil(4),
        ..StreamConfig::default()
    })?;
    let cfg = RamenConfig {
        capacity: TIMING_CAPACITY,
        retrieve_k: TIMING_K,
        ..RamenConfig::reference()
    };
    let [base, doubled] = bench_k_doubling(&g.samples, &g.bank, &cfg, warmup, TIMING_ROUNDS)?;
    let speedup = base.speedup();
    let naive_growth = doubled.timing.naive_ns_per_sample / base.timing.naive_ns_per_sample;
    let cached_change =
        doubled.timing.cached_ns_per_sample / base.timing.cached_ns_per_sample - 1.0;
    let ok = speedup >= MIN_SPEEDUP
        && naive_growth >= MIN_NAIVE_GROWTH
        && cached_change.abs() < MAX_CACHED_CHANGE;
    Ok((
        ok,
        format!(
            "C*k={}: naive/cached {speedup:.2}; k doubled: naive x{naive_growth:.2}, cached {:+.1}% ({:.0}/{:.0} ns cached, {:.0}/{:.0} ns naive)",
            TIMING_CLASSES * TIMING_K,
            100.0 * cached_change,
            base.timing.cached_ns_per_sample,
            doubled.timing.cached_ns_per_sample,
            base.timing.naive_ns_per_sample,
            doubled.timing.naive_ns_per_sample,
        ),
    ))
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn mirrored_bias() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..BIAS_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(2..=32);
        let log_temp = rng.random_range(0.0..3.0);
        let bank = TextBank::new(
            vec![unit(&mut rng, d), unit(&mut rng, d)],
            log_temp,
            vec!["a".into(), "b".into()],
        )?;
        let mut support = Vec::new();
        for _ in 0..rng.random_range(1..=20) {
            let v = unit(&mut rng, d);
            let m = mirror_across_bisector(&v, bank.row(0), bank.row(1));
            support.push(Sample::new(v, None, None)?);
            support.push(Sample::new(m, None, None)?);
        }
        worst = worst.max(bias_gradient_check(&support, &bank)?);
    }
    Ok((
        worst < BIAS_TOL,
        format!("max ||g_b||_inf {worst:.2e} over {BIAS_SEEDS} mirrored sets"),
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("gradient exactness", gradient_exactness),
        ("cache equivalence", cache_equivalence),
        ("feature-importance closed form", theorem_exactness),
        ("signsgd weight-scale invariance", signsgd_invariance),
        ("retrieval oracle", retrieval_oracle),
        ("mixed-domain trend", mixed_domain_trend),
        ("ablation trends", ablation_trends),
        ("composition diagonal", composition_diagonal),
        ("similarity deciles", similarity_deciles),
        ("efficiency", efficiency),
        ("mirrored-support bias gradient", mirrored_bias),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        let (ok, detail) = run().unwrap_or_else(|e| (false, format!("error: {e}")));
        failed += usize::from(!ok);
        println!(
            "{} {:>2} {name}: {detail}",
            if ok { "PASS" } else { "FAIL" },
            i + 1
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
