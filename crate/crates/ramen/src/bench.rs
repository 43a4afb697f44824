//! Wall-clock comparison of the cached engine against the recompute engine.

use std::time::Instant;

use ramen_core::analysis::Timing;
use ramen_core::{AdaptOutcome, GradientSource, Ramen, RamenConfig, Sample, TextBank};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest relative logit difference tolerated between the two engines.
pub const ENGINE_LOGIT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub timing: Timing,
    pub timed_samples: usize,
    pub max_logit_rel_err: f64,
}

impl BenchReport {
    pub fn speedup(&self) -> f64 {
        self.timing.naive_ns_per_sample / self.timing.cached_ns_per_sample
    }
}

/// `||a − b|| / ||b||`, with the denominator floored at 1e-300.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / scale.max(1e-300)
}

/// Largest per-sample relative logit gap between two runs; errors when the
/// runs differ in length or in any predicted label.
pub fn compare_outcomes(a: &[AdaptOutcome], b: &[AdaptOutcome]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Verification(format!(
            "engines produced {} and {} outcomes",
            a.len(),
            b.len()
        )));
    }
    let mut worst = 0.0f64;
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if x.prediction.pseudo_label != y.prediction.pseudo_label {
            return Err(Error::Verification(format!("sample {i}: predicted labels differ")));
        }
        worst = worst.max(rel_err(&x.prediction.logits, &y.prediction.logits));
    }
    Ok(worst)
}

/// Warms both engines on `stream[..warmup]`, then times each on the rest
/// `repeats` times from the same warm state and keeps the fastest pass.
/// Fails before reporting any timing if the engines disagree.
pub fn bench_cache(
    stream: &[Sample],
    bank: &TextBank,
    cfg: &RamenConfig,
    warmup: usize,
    repeats: usize,
) -> Result<BenchReport> {
    if warmup >= stream.len() {
        return Err(Error::Usage("warm-up must leave samples to time".into()));
    }
    let (warm, timed) = stream.split_at(warmup);
    let mut cached = Ramen::with_source(cfg.clone(), bank.clone(), GradientSource::Cache)?;
    let mut naive = Ramen::with_source(cfg.clone(), bank.clone(), GradientSource::Recompute)?;
    cached.run(warm)?;
    naive.run(warm)?;

    let time = |engine: &Ramen| -> Result<(f64, Vec<AdaptOutcome>)> {
        let mut best = f64::INFINITY;
        let mut out = Vec::new();
        for _ in 0..repeats.max(1) {
            let mut e = engine.clone();
            let t = Instant::now();
            let run = e.run(timed)?;
            best = best.min(t.elapsed().as_nanos() as f64);
            out = run;
        }
        Ok((best / timed.len() as f64, out))
    };
    let (cached_ns, a) = time(&cached)?;
    let (naive_ns, b) = time(&naive)?;
    let max_logit_rel_err = compare_outcomes(&a, &b)?;
    if max_logit_rel_err >= ENGINE_LOGIT_TOL {
        return Err(Error::Verification(format!(
            "engine logits differ by {max_logit_rel_err:e}"
        )));
    }
    Ok(BenchReport {
        timing: Timing {
            cached_ns_per_sample: cached_ns,
            naive_ns_per_sample: naive_ns,
        },
        timed_samples: timed.len(),
        max_logit_rel_err,
    })
}

/// Benches `cfg` and the same config with `retrieve_k` doubled, alternating
/// the two for `rounds` rounds and keeping the fastest time of each engine.
pub fn bench_k_doubling(
    stream: &[Sample],
    bank: &TextBank,
    cfg: &RamenConfig,
    warmup: usize,
    rounds: usize,
) -> Result<[BenchReport; 2]> {
    let doubled = RamenConfig {
        retrieve_k: 2 * cfg.retrieve_k,
        ..cfg.clone()
    };
    let mut best: [Option<BenchReport>; 2] = [None, None];
    for _ in 0..rounds.max(1) {
        for (slot, c) in best.iter_mut().zip([cfg, &doubled]) {
            let r = bench_cache(stream, bank, c, warmup, 1)?;
            *slot = Some(match *slot {
                None => r,
                Some(b) => BenchReport {
                    timing: Timing {
                        cached_ns_per_sample: b
                            .timing
                            .cached_ns_per_sample
                            .min(r.timing.cached_ns_per_sample),
                        naive_ns_per_sample: b
                            .timing
                            .naive_ns_per_sample
                            .min(r.timing.naive_ns_per_sample),
                    },
                    max_logit_rel_err: b.max_logit_rel_err.max(r.max_logit_rel_err),
                    ..b
                },
            });
        }
    }
    Ok(best.map(|b| b.expect("at least one round")))
}
