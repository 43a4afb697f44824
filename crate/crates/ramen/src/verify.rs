//! Numerical self-checks behind `ramen verify`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ramen_core::analysis::{bias_gradient_check, mirror_across_bisector, verify_theorem1};
use ramen_core::datagen::{generate, StreamConfig};
use ramen_core::{
    finite_diff_grad, sample_grad, AffineParams, GradientSource, Ramen, RamenConfig, Sample,
    TextBank,
};
use serde::{Deserialize, Serialize};

use crate::bench::{compare_outcomes, rel_err};
use crate::error::Result;

pub const GRAD_REL_TOL: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-5;
pub const THEOREM_TOL: f64 = 1e-12;
pub const THEOREM_ETA: f64 = 1e-3;
pub const CACHE_REL_TOL: f64 = 1e-12;
pub const BIAS_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Grad,
    Theorem,
    Cache,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub suite: String,
    pub name: String,
    /// Worst observed value; the check passes when it is below `threshold`.
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    fn below(suite: &str, name: &str, value: f64, threshold: f64) -> Self {
        Self {
            suite: suite.into(),
            name: name.into(),
            value,
            threshold,
            passed: value < threshold,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}/{}: {:.3e} (limit {:.0e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.value,
            self.threshold
        )
    }
}

pub fn run_suite(suite: Suite) -> Result<Vec<Check>> {
    Ok(match suite {
        Suite::Grad => grad_suite(100)?,
        Suite::Theorem => theorem_suite(100)?,
        Suite::Cache => cache_suite(1000)?,
        Suite::All => {
            let mut v = grad_suite(100)?;
            v.extend(theorem_suite(100)?);
            v.extend(cache_suite(1000)?);
            v
        }
    })
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn random_bank(rng: &mut ChaCha8Rng, c: usize, d: usize, log_temp: f64) -> TextBank {
    let rows = (0..c).map(|_| unit(rng, d)).collect();
    let names = (0..c).map(|i| format!("class{i}")).collect();
    TextBank::new(rows, log_temp, names).expect("unit rows")
}

/// Closed-form gradients against central differences on random instances
/// with `C ≤ 10`, `d ≤ 32`, and perturbed affine parameters.
pub fn grad_suite(seeds: u64) -> Result<Vec<Check>> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rng.random_range(2..=10);
        let d = rng.random_range(2..=32);
        let log_temp = rng.random_range(0.0..3.0);
        let bank = random_bank(&mut rng, c, d, log_temp);
        let params = AffineParams::new(
            (0..d).map(|_| rng.random_range(0.5..1.5)).collect(),
            (0..d).map(|_| rng.random_range(-0.2..0.2)).collect(),
        )?;
        let v = unit(&mut rng, d);
        let g = sample_grad(&v, &params, &bank)?;
        let fd = finite_diff_grad(&v, &params, &bank, FD_STEP)?;
        worst = worst
            .max(rel_err(&g.g_w, &fd.g_w))
            .max(rel_err(&g.g_b, &fd.g_b));
    }
    Ok(vec![Check::below("grad", "fd_rel_err", worst, GRAD_REL_TOL)])
}

/// One-step feature-importance prediction, its diagonal form, the null step,
/// and bias cancellation under mirrored binary support.
pub fn theorem_suite(seeds: u64) -> Result<Vec<Check>> {
    let d = 8;
    let (mut gap, mut diag_gap, mut null_gap, mut bias) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let log_temp = rng.random_range(0.0..1.5);
        let bank = random_bank(&mut rng, 2, d, log_temp);
        let support: Vec<Sample> = (0..10)
            .map(|_| Sample::new(unit(&mut rng, d), None, None))
            .collect::<std::result::Result<_, _>>()?;
        let chk = verify_theorem1(&support, &bank, THEOREM_ETA)?;
        gap = gap.max(chk.max_abs_gap);

        let zero = verify_theorem1(&support, &bank, 0.0)?;
        for (p, e) in zero.predicted_r.iter().zip(&zero.empirical_r) {
            null_gap = null_gap.max((p - 1.0 / d as f64).abs()).max((e - 1.0 / d as f64).abs());
        }

        let mut axes = Vec::new();
        for h in 0..d {
            if rng.random_bool(0.75) {
                let mut v = vec![0.0; d];
                v[h] = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                axes.push(Sample::new(v, None, None)?);
            }
        }
        if !axes.is_empty() {
            diag_gap = diag_gap.max(verify_theorem1(&axes, &bank, THEOREM_ETA)?.diag_only_gap);
        }

        let mut mirrored = Vec::new();
        for _ in 0..5 {
            let v = unit(&mut rng, d);
            let m = mirror_across_bisector(&v, bank.row(0), bank.row(1));
            mirrored.push(Sample::new(v, None, None)?);
            mirrored.push(Sample::new(m, None, None)?);
        }
        bias = bias.max(bias_gradient_check(&mirrored, &bank)?);
    }
    Ok(vec![
        Check::below("theorem", "one_step_gap", gap, THEOREM_TOL),
        Check::below("theorem", "diagonal_gap", diag_gap, THEOREM_TOL),
        Check::below("theorem", "null_step_gap", null_gap, THEOREM_TOL),
        Check::below("theorem", "mirrored_bias_inf_norm", bias, BIAS_TOL),
    ])
}

/// Cached aggregation against the recompute engine on an `n`-sample mixed
/// stream from the reference generator.
pub fn cache_suite(n: usize) -> Result<Vec<Check>> {
    let base = StreamConfig::default();
    let cfg = StreamConfig {
        samples_per_domain: n.div_ceil(base.num_domains),
        ..base
    };
    let g = generate(&cfg)?;
    let stream = &g.samples[..n.min(g.samples.len())];
    let rc = RamenConfig::reference();
    let mut cached = Ramen::with_source(rc.clone(), g.bank.clone(), GradientSource::Cache)?;
    let mut naive = Ramen::with_source(rc, g.bank, GradientSource::Recompute)?;
    let a = cached.run(stream)?;
    let b = naive.run(stream)?;
    let err = compare_outcomes(&a, &b).unwrap_or(f64::INFINITY);
    Ok(vec![Check::below("cache", "logit_rel_err", err, CACHE_REL_TOL)])
}
