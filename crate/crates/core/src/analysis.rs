//! Evaluation reports, retrieval diagnostics, and the one-step feature
//! importance verifier.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{gd_step, AdaptOutcome};
use crate::model::{batch_grads, AffineParams, GradRecord, Sample, TextBank};
use crate::vecops::{dot, norm};
use crate::{Error, Result};

/// Number of similarity deciles reported by [`similarity_bins`].
pub const NUM_BINS: usize = 10;

/// Default cap on the number of pairs scored by [`similarity_bins`].
pub const MAX_PAIRS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub cached_ns_per_sample: f64,
    pub naive_ns_per_sample: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Domain ids in sorted order; indexes the composition matrix.
    pub domains: Vec<String>,
    pub per_domain_accuracy: BTreeMap<String, f64>,
    /// Unweighted mean of the per-domain accuracies.
    pub macro_average: f64,
    pub overall_accuracy: f64,
    /// Macro average of the zero-shot predictions carried in the outcomes.
    pub zero_shot_macro_average: f64,
    /// Row `i`, column `j`: mean percentage of support entries from domain `j`
    /// for queries from domain `i`. Rows of domains whose queries never had a
    /// support set are all zero.
    pub composition_matrix: Vec<Vec<f64>>,
    pub same_domain_ratio_bins: Option<Vec<f64>>,
    pub timing: Option<Timing>,
}

impl EvalReport {
    /// Mean of the composition-matrix diagonal, in percent.
    pub fn mean_diagonal(&self) -> f64 {
        let n = self.composition_matrix.len();
        if n == 0 {
            return 0.0;
        }
        (0..n).map(|i| self.composition_matrix[i][i]).sum::<f64>() / n as f64
    }
}

/// Accuracies and retrieval composition for a finished run.
///
/// Every sample needs a ground-truth label and domain id.
pub fn evaluate(outcomes: &[AdaptOutcome], samples: &[Sample]) -> Result<EvalReport> {
    if outcomes.len() != samples.len() {
        return Err(Error::DimensionMismatch {
            expected: samples.len(),
            got: outcomes.len(),
        });
    }
    let mut domains = BTreeSet::new();
    for (i, s) in samples.iter().enumerate() {
        match (&s.true_label, &s.domain_id) {
            (Some(_), Some(d)) => {
                domains.insert(d.clone());
            }
            _ => return Err(Error::MissingLabel(i)),
        }
    }
    let domains: Vec<String> = domains.into_iter().collect();
    let index: BTreeMap<&str, usize> = domains
        .iter()
        .enumerate()
        .map(|(i, d)| (d.as_str(), i))
        .collect();
    let nd = domains.len();

    let mut correct = vec![0usize; nd];
    let mut zs_correct = vec![0usize; nd];
    let mut total = vec![0usize; nd];
    let mut comp = vec![vec![0.0; nd]; nd];
    let mut comp_rows = vec![0usize; nd];

    for (o, s) in outcomes.iter().zip(samples) {
        let di = index[s.domain_id.as_deref().unwrap_or_default()];
        let label = s.true_label.unwrap_or_default();
        total[di] += 1;
        correct[di] += usize::from(o.prediction.pseudo_label == label);
        zs_correct[di] += usize::from(o.zero_shot.pseudo_label == label);

        let known: Vec<usize> = o
            .support_domain_ids
            .iter()
            .filter_map(|d| index.get(&**d).copied())
            .collect();
        if !known.is_empty() {
            let share = 100.0 / known.len() as f64;
            for j in known {
                comp[di][j] += share;
            }
            comp_rows[di] += 1;
        }
    }
    for (row, n) in comp.iter_mut().zip(&comp_rows) {
        if *n > 0 {
            row.iter_mut().for_each(|x| *x /= *n as f64);
        }
    }

    let acc: Vec<f64> = correct
        .iter()
        .zip(&total)
        .map(|(c, t)| *c as f64 / *t as f64)
        .collect();
    let zs_acc: Vec<f64> = zs_correct
        .iter()
        .zip(&total)
        .map(|(c, t)| *c as f64 / *t as f64)
        .collect();
    let n = samples.len().max(1) as f64;
    Ok(EvalReport {
        per_domain_accuracy: domains.iter().cloned().zip(acc.iter().copied()).collect(),
        macro_average: mean(&acc),
        overall_accuracy: correct.iter().sum::<usize>() as f64 / n,
        zero_shot_macro_average: mean(&zs_acc),
        composition_matrix: comp,
        same_domain_ratio_bins: None,
        timing: None,
        domains,
    })
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Fraction of same-domain pairs in each similarity decile, most similar first.
///
/// All pairs are scored when there are at most `max_pairs` of them; otherwise
/// `max_pairs` distinct-index pairs are drawn uniformly with `seed`.
pub fn similarity_bins(samples: &[Sample], max_pairs: usize, seed: u64) -> Result<Vec<f64>> {
    let labeled: Vec<(&[f64], &str)> = samples
        .iter()
        .filter_map(|s| s.domain_id.as_deref().map(|d| (s.v.as_slice(), d)))
        .collect();
    let distinct: BTreeSet<&str> = labeled.iter().map(|(_, d)| *d).collect();
    if distinct.len() < 2 {
        return Err(Error::invalid("similarity bins need at least two domains"));
    }
    let n = labeled.len();
    let total_pairs = n * (n - 1) / 2;
    let mut pairs: Vec<(f64, bool)> = Vec::new();
    if total_pairs <= max_pairs {
        pairs.reserve(total_pairs);
        for i in 0..n {
            for j in i + 1..n {
                pairs.push(score(&labeled, i, j));
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        pairs.reserve(max_pairs);
        while pairs.len() < max_pairs {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i != j {
                pairs.push(score(&labeled, i, j));
            }
        }
    }
    if pairs.len() < NUM_BINS {
        return Err(Error::invalid("too few pairs for ten bins"));
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let m = pairs.len();
    Ok((0..NUM_BINS)
        .map(|b| {
            let bin = &pairs[b * m / NUM_BINS..(b + 1) * m / NUM_BINS];
            bin.iter().filter(|(_, same)| *same).count() as f64 / bin.len() as f64
        })
        .collect())
}

fn score(labeled: &[(&[f64], &str)], i: usize, j: usize) -> (f64, bool) {
    (dot(labeled[i].0, labeled[j].0), labeled[i].1 == labeled[j].1)
}

/// Predicted versus measured feature importance after one gradient step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremCheck {
    pub eta: f64,
    /// `r_h` from the closed form in the probability-weighted second moment.
    pub predicted_r: Vec<f64>,
    /// `|w_h| / Σ|w_l|` after an actual plain-GD step on the mean support entropy.
    pub empirical_r: Vec<f64>,
    pub max_abs_gap: f64,
    /// `E[p_0 p_1 v vᵀ]` over the support, row-major `d × d`.
    pub m_matrix: Vec<Vec<f64>>,
    /// Closed form using only the diagonal of `M`.
    pub diag_r: Vec<f64>,
    /// Max gap between the diagonal-only and the full closed form.
    pub diag_only_gap: f64,
}

/// Checks the closed-form feature importance after one entropy-minimization
/// gradient step at `w = 1, b = 0` on a two-class support set.
///
/// The temperature is folded into the text embeddings, `Δ = exp(t)(t_1 - t_0)`,
/// so the closed form predicts
/// `r_h = (1 + η Δ_h (MΔ)_h) / (d + η Δᵀ M Δ)`.
pub fn verify_theorem1(support: &[Sample], bank: &TextBank, eta: f64) -> Result<TheoremCheck> {
    if bank.num_classes() != 2 {
        return Err(Error::invalid("feature-importance check needs a two-class bank"));
    }
    if !eta.is_finite() || eta < 0.0 {
        return Err(Error::invalid("eta must be finite and non-negative"));
    }
    let d = bank.dim();
    let pretrained = AffineParams::pretrained(d);
    let graded = batch_grads(support, &pretrained, bank)?;
    let n = support.len() as f64;

    // empirical route: mean gradient, one GD step, normalized magnitudes
    let mut mean_grad = GradRecord::zeros(d);
    for (_, g) in &graded {
        for h in 0..d {
            mean_grad.g_w[h] += g.g_w[h] / n;
            mean_grad.g_b[h] += g.g_b[h] / n;
        }
    }
    let stepped = gd_step(&pretrained, &mean_grad, eta)?;
    if let Some((index, &value)) = stepped.w.iter().enumerate().find(|(_, w)| **w <= 0.0) {
        return Err(Error::SignFlip { index, value });
    }
    let total: f64 = stepped.w.iter().map(|w| w.abs()).sum();
    let empirical_r: Vec<f64> = stepped.w.iter().map(|w| w.abs() / total).collect();

    // closed-form route
    let scale = bank.scale();
    let delta: Vec<f64> = bank
        .row(1)
        .iter()
        .zip(bank.row(0))
        .map(|(a, b)| scale * (a - b))
        .collect();
    let mut m = vec![vec![0.0; d]; d];
    for (s, (pred, _)) in support.iter().zip(&graded) {
        let weight = pred.probs[0] * pred.probs[1] / n;
        for (row, vi) in m.iter_mut().zip(&s.v) {
            for (cell, vj) in row.iter_mut().zip(&s.v) {
                *cell += weight * vi * vj;
            }
        }
    }
    let m_delta: Vec<f64> = m.iter().map(|row| dot(row, &delta)).collect();
    let quad = dot(&delta, &m_delta);
    let denom = d as f64 + eta * quad;
    let predicted_r: Vec<f64> = (0..d)
        .map(|h| (1.0 + eta * delta[h] * m_delta[h]) / denom)
        .collect();

    let diag_quad: f64 = (0..d).map(|l| delta[l] * delta[l] * m[l][l]).sum();
    let diag_denom = d as f64 + eta * diag_quad;
    let diag_r: Vec<f64> = (0..d)
        .map(|h| (1.0 + eta * delta[h] * delta[h] * m[h][h]) / diag_denom)
        .collect();

    Ok(TheoremCheck {
        eta,
        max_abs_gap: max_gap(&predicted_r, &empirical_r),
        diag_only_gap: max_gap(&predicted_r, &diag_r),
        predicted_r,
        empirical_r,
        m_matrix: m,
        diag_r,
    })
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `||Σ g_b / n||_∞` of the mean bias gradient at pretrained parameters.
pub fn bias_gradient_check(support: &[Sample], bank: &TextBank) -> Result<f64> {
    let d = bank.dim();
    let graded = batch_grads(support, &AffineParams::pretrained(d), bank)?;
    let n = support.len() as f64;
    let mut mean = vec![0.0; d];
    for (_, g) in &graded {
        for (m, x) in mean.iter_mut().zip(&g.g_b) {
            *m += x / n;
        }
    }
    Ok(mean.iter().fold(0.0, |acc, x| acc.max(x.abs())))
}

/// Reflection of `v` across the hyperplane bisecting two unit text embeddings.
///
/// Swaps the inner products with `t0` and `t1`, so a sample and its mirror
/// carry exactly opposite logit gaps.
pub fn mirror_across_bisector(v: &[f64], t0: &[f64], t1: &[f64]) -> Vec<f64> {
    let mut u: Vec<f64> = t1.iter().zip(t0).map(|(a, b)| a - b).collect();
    let n = norm(&u);
    if n == 0.0 {
        return v.to_vec();
    }
    u.iter_mut().for_each(|x| *x /= n);
    let proj = dot(v, &u);
    v.iter().zip(&u).map(|(x, u)| x - 2.0 * proj * u).collect()
}
