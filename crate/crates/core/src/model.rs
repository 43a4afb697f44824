//! Zero-shot classifier head with a trainable elementwise affine transform.
//!
//! A normalized feature `v` goes through `z = v ⊙ w + b`, then through
//! temperature-scaled inner products with fixed class text embeddings. The
//! post-affine embedding is deliberately not re-normalized, which keeps the
//! closed-form entropy gradients below exact.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::vecops::{all_finite, dot, norm};
use crate::{Error, Result, UNIT_NORM_TOL};

/// Fixed class text embeddings (one unit-norm row per class) and log-temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBank {
    rows: Vec<f64>,
    num_classes: usize,
    dim: usize,
    log_temp: f64,
    class_names: Vec<String>,
}

impl TextBank {
    /// Builds a bank from rows that must already be unit norm (within [`UNIT_NORM_TOL`]).
    pub fn new(embeddings: Vec<Vec<f64>>, log_temp: f64, class_names: Vec<String>) -> Result<Self> {
        Self::build(embeddings, log_temp, class_names, false)
    }

    /// Builds a bank, L2-normalizing every row first.
    pub fn normalized(
        embeddings: Vec<Vec<f64>>,
        log_temp: f64,
        class_names: Vec<String>,
    ) -> Result<Self> {
        Self::build(embeddings, log_temp, class_names, true)
    }

    fn build(
        embeddings: Vec<Vec<f64>>,
        log_temp: f64,
        class_names: Vec<String>,
        renormalize: bool,
    ) -> Result<Self> {
        let num_classes = embeddings.len();
        if num_classes < 2 {
            return Err(Error::invalid("text bank needs at least 2 classes"));
        }
        let dim = embeddings[0].len();
        if dim < 2 {
            return Err(Error::invalid("embedding dimension must be at least 2"));
        }
        if class_names.len() != num_classes {
            return Err(Error::DimensionMismatch {
                expected: num_classes,
                got: class_names.len(),
            });
        }
        if !log_temp.is_finite() {
            return Err(Error::NonFinite("log_temp"));
        }
        let mut rows = Vec::with_capacity(num_classes * dim);
        for mut row in embeddings {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            if !all_finite(&row) {
                return Err(Error::NonFinite("text embedding"));
            }
            let n = norm(&row);
            if renormalize {
                if n == 0.0 {
                    return Err(Error::NotUnitNorm { norm: n });
                }
                row.iter_mut().for_each(|x| *x /= n);
            } else if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::NotUnitNorm { norm: n });
            }
            rows.extend_from_slice(&row);
        }
        Ok(Self {
            rows,
            num_classes,
            dim,
            log_temp,
            class_names,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn log_temp(&self) -> f64 {
        self.log_temp
    }

    /// `exp(log_temp)`, the logit scale.
    pub fn scale(&self) -> f64 {
        libm::exp(self.log_temp)
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.rows[class * self.dim..(class + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.rows.chunks_exact(self.dim)
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: len,
            });
        }
        Ok(())
    }
}

/// Trainable scale `w` and shift `b` of the normalization affine layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl AffineParams {
    /// Identity transform: `w = 1`, `b = 0`.
    pub fn pretrained(dim: usize) -> Self {
        Self {
            w: vec![1.0; dim],
            b: vec![0.0; dim],
        }
    }

    pub fn new(w: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if w.len() != b.len() {
            return Err(Error::DimensionMismatch {
                expected: w.len(),
                got: b.len(),
            });
        }
        if !all_finite(&w) || !all_finite(&b) {
            return Err(Error::NonFinite("affine parameters"));
        }
        Ok(Self { w, b })
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }
}

/// A normalized intermediate feature plus optional ground truth.
///
/// `domain_id` is carried for evaluation only; the adaptation path never reads it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub v: Vec<f64>,
    pub true_label: Option<usize>,
    pub domain_id: Option<String>,
}

impl Sample {
    /// Wraps a feature that must already be unit norm.
    pub fn new(v: Vec<f64>, true_label: Option<usize>, domain_id: Option<String>) -> Result<Self> {
        if !all_finite(&v) {
            return Err(Error::NonFinite("sample feature"));
        }
        let n = norm(&v);
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::NotUnitNorm { norm: n });
        }
        Ok(Self {
            v,
            true_label,
            domain_id,
        })
    }

    /// L2-normalizes `v` before wrapping it.
    pub fn normalized(
        mut v: Vec<f64>,
        true_label: Option<usize>,
        domain_id: Option<String>,
    ) -> Result<Self> {
        if !all_finite(&v) {
            return Err(Error::NonFinite("sample feature"));
        }
        let n = norm(&v);
        if n == 0.0 {
            return Err(Error::NotUnitNorm { norm: n });
        }
        v.iter_mut().for_each(|x| *x /= n);
        Ok(Self {
            v,
            true_label,
            domain_id,
        })
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub pseudo_label: usize,
    /// Shannon entropy of `probs`, in nats.
    pub entropy: f64,
}

/// Per-sample entropy gradient with respect to `w` and `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradRecord {
    pub g_w: Vec<f64>,
    pub g_b: Vec<f64>,
}

impl GradRecord {
    pub fn zeros(dim: usize) -> Self {
        Self {
            g_w: vec![0.0; dim],
            g_b: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.g_w.len()
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.g_w) && all_finite(&self.g_b)
    }
}

/// `z = v ⊙ w + b`.
pub fn forward(v: &[f64], params: &AffineParams) -> Result<Vec<f64>> {
    if v.len() != params.w.len() || v.len() != params.b.len() {
        return Err(Error::DimensionMismatch {
            expected: params.w.len(),
            got: v.len(),
        });
    }
    Ok(v.iter()
        .zip(&params.w)
        .zip(&params.b)
        .map(|((v, w), b)| v * w + b)
        .collect())
}

// Logits plus log-probabilities; the latter feed both entropy and its gradient
// without ever taking `ln` of an underflowed probability.
struct Head {
    logits: Vec<f64>,
    log_probs: Vec<f64>,
}

fn head(z: &[f64], bank: &TextBank) -> Result<Head> {
    bank.check_dim(z.len())?;
    let scale = bank.scale();
    let logits: Vec<f64> = bank.rows().map(|t| scale * dot(z, t)).collect();
    if !all_finite(&logits) {
        return Err(Error::NonFinite("logits"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| libm::exp(l - max)).sum();
    let lse = max + libm::log(sum);
    let log_probs = logits.iter().map(|l| l - lse).collect();
    Ok(Head { logits, log_probs })
}

fn prediction_from(head: Head) -> Prediction {
    let probs: Vec<f64> = head.log_probs.iter().map(|lp| libm::exp(*lp)).collect();
    let entropy = -probs
        .iter()
        .zip(&head.log_probs)
        .map(|(p, lp)| p * lp)
        .sum::<f64>();
    let pseudo_label = argmax(&probs);
    Prediction {
        logits: head.logits,
        probs,
        pseudo_label,
        entropy: entropy.max(0.0),
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Softmax prediction for an already-transformed embedding `z`.
pub fn predict(z: &[f64], bank: &TextBank) -> Result<Prediction> {
    Ok(prediction_from(head(z, bank)?))
}

/// Prediction and closed-form entropy gradient from one forward pass.
///
/// With `H = -Σ p_c ln p_c`, the logit gradient is `∂H/∂l_c = -p_c (ln p_c + H)`.
/// Back through the head: `∂H/∂z = exp(t) Σ_c (∂H/∂l_c) t_c`, and through the
/// affine layer `g_w = ∂H/∂z ⊙ v`, `g_b = ∂H/∂z`.
pub fn predict_and_grad(
    v: &[f64],
    params: &AffineParams,
    bank: &TextBank,
) -> Result<(Prediction, GradRecord)> {
    let z = forward(v, params)?;
    let head = head(&z, bank)?;
    let log_probs = head.log_probs.clone();
    let pred = prediction_from(head);
    let scale = bank.scale();
    let h = pred.entropy;
    let mut dz = vec![0.0; bank.dim()];
    for (c, t) in bank.rows().enumerate() {
        let dl = -pred.probs[c] * (log_probs[c] + h);
        for (acc, tc) in dz.iter_mut().zip(t) {
            *acc += dl * tc;
        }
    }
    dz.iter_mut().for_each(|x| *x *= scale);
    let g_w: Vec<f64> = dz.iter().zip(v).map(|(d, v)| d * v).collect();
    let grad = GradRecord { g_w, g_b: dz };
    if !grad.is_finite() {
        return Err(Error::NonFinite("entropy gradient"));
    }
    Ok((pred, grad))
}

/// Closed-form gradient of the prediction entropy at `params`.
pub fn sample_grad(v: &[f64], params: &AffineParams, bank: &TextBank) -> Result<GradRecord> {
    predict_and_grad(v, params, bank).map(|(_, g)| g)
}

/// Entropy of the prediction for feature `v` under `params`.
pub fn entropy_at(v: &[f64], params: &AffineParams, bank: &TextBank) -> Result<f64> {
    Ok(predict(&forward(v, params)?, bank)?.entropy)
}

/// Per-sample predictions and gradients for a batch, order preserved.
///
/// Each element is evaluated independently, so the result does not depend on
/// how a stream is partitioned into batches.
pub fn batch_grads(
    batch: &[Sample],
    params: &AffineParams,
    bank: &TextBank,
) -> Result<Vec<(Prediction, GradRecord)>> {
    if batch.is_empty() {
        return Err(Error::invalid("batch is empty"));
    }
    batch
        .iter()
        .enumerate()
        .map(|(i, s)| predict_and_grad(&s.v, params, bank).map_err(|e| e.at(i)))
        .collect()
}

/// Central finite differences of the entropy with respect to every `w[h]` and `b[h]`.
pub fn finite_diff_grad(
    v: &[f64],
    params: &AffineParams,
    bank: &TextBank,
    step: f64,
) -> Result<GradRecord> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let d = params.dim();
    let mut grad = GradRecord::zeros(d);
    let mut probe = params.clone();
    for h in 0..d {
        let orig = probe.w[h];
        probe.w[h] = orig + step;
        let up = entropy_at(v, &probe, bank)?;
        probe.w[h] = orig - step;
        let down = entropy_at(v, &probe, bank)?;
        probe.w[h] = orig;
        grad.g_w[h] = (up - down) / (2.0 * step);

        let orig = probe.b[h];
        probe.b[h] = orig + step;
        let up = entropy_at(v, &probe, bank)?;
        probe.b[h] = orig - step;
        let down = entropy_at(v, &probe, bank)?;
        probe.b[h] = orig;
        grad.g_b[h] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}
