//! Episodic per-sample adaptation driven by cached gradients.
//!
//! For every incoming sample: compute its prediction and gradient at the
//! pretrained parameters, file it into memory under its zero-shot pseudo-label,
//! retrieve and weigh a support set, aggregate the support gradients, take one
//! optimizer step from the pretrained parameters, predict, and discard the
//! adapted parameters.

use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::memory::{ClassMemory, MemoryEntry, MemoryMode, SupportSet};
use crate::model::{
    batch_grads, forward, predict, predict_and_grad, AffineParams, GradRecord, Prediction, Sample,
    TextBank,
};
use crate::vecops::{all_finite, axpy};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    SignSgd,
    Gd,
}

impl Optimizer {
    pub fn step(self, params: &AffineParams, grad: &GradRecord, eta: f64) -> Result<AffineParams> {
        match self {
            Optimizer::SignSgd => signsgd_step(params, grad, eta),
            Optimizer::Gd => gd_step(params, grad, eta),
        }
    }
}

/// Hyperparameters and ablation switches of the adaptation engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RamenConfig {
    /// Queue capacity `K` per class.
    pub capacity: usize,
    /// Entries `k` retrieved per class.
    pub retrieve_k: usize,
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    /// Off: one shared queue of capacity `C·K` (no prediction balance).
    pub split_memory: bool,
    /// Off: uniform random selection instead of top-k, and `beta` must be 0.
    pub topk_selection: bool,
    pub entropy_weighting: bool,
    pub similarity_weighting: bool,
    pub seed: u64,
}

impl Default for RamenConfig {
    /// SignSGD with step 1e-2 and `beta` 5; queue sizes scaled for 4 classes.
    fn default() -> Self {
        Self {
            capacity: 128,
            retrieve_k: 56,
            beta: 5.0,
            lr: 1e-2,
            batch_size: 100,
            optimizer: Optimizer::SignSgd,
            split_memory: true,
            topk_selection: true,
            entropy_weighting: true,
            similarity_weighting: true,
            seed: 0,
        }
    }
}

impl RamenConfig {
    /// Settings of the reference synthetic benchmark. Differs from the default
    /// in step size and `beta` only.
    pub fn reference() -> Self {
        Self {
            lr: 0.06,
            beta: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(Error::invalid("capacity must be positive"));
        }
        if self.retrieve_k == 0 {
            return Err(Error::invalid("retrieve_k must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::invalid("beta must be finite and non-negative"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid("lr must be positive and finite"));
        }
        if !self.topk_selection && self.beta != 0.0 {
            return Err(Error::invalid("beta must be 0 when topk_selection is off"));
        }
        Ok(())
    }

    /// `β` as actually applied, after the similarity-weighting switch.
    pub fn effective_beta(&self) -> f64 {
        if self.similarity_weighting {
            self.beta
        } else {
            0.0
        }
    }

    pub fn memory_mode(&self) -> MemoryMode {
        if self.split_memory {
            MemoryMode::Split
        } else {
            MemoryMode::Unsplit
        }
    }
}

/// Per-sample trace of one adaptation episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptOutcome {
    /// Prediction with the adapted parameters.
    pub prediction: Prediction,
    pub zero_shot: Prediction,
    pub support_size: usize,
    /// Domain ids of the support entries that carry one (analysis only).
    pub support_domain_ids: Vec<Arc<str>>,
}

/// Where support gradients come from during adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientSource {
    /// Weighted sum of gradients cached at insertion time.
    Cache,
    /// Re-run forward and backward for every support entry. Reference engine.
    Recompute,
}

/// Weighted sum `Σ α̂_j g_j` of the cached gradients over normalized weights.
pub fn aggregate(support: &SupportSet<'_>) -> Result<GradRecord> {
    let first = support.items.first().ok_or(Error::EmptySupport)?;
    let mut acc = GradRecord::zeros(first.entry.grad.dim());
    for it in support.iter() {
        accumulate(&mut acc, it.weight, &it.entry.grad)?;
    }
    Ok(acc)
}

fn accumulate(acc: &mut GradRecord, weight: f64, g: &GradRecord) -> Result<()> {
    if g.dim() != acc.dim() {
        return Err(Error::DimensionMismatch {
            expected: acc.dim(),
            got: g.dim(),
        });
    }
    axpy(&mut acc.g_w, weight, &g.g_w);
    axpy(&mut acc.g_b, weight, &g.g_b);
    Ok(())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_step(params: &AffineParams, grad: &GradRecord, eta: f64) -> Result<()> {
    if !eta.is_finite() || eta < 0.0 {
        return Err(Error::invalid("learning rate must be finite and non-negative"));
    }
    if grad.dim() != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            got: grad.dim(),
        });
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    if !all_finite(&params.w) || !all_finite(&params.b) {
        return Err(Error::NonFinite("affine parameters"));
    }
    Ok(())
}

/// `w ← w - η sign(g_w)`, `b ← b - η sign(g_b)`, with `sign(0) = 0`.
pub fn signsgd_step(params: &AffineParams, grad: &GradRecord, eta: f64) -> Result<AffineParams> {
    check_step(params, grad, eta)?;
    Ok(AffineParams {
        w: params.w.iter().zip(&grad.g_w).map(|(w, g)| w - eta * sign(*g)).collect(),
        b: params.b.iter().zip(&grad.g_b).map(|(b, g)| b - eta * sign(*g)).collect(),
    })
}

/// Plain gradient descent: `w ← w - η g_w`, `b ← b - η g_b`.
pub fn gd_step(params: &AffineParams, grad: &GradRecord, eta: f64) -> Result<AffineParams> {
    check_step(params, grad, eta)?;
    Ok(AffineParams {
        w: params.w.iter().zip(&grad.g_w).map(|(w, g)| w - eta * g).collect(),
        b: params.b.iter().zip(&grad.g_b).map(|(b, g)| b - eta * g).collect(),
    })
}

/// Per-sample adaptation engine owning the class memory.
#[derive(Debug, Clone)]
pub struct Ramen {
    cfg: RamenConfig,
    bank: TextBank,
    memory: ClassMemory,
    pretrained: AffineParams,
    rng: ChaCha8Rng,
    source: GradientSource,
}

impl Ramen {
    pub fn new(cfg: RamenConfig, bank: TextBank) -> Result<Self> {
        Self::with_source(cfg, bank, GradientSource::Cache)
    }

    pub fn with_source(cfg: RamenConfig, bank: TextBank, source: GradientSource) -> Result<Self> {
        cfg.validate()?;
        let memory = ClassMemory::new(bank.num_classes(), cfg.capacity, cfg.memory_mode())?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            pretrained: AffineParams::pretrained(bank.dim()),
            cfg,
            bank,
            memory,
            source,
        })
    }

    pub fn config(&self) -> &RamenConfig {
        &self.cfg
    }

    pub fn bank(&self) -> &TextBank {
        &self.bank
    }

    pub fn memory(&self) -> &ClassMemory {
        &self.memory
    }

    pub fn pretrained(&self) -> &AffineParams {
        &self.pretrained
    }

    pub fn source(&self) -> GradientSource {
        self.source
    }

    /// Files a sample into memory under its zero-shot pseudo-label.
    pub fn observe(&mut self, sample: &Sample, pred: &Prediction, grad: GradRecord) -> Result<u64> {
        let entry = MemoryEntry::new(
            sample.v.clone(),
            grad,
            pred.entropy,
            sample.domain_id.as_deref().map(Arc::from),
        );
        self.memory.insert(entry, pred.pseudo_label)
    }

    /// Retrieves and weighs the support set for `query` under the configured
    /// selection rule and weighting switches. Empty memory gives an empty set.
    pub fn support_for(&mut self, query: &[f64]) -> Result<SupportSet<'_>> {
        select_support(&self.memory, &mut self.rng, &self.cfg, query)
    }

    /// One adaptation episode for `sample`, whose own entry must already be in memory.
    pub fn adapt_and_predict(&mut self, sample: &Sample) -> Result<AdaptOutcome> {
        let zero_shot = predict(&forward(&sample.v, &self.pretrained)?, &self.bank)?;
        self.adapt_inner(&sample.v, zero_shot)
    }

    fn adapt_inner(&mut self, v: &[f64], zero_shot: Prediction) -> Result<AdaptOutcome> {
        let Self {
            cfg,
            bank,
            memory,
            pretrained,
            rng,
            source,
        } = self;
        let mut support = select_support(memory, rng, cfg, v)?;
        if support.is_empty() {
            return Ok(AdaptOutcome {
                prediction: zero_shot.clone(),
                zero_shot,
                support_size: 0,
                support_domain_ids: Vec::new(),
            });
        }
        let grad = match source {
            GradientSource::Cache => aggregate(&support)?,
            GradientSource::Recompute => aggregate_recomputed(
                &mut support,
                v,
                cfg.effective_beta(),
                cfg.entropy_weighting,
                pretrained,
                bank,
            )?,
        };
        let adapted = cfg.optimizer.step(pretrained, &grad, cfg.lr)?;
        let prediction = predict(&forward(v, &adapted)?, bank)?;
        Ok(AdaptOutcome {
            prediction,
            zero_shot,
            support_size: support.len(),
            support_domain_ids: support
                .iter()
                .filter_map(|it| it.entry.domain_id.clone())
                .collect(),
        })
    }

    /// Grads for the whole batch, then inserts in arrival order, then one
    /// episode per sample. Later batch members are visible to earlier ones.
    pub fn process_batch(&mut self, batch: &[Sample]) -> Result<Vec<AdaptOutcome>> {
        if batch.len() > self.cfg.batch_size {
            return Err(Error::invalid("batch larger than configured batch_size"));
        }
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let graded = batch_grads(batch, &self.pretrained, &self.bank)?;
        let mut zero_shots = Vec::with_capacity(batch.len());
        for (i, (sample, (pred, grad))) in batch.iter().zip(graded).enumerate() {
            self.observe(sample, &pred, grad).map_err(|e| e.at(i))?;
            zero_shots.push(pred);
        }
        batch
            .iter()
            .zip(zero_shots)
            .enumerate()
            .map(|(i, (s, zs))| self.adapt_inner(&s.v, zs).map_err(|e| e.at(i)))
            .collect()
    }

    /// Processes a whole stream in consecutive batches of `batch_size`.
    pub fn run(&mut self, stream: &[Sample]) -> Result<Vec<AdaptOutcome>> {
        let mut out = Vec::with_capacity(stream.len());
        for chunk in stream.chunks(self.cfg.batch_size) {
            out.extend(self.process_batch(chunk)?);
        }
        Ok(out)
    }
}

fn select_support<'m>(
    memory: &'m ClassMemory,
    rng: &mut ChaCha8Rng,
    cfg: &RamenConfig,
    query: &[f64],
) -> Result<SupportSet<'m>> {
    let mut support = if cfg.topk_selection {
        memory.retrieve(query, cfg.retrieve_k)?
    } else {
        memory.retrieve_random(query, cfg.retrieve_k, rng)?
    };
    if !support.is_empty() {
        support.weigh(query, cfg.effective_beta(), cfg.entropy_weighting)?;
    }
    Ok(support)
}

// Reference route: ignores cached gradients and entropies, recomputes both at
// the pretrained parameters, reweighs, and sums in the same order as `aggregate`.
fn aggregate_recomputed(
    support: &mut SupportSet<'_>,
    query: &[f64],
    beta: f64,
    entropy_weighting: bool,
    pretrained: &AffineParams,
    bank: &TextBank,
) -> Result<GradRecord> {
    let mut grads = Vec::with_capacity(support.len());
    let mut entropies = Vec::with_capacity(support.len());
    for it in support.iter() {
        let (pred, grad) = predict_and_grad(&it.entry.z, pretrained, bank)?;
        entropies.push(pred.entropy);
        grads.push(grad);
    }
    support.weigh_with_entropies(query, beta, entropy_weighting, &entropies)?;
    let mut acc = GradRecord::zeros(bank.dim());
    for (it, g) in support.iter().zip(&grads) {
        accumulate(&mut acc, it.weight, g)?;
    }
    Ok(acc)
}

/// Tent-style online entropy minimization: persistent parameters, one step per
/// batch on the mean entropy gradient at the current parameters, then the
/// batch is predicted with the updated parameters.
pub fn entmin_baseline(
    stream: &[Sample],
    cfg: &RamenConfig,
    bank: &TextBank,
) -> Result<Vec<Prediction>> {
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let mut params = AffineParams::pretrained(bank.dim());
    let mut out = Vec::with_capacity(stream.len());
    for chunk in stream.chunks(cfg.batch_size) {
        let graded = batch_grads(chunk, &params, bank)?;
        let weight = 1.0 / chunk.len() as f64;
        let mut mean = GradRecord::zeros(bank.dim());
        for (_, g) in &graded {
            accumulate(&mut mean, weight, g)?;
        }
        params = cfg.optimizer.step(&params, &mean, cfg.lr)?;
        for s in chunk {
            out.push(predict(&forward(&s.v, &params)?, bank)?);
        }
    }
    Ok(out)
}

/// Predictions at the pretrained parameters, no state.
pub fn zero_shot_baseline(stream: &[Sample], bank: &TextBank) -> Result<Vec<Prediction>> {
    let params = AffineParams::pretrained(bank.dim());
    stream
        .iter()
        .enumerate()
        .map(|(i, s)| {
            forward(&s.v, &params)
                .and_then(|z| predict(&z, bank))
                .map_err(|e| e.at(i))
        })
        .collect()
}
