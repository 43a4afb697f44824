//! Seeded synthetic mixed-domain embedding streams.
//!
//! Coordinates are split into blocks: the first `class_dims` carry the class
//! prototypes (and therefore the text embeddings), the next `domain_dims` carry
//! each domain's signature, and any remaining coordinates carry noise only.
//! A domain shifts every sample by `shift_scale · shift_vector`; part of that
//! vector leaks into the class block, which is what makes the domains hurt the
//! zero-shot classifier in different ways.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::model::{Sample, TextBank};
use crate::vecops::{norm, normalize_in_place};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: String,
    /// Unit-norm shift direction over all `dim` coordinates.
    pub shift_vector: Vec<f64>,
    pub shift_scale: f64,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamOrdering {
    /// Global shuffle: domains fully interleaved.
    Mixed,
    /// Domain after domain, shuffled within each domain.
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub num_classes: usize,
    pub num_domains: usize,
    pub dim: usize,
    pub samples_per_domain: usize,
    pub ordering: StreamOrdering,
    /// Leading coordinates that carry class signal.
    pub class_dims: usize,
    /// Coordinates after the class block that carry domain signatures.
    pub domain_dims: usize,
    /// Norm of every domain shift.
    pub shift_scale: f64,
    /// Fraction of each shift direction's squared norm in the class block.
    /// The class-block parts are centred across domains before scaling.
    pub class_shift: f64,
    /// Isotropic noise level of the first domain.
    pub noise_sigma: f64,
    /// The last domain's noise level is `noise_sigma · (1 + noise_spread)`,
    /// interpolated linearly in between.
    pub noise_spread: f64,
    pub log_temp: f64,
    pub seed: u64,
}

impl Default for StreamConfig {
    /// The reference benchmark: 4 classes, 4 domains, 16 dimensions, 4000 samples.
    fn default() -> Self {
        Self {
            num_classes: 4,
            num_domains: 4,
            dim: 16,
            samples_per_domain: 1000,
            ordering: StreamOrdering::Mixed,
            class_dims: 8,
            domain_dims: 6,
            shift_scale: 1.5,
            class_shift: 0.2,
            noise_sigma: 0.15,
            noise_spread: 0.5,
            log_temp: libm::log(30.0),
            seed: 0,
        }
    }
}

impl StreamConfig {
    /// Checks field constraints, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, why: &str| Err(Error::invalid(format!("{field}: {why}")));
        if self.num_classes < 2 {
            return fail("num_classes", "must be at least 2");
        }
        if self.num_domains == 0 {
            return fail("num_domains", "must be positive");
        }
        if self.dim < 2 {
            return fail("dim", "must be at least 2");
        }
        if self.class_dims == 0 {
            return fail("class_dims", "must be positive");
        }
        if self.class_dims + self.domain_dims > self.dim {
            return fail("class_dims", "class_dims + domain_dims must not exceed dim");
        }
        for (name, v) in [
            ("shift_scale", self.shift_scale),
            ("class_shift", self.class_shift),
            ("noise_sigma", self.noise_sigma),
            ("noise_spread", self.noise_spread),
        ] {
            if !v.is_finite() || v < 0.0 {
                return fail(name, "must be finite and non-negative");
            }
        }
        if self.class_shift > 1.0 {
            return fail("class_shift", "must be at most 1");
        }
        if self.domain_dims == 0 && self.class_shift < 1.0 && self.shift_scale > 0.0 {
            return fail("class_shift", "must be 1 when domain_dims is 0");
        }
        if !self.log_temp.is_finite() {
            return fail("log_temp", "must be finite");
        }
        Ok(())
    }

    pub fn domain_ids(&self) -> Vec<String> {
        (0..self.num_domains).map(|i| format!("domain{i}")).collect()
    }
}

fn gaussian_block(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    for x in out.iter_mut() {
        *x = rng.sample(StandardNormal);
    }
    normalize_in_place(out);
}

/// A generated stream with its text bank and the domains that produced it.
#[derive(Debug, Clone)]
pub struct Generated {
    pub samples: Vec<Sample>,
    pub bank: TextBank,
    pub domains: Vec<DomainSpec>,
}

/// Draws prototypes, domains, and samples from `cfg.seed`, then orders the
/// stream according to `cfg.ordering`.
///
/// Each sample is `normalize(prototype + shift_scale·shift + σ·noise)`. The
/// text bank rows are the normalized class prototypes.
pub fn generate(cfg: &StreamConfig) -> Result<Generated> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (d, cd, dd) = (cfg.dim, cfg.class_dims, cfg.domain_dims);

    let prototypes: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|_| {
            let mut p = vec![0.0; d];
            gaussian_block(&mut rng, &mut p[..cd]);
            p
        })
        .collect();

    let mut raw: Vec<Vec<f64>> = (0..cfg.num_domains)
        .map(|_| {
            let mut shift = vec![0.0; d];
            gaussian_block(&mut rng, &mut shift[..cd]);
            if dd > 0 {
                gaussian_block(&mut rng, &mut shift[cd..cd + dd]);
            }
            shift
        })
        .collect();
    // Class-block components are centred across domains so no shared bias remains.
    if cfg.num_domains > 1 {
        for h in 0..cd {
            let mean = raw.iter().map(|s| s[h]).sum::<f64>() / cfg.num_domains as f64;
            raw.iter_mut().for_each(|s| s[h] -= mean);
        }
    }

    let (a, b) = (libm::sqrt(cfg.class_shift), libm::sqrt(1.0 - cfg.class_shift));
    let domains: Vec<DomainSpec> = cfg
        .domain_ids()
        .into_iter()
        .zip(raw)
        .enumerate()
        .map(|(i, (domain_id, mut shift))| {
            let cn = norm(&shift[..cd]);
            let dn = norm(&shift[cd..cd + dd]);
            shift[..cd].iter_mut().for_each(|x| *x *= if cn > 0.0 { a / cn } else { 0.0 });
            shift[cd..cd + dd].iter_mut().for_each(|x| *x *= if dn > 0.0 { b / dn } else { 0.0 });
            let frac = if cfg.num_domains > 1 {
                i as f64 / (cfg.num_domains - 1) as f64
            } else {
                0.0
            };
            DomainSpec {
                domain_id,
                shift_vector: shift,
                shift_scale: cfg.shift_scale,
                noise_sigma: cfg.noise_sigma * (1.0 + cfg.noise_spread * frac),
            }
        })
        .collect();

    let mut samples = Vec::with_capacity(cfg.num_domains * cfg.samples_per_domain);
    for dom in &domains {
        for _ in 0..cfg.samples_per_domain {
            let label = rng.random_range(0..cfg.num_classes);
            let v: Vec<f64> = (0..d)
                .map(|h| {
                    let noise: f64 = rng.sample(StandardNormal);
                    prototypes[label][h]
                        + dom.shift_scale * dom.shift_vector[h]
                        + dom.noise_sigma * noise
                })
                .collect();
            samples.push(Sample::normalized(v, Some(label), Some(dom.domain_id.clone()))?);
        }
    }

    let bank = TextBank::normalized(
        prototypes,
        cfg.log_temp,
        (0..cfg.num_classes).map(|c| format!("class{c}")).collect(),
    )?;
    let samples = order_stream(samples, cfg.ordering, cfg.seed.wrapping_add(1));
    Ok(Generated {
        samples,
        bank,
        domains,
    })
}

/// Permutes a stream: `Mixed` shuffles globally; `Sequential` groups domains
/// contiguously (in order of first appearance) and shuffles within each group.
pub fn order_stream(samples: Vec<Sample>, ordering: StreamOrdering, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match ordering {
        StreamOrdering::Mixed => {
            let mut s = samples;
            s.shuffle(&mut rng);
            s
        }
        StreamOrdering::Sequential => {
            let mut order: Vec<Option<String>> = Vec::new();
            let mut groups: BTreeMap<Option<String>, Vec<Sample>> = BTreeMap::new();
            for s in samples {
                if !groups.contains_key(&s.domain_id) {
                    order.push(s.domain_id.clone());
                }
                groups.entry(s.domain_id.clone()).or_default().push(s);
            }
            let mut out = Vec::new();
            for key in order {
                let mut g = groups.remove(&key).unwrap_or_default();
                g.shuffle(&mut rng);
                out.extend(g);
            }
            out
        }
    }
}
