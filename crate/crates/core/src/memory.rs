//! Class-split FIFO cache of embeddings and their pretrained-parameter
//! entropy gradients, with per-class top-k support retrieval.
//!
//! Entries are stored under the zero-shot pseudo-label of the sample. In
//! [`MemoryMode::Split`] every class has its own queue of capacity `K` and
//! retrieval takes the `k` most similar entries from each queue, so support
//! sets are prediction-balanced by construction. [`MemoryMode::Unsplit`] keeps
//! a single queue of capacity `C·K` and retrieves the top `C·k` overall.

use alloc::collections::VecDeque;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;

use crate::model::GradRecord;
use crate::vecops::dot;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    /// Embedding at pretrained parameters (equal to the normalized feature).
    pub z: Vec<f64>,
    pub grad: GradRecord,
    /// Prediction entropy at pretrained parameters.
    pub entropy: f64,
    /// Global insertion counter, assigned by [`ClassMemory::insert`].
    pub seq: u64,
    /// Zero-shot pseudo-label the entry was filed under.
    pub pseudo_class: usize,
    pub domain_id: Option<Arc<str>>,
    /// `||z||²`, recomputed on insert.
    sq_norm: f64,
}

impl MemoryEntry {
    pub fn new(z: Vec<f64>, grad: GradRecord, entropy: f64, domain_id: Option<Arc<str>>) -> Self {
        Self {
            sq_norm: dot(&z, &z),
            z,
            grad,
            entropy,
            seq: 0,
            pseudo_class: 0,
            domain_id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryMode {
    Split,
    Unsplit,
}

#[derive(Debug, Clone)]
pub struct ClassMemory {
    queues: Vec<VecDeque<MemoryEntry>>,
    num_classes: usize,
    capacity_per_class: usize,
    mode: MemoryMode,
    next_seq: u64,
}

impl ClassMemory {
    pub fn new(num_classes: usize, capacity_per_class: usize, mode: MemoryMode) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::invalid("memory needs at least one class"));
        }
        if capacity_per_class == 0 {
            return Err(Error::invalid("capacity per class must be positive"));
        }
        let n_queues = match mode {
            MemoryMode::Split => num_classes,
            MemoryMode::Unsplit => 1,
        };
        Ok(Self {
            queues: (0..n_queues).map(|_| VecDeque::new()).collect(),
            num_classes,
            capacity_per_class,
            mode,
            next_seq: 0,
        })
    }

    pub fn mode(&self) -> MemoryMode {
        self.mode
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn capacity_per_class(&self) -> usize {
        self.capacity_per_class
    }

    fn queue_capacity(&self) -> usize {
        match self.mode {
            MemoryMode::Split => self.capacity_per_class,
            MemoryMode::Unsplit => self.capacity_per_class * self.num_classes,
        }
    }

    /// Appends `entry` to the queue of `pseudo_label` (or the single queue in
    /// unsplit mode), evicting the oldest entry of that queue when full.
    /// Returns the sequence number assigned to the entry.
    pub fn insert(&mut self, mut entry: MemoryEntry, pseudo_label: usize) -> Result<u64> {
        if pseudo_label >= self.num_classes {
            return Err(Error::ClassOutOfRange {
                index: pseudo_label,
                classes: self.num_classes,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        entry.seq = seq;
        entry.pseudo_class = pseudo_label;
        entry.sq_norm = dot(&entry.z, &entry.z);
        let cap = self.queue_capacity();
        let q = match self.mode {
            MemoryMode::Split => &mut self.queues[pseudo_label],
            MemoryMode::Unsplit => &mut self.queues[0],
        };
        if q.len() == cap {
            q.pop_front();
        }
        q.push_back(entry);
        Ok(seq)
    }

    /// Queues in class order; a single queue in unsplit mode.
    pub fn queues(&self) -> &[VecDeque<MemoryEntry>] {
        &self.queues
    }

    pub fn len(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.queues.iter().all(VecDeque::is_empty)
    }

    /// All entries, queue by queue, oldest first within each queue.
    pub fn iter(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.queues.iter().flat_map(|q| q.iter())
    }

    fn per_queue_k(&self, k: usize) -> usize {
        match self.mode {
            MemoryMode::Split => k,
            MemoryMode::Unsplit => k * self.num_classes,
        }
    }

    /// Top-k retrieval by inner product with `query`.
    ///
    /// Split mode takes `min(k, len)` entries from every non-empty class queue;
    /// unsplit mode takes the top `C·k` of the single queue. Equal similarities
    /// are ordered by larger `seq` first. Within each queue the result is sorted
    /// from most to least similar. Weights are left unset (zero).
    pub fn retrieve(&self, query: &[f64], k: usize) -> Result<SupportSet<'_>> {
        if k == 0 {
            return Err(Error::invalid("k must be positive"));
        }
        let take = self.per_queue_k(k);
        let mut items = Vec::new();
        let mut scored: Vec<(f64, &MemoryEntry)> = Vec::new();
        for q in &self.queues {
            scored.clear();
            for e in q {
                if e.z.len() != query.len() {
                    return Err(Error::DimensionMismatch {
                        expected: e.z.len(),
                        got: query.len(),
                    });
                }
                scored.push((dot(query, &e.z), e));
            }
            scored.sort_unstable_by(rank_order);
            scored.truncate(take);
            items.extend(scored.iter().map(|&(similarity, entry)| SupportItem {
                entry,
                similarity,
                log_weight: 0.0,
                weight: 0.0,
            }));
        }
        Ok(SupportSet { items })
    }

    /// Uniform random selection without replacement, `min(k, len)` per class
    /// queue (or `C·k` from the single unsplit queue).
    pub fn retrieve_random<R: Rng + ?Sized>(
        &self,
        query: &[f64],
        k: usize,
        rng: &mut R,
    ) -> Result<SupportSet<'_>> {
        if k == 0 {
            return Err(Error::invalid("k must be positive"));
        }
        let take = self.per_queue_k(k);
        let mut items = Vec::new();
        for q in &self.queues {
            let n = take.min(q.len());
            if n == 0 {
                continue;
            }
            let mut picked = rand::seq::index::sample(rng, q.len(), n).into_vec();
            picked.sort_unstable();
            for i in picked {
                let entry = &q[i];
                if entry.z.len() != query.len() {
                    return Err(Error::DimensionMismatch {
                        expected: entry.z.len(),
                        got: query.len(),
                    });
                }
                items.push(SupportItem {
                    entry,
                    similarity: dot(query, &entry.z),
                    log_weight: 0.0,
                    weight: 0.0,
                });
            }
        }
        Ok(SupportSet { items })
    }
}

// Descending similarity, then most recent first.
fn rank_order(a: &(f64, &MemoryEntry), b: &(f64, &MemoryEntry)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then_with(|| b.1.seq.cmp(&a.1.seq))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportItem<'a> {
    pub entry: &'a MemoryEntry,
    /// Inner product with the query embedding.
    pub similarity: f64,
    /// `ln` of the unnormalized weight, kept so normalization never underflows.
    pub log_weight: f64,
    /// Normalized weight; all normalized weights sum to one.
    pub weight: f64,
}

impl SupportItem<'_> {
    /// `||q - z||` from `||q||²`, the cached `||z||²`, and the stored inner
    /// product. Exactly zero when `z` is bitwise equal to the query.
    pub fn distance(&self, query_sq_norm: f64) -> f64 {
        let d2 = query_sq_norm + self.entry.sq_norm - 2.0 * self.similarity;
        libm::sqrt(d2.max(0.0))
    }

    /// Unnormalized weight `exp(log_weight)`.
    pub fn raw_weight(&self) -> f64 {
        libm::exp(self.log_weight)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SupportSet<'a> {
    pub items: Vec<SupportItem<'a>>,
}

impl<'a> SupportSet<'a> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SupportItem<'a>> {
        self.items.iter()
    }

    /// Sets aggregation weights `α_j = exp(-H_j) · exp(-β ||q - z_j||)`.
    ///
    /// With `entropy_weighting` off the entropy factor is replaced by 1.
    /// Normalized weights are computed from the log weights after subtracting
    /// their maximum, so a large `β·dist` cannot underflow the whole set to zero.
    pub fn weigh(&mut self, query: &[f64], beta: f64, entropy_weighting: bool) -> Result<()> {
        self.set_weights(query, beta, |it, _| {
            if entropy_weighting {
                it.entry.entropy
            } else {
                0.0
            }
        })
    }

    /// Same as [`weigh`](Self::weigh) but with externally supplied entropies,
    /// one per item in order.
    pub fn weigh_with_entropies(
        &mut self,
        query: &[f64],
        beta: f64,
        entropy_weighting: bool,
        entropies: &[f64],
    ) -> Result<()> {
        if entropies.len() != self.items.len() {
            return Err(Error::DimensionMismatch {
                expected: self.items.len(),
                got: entropies.len(),
            });
        }
        self.set_weights(query, beta, |_, i| {
            if entropy_weighting {
                entropies[i]
            } else {
                0.0
            }
        })
    }

    fn set_weights(
        &mut self,
        query: &[f64],
        beta: f64,
        entropy_of: impl Fn(&SupportItem<'a>, usize) -> f64,
    ) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::EmptySupport);
        }
        if !(beta >= 0.0) || !beta.is_finite() {
            return Err(Error::invalid("beta must be finite and non-negative"));
        }
        let qq = dot(query, query);
        for i in 0..self.items.len() {
            let h = entropy_of(&self.items[i], i);
            let it = &mut self.items[i];
            let sim = if beta == 0.0 { 0.0 } else { beta * it.distance(qq) };
            it.log_weight = -h - sim;
        }
        self.normalize()
    }

    /// Multiplies every raw weight by `c > 0` and renormalizes.
    pub fn rescale(&mut self, c: f64) -> Result<()> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::invalid("scale must be positive and finite"));
        }
        let ln_c = libm::log(c);
        for it in &mut self.items {
            it.log_weight += ln_c;
        }
        self.normalize()
    }

    fn normalize(&mut self) -> Result<()> {
        let max = self
            .items
            .iter()
            .map(|it| it.log_weight)
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::DegenerateWeights);
        }
        let mut total = 0.0;
        for it in &mut self.items {
            it.weight = libm::exp(it.log_weight - max);
            total += it.weight;
        }
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::DegenerateWeights);
        }
        for it in &mut self.items {
            it.weight /= total;
        }
        Ok(())
    }

    /// Count of retrieved entries per pseudo-class.
    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = alloc::vec![0; num_classes];
        for it in &self.items {
            counts[it.entry.pseudo_class] += 1;
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn entry(z: Vec<f64>, h: f64) -> MemoryEntry {
        let d = z.len();
        MemoryEntry::new(z, GradRecord::zeros(d), h, None)
    }

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        v
    }

    #[test]
    fn fifo_keeps_most_recent() {
        let mut m = ClassMemory::new(2, 2, MemoryMode::Split).unwrap();
        for i in 0..3 {
            m.insert(entry(vec![1.0, 0.0], i as f64), 0).unwrap();
        }
        let seqs: Vec<u64> = m.queues()[0].iter().map(|e| e.seq).collect();
        assert_eq!(seqs, vec![1, 2]);
        assert_eq!(m.queues()[1].len(), 0);
    }

    #[test]
    fn insert_out_of_range() {
        let mut m = ClassMemory::new(2, 2, MemoryMode::Split).unwrap();
        assert_eq!(
            m.insert(entry(vec![1.0, 0.0], 0.0), 2).unwrap_err(),
            Error::ClassOutOfRange { index: 2, classes: 2 }
        );
    }

    #[test]
    fn interleaved_inserts_replay() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (c, cap) = (3, 4);
        let mut m = ClassMemory::new(c, cap, MemoryMode::Split).unwrap();
        let mut replay: Vec<Vec<u64>> = vec![Vec::new(); c];
        for _ in 0..50 {
            let label = rng.random_range(0..c);
            let seq = m.insert(entry(vec![1.0, 0.0], 0.0), label).unwrap();
            replay[label].push(seq);
        }
        for (cls, q) in m.queues().iter().enumerate() {
            let got: Vec<u64> = q.iter().map(|e| e.seq).collect();
            let want: Vec<u64> = replay[cls].iter().rev().take(cap).rev().copied().collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn unsplit_mode_single_queue() {
        let mut m = ClassMemory::new(3, 2, MemoryMode::Unsplit).unwrap();
        for i in 0..10 {
            m.insert(entry(vec![1.0, 0.0], 0.0), i % 3).unwrap();
        }
        assert_eq!(m.queues().len(), 1);
        assert_eq!(m.len(), 6);
        assert_eq!(m.queues()[0].front().unwrap().seq, 4);
    }

    #[test]
    fn retrieve_saturates_to_whole_memory() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = ClassMemory::new(3, 5, MemoryMode::Split).unwrap();
        for i in 0..9 {
            m.insert(entry(unit(&mut rng, 4), 0.1), i % 3).unwrap();
        }
        let s = m.retrieve(&unit(&mut rng, 4), 10).unwrap();
        assert_eq!(s.len(), 9);
    }

    #[test]
    fn query_equal_to_entry_ranks_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = ClassMemory::new(2, 10, MemoryMode::Split).unwrap();
        let mut target = Vec::new();
        for i in 0..10 {
            let z = unit(&mut rng, 6);
            if i == 6 {
                target = z.clone();
            }
            m.insert(entry(z, 0.0), i % 2).unwrap();
        }
        let s = m.retrieve(&target, 3).unwrap();
        let first_of_class0 = s.iter().find(|it| it.entry.pseudo_class == 0).unwrap();
        assert_eq!(first_of_class0.entry.seq, 6);
    }

    #[test]
    fn ties_prefer_recent() {
        let mut m = ClassMemory::new(1, 5, MemoryMode::Split).unwrap();
        for _ in 0..4 {
            m.insert(entry(vec![0.0, 1.0], 0.0), 0).unwrap();
        }
        let s = m.retrieve(&[0.0, 1.0], 2).unwrap();
        let seqs: Vec<u64> = s.iter().map(|it| it.entry.seq).collect();
        assert_eq!(seqs, vec![3, 2]);
    }

    #[test]
    fn retrieve_rejects_zero_k_and_handles_empty() {
        let m = ClassMemory::new(2, 3, MemoryMode::Split).unwrap();
        assert!(m.retrieve(&[1.0, 0.0], 0).is_err());
        assert!(m.retrieve(&[1.0, 0.0], 2).unwrap().is_empty());
    }

    #[test]
    fn weigh_trivial_cases() {
        let mut m = ClassMemory::new(2, 3, MemoryMode::Split).unwrap();
        m.insert(entry(vec![1.0, 0.0], 0.0), 0).unwrap();
        m.insert(entry(vec![0.0, 1.0], 0.0), 1).unwrap();
        m.insert(entry(vec![0.6, 0.8], 0.0), 1).unwrap();
        let mut s = m.retrieve(&[1.0, 0.0], 3).unwrap();
        s.weigh(&[1.0, 0.0], 0.0, true).unwrap();
        for it in s.iter() {
            assert_eq!(it.raw_weight(), 1.0);
            assert!((it.weight - 1.0 / 3.0).abs() < 1e-15);
        }

        let mut m = ClassMemory::new(1, 3, MemoryMode::Split).unwrap();
        m.insert(entry(vec![1.0, 0.0], 0.7), 0).unwrap();
        let mut s = m.retrieve(&[1.0, 0.0], 1).unwrap();
        s.weigh(&[1.0, 0.0], 5.0, true).unwrap();
        assert!((s.items[0].raw_weight() - (-0.7f64).exp()).abs() < 1e-16);
        assert_eq!(s.items[0].weight, 1.0);
    }

    #[test]
    fn weigh_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 12;
        let mut m = ClassMemory::new(4, 20, MemoryMode::Split).unwrap();
        for i in 0..60 {
            m.insert(entry(unit(&mut rng, d), rng.random_range(0.0..1.3)), i % 4)
                .unwrap();
        }
        let q = unit(&mut rng, d);
        let mut s = m.retrieve(&q, 5).unwrap();
        let beta = 5.0;
        s.weigh(&q, beta, true).unwrap();
        let raws: Vec<f64> = s
            .iter()
            .map(|it| {
                let dd: f64 = q
                    .iter()
                    .zip(&it.entry.z)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                (-it.entry.entropy).exp() * (-beta * dd).exp()
            })
            .collect();
        let total: f64 = raws.iter().sum();
        for (it, raw) in s.iter().zip(&raws) {
            assert!((it.raw_weight() - raw).abs() <= 1e-15);
            assert!((it.weight - raw / total).abs() <= 1e-15);
        }
        let sum: f64 = s.iter().map(|it| it.weight).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weigh_survives_large_beta() {
        let mut m = ClassMemory::new(1, 3, MemoryMode::Split).unwrap();
        m.insert(entry(vec![0.0, 1.0], 0.5), 0).unwrap();
        m.insert(entry(vec![-1.0, 0.0], 0.5), 0).unwrap();
        let mut s = m.retrieve(&[1.0, 0.0], 2).unwrap();
        s.weigh(&[1.0, 0.0], 2000.0, true).unwrap();
        let sum: f64 = s.iter().map(|it| it.weight).sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(s.items[0].weight > 0.999);
    }

    #[test]
    fn weigh_empty_is_error() {
        let mut s = SupportSet::default();
        assert_eq!(s.weigh(&[1.0, 0.0], 1.0, true), Err(Error::EmptySupport));
    }

    #[test]
    fn random_selection_balanced_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = ClassMemory::new(3, 10, MemoryMode::Split).unwrap();
        for i in 0..30 {
            m.insert(entry(unit(&mut rng, 4), 0.0), i % 3).unwrap();
        }
        let q = unit(&mut rng, 4);
        let a = m.retrieve_random(&q, 4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = m.retrieve_random(&q, 4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(3), vec![4, 4, 4]);
        let mut seqs: Vec<u64> = a.iter().map(|it| it.entry.seq).collect();
        seqs.dedup();
        assert_eq!(seqs.len(), 12);
    }
}
