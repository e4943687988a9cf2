//! Training-image manifests, subsamplers, shot buckets, balanced
//! real/synthetic batch composition, and a two-domain toy dataset.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::SeedBuilder;
use crate::matrix::Matrix;
use crate::prompt::PromptKind;

pub const DEFAULT_HEAD_COUNT: usize = 1300;
pub const DEFAULT_SAMPLING_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DatasetError {
    #[error("manifest line {line}: {message}")]
    ManifestParse { line: usize, message: String },
    #[error("manifest line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("entry `{id}`: {reason}")]
    InvalidEntry { id: String, reason: &'static str },
    #[error("long-tail subsampling needs at least 2 classes, found {0}")]
    TooFewClasses(usize),
    #[error("invalid subsample parameters: {0}")]
    InvalidSubsample(&'static str),
    #[error("invalid batch plan: {0}")]
    InvalidBatchPlan(&'static str),
    #[error("synthetic pool is empty but {0} synthetic samples per batch were requested")]
    EmptySyntheticPool(usize),
    #[error("real pool has {available} entries, fewer than the {per_batch} needed per batch")]
    RealPoolTooSmall { available: usize, per_batch: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Real,
    Synthetic,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Real => "real",
            Domain::Synthetic => "synthetic",
        }
    }
}

/// How a synthetic image was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub prompt_text: String,
    pub kind: PromptKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<String>,
    pub seed: u64,
    pub guidance_scale: f64,
    pub steps: u32,
    #[serde(default)]
    pub replica: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub class_id: String,
    pub domain: Domain,
    pub format: String,
    pub checksum: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl ManifestEntry {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |reason| {
            Err(DatasetError::InvalidEntry {
                id: self.id.clone(),
                reason,
            })
        };
        if self.id.is_empty() {
            return bad("empty id");
        }
        match (self.domain, &self.provenance) {
            (Domain::Synthetic, None) => bad("synthetic entry without provenance"),
            (Domain::Real, Some(_)) => bad("real entry with provenance"),
            _ => Ok(()),
        }
    }
}

/// An ordered set of entries with unique ids.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self, DatasetError> {
        let mut ids = BTreeSet::new();
        for (i, e) in entries.iter().enumerate() {
            e.validate()?;
            if !ids.insert(e.id.as_str()) {
                return Err(DatasetError::DuplicateId {
                    line: i + 1,
                    id: e.id.clone(),
                });
            }
        }
        Ok(Manifest { entries })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<ManifestEntry> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.id.as_str()).collect()
    }

    pub fn contains_id(&self, id: &str) -> bool {
        self.entries.iter().any(|e| e.id == id)
    }

    /// Appends entries, rejecting ids already present.
    pub fn extend(&mut self, new: impl IntoIterator<Item = ManifestEntry>) -> Result<(), DatasetError> {
        let mut ids: BTreeSet<String> = self.entries.iter().map(|e| e.id.clone()).collect();
        for e in new {
            e.validate()?;
            if !ids.insert(e.id.clone()) {
                return Err(DatasetError::DuplicateId {
                    line: self.entries.len() + 1,
                    id: e.id,
                });
            }
            self.entries.push(e);
        }
        Ok(())
    }

    pub fn filter_domain(&self, domain: Domain) -> Manifest {
        Manifest {
            entries: self.entries.iter().filter(|e| e.domain == domain).cloned().collect(),
        }
    }

    pub fn class_counts(&self, domain: Domain) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for e in self.entries.iter().filter(|e| e.domain == domain) {
            *m.entry(e.class_id.clone()).or_insert(0) += 1;
        }
        m
    }

    /// JSONL, one entry per line, trailing newline after each line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            // Serializing plain data structs cannot fail.
            let line = serde_json::to_string(e).expect("manifest entry serializes");
            let _ = writeln!(out, "{line}");
        }
        out
    }

    /// Parses JSONL; blank lines are skipped, line numbers are 1-based.
    pub fn from_jsonl(text: &str) -> Result<Self, DatasetError> {
        let mut entries = Vec::new();
        let mut ids = BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(line).map_err(|err| DatasetError::ManifestParse {
                line: line_no,
                message: err.to_string(),
            })?;
            e.validate().map_err(|err| DatasetError::ManifestParse {
                line: line_no,
                message: err.to_string(),
            })?;
            if !ids.insert(e.id.clone()) {
                return Err(DatasetError::DuplicateId {
                    line: line_no,
                    id: e.id,
                });
            }
            entries.push(e);
        }
        Ok(Manifest { entries })
    }
}

fn by_class(entries: &[ManifestEntry]) -> BTreeMap<&str, Vec<usize>> {
    let mut m: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate().filter(|(_, e)| e.domain == Domain::Real) {
        m.entry(e.class_id.as_str()).or_default().push(i);
    }
    m
}

/// Picks `k` of `pool` uniformly without replacement, returned in pool order.
fn choose(pool: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, pool.len(), k.min(pool.len()))
        .into_iter()
        .map(|i| pool[i])
        .collect();
    picked.sort_unstable();
    picked
}

fn rebuild(manifest: &Manifest, keep: &BTreeSet<usize>) -> Manifest {
    Manifest {
        entries: manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(i, e)| e.domain == Domain::Synthetic || keep.contains(i))
            .map(|(_, e)| e.clone())
            .collect(),
    }
}

/// Keeps at most `n_per_class` real entries per class, chosen uniformly
/// under `seed`. Synthetic entries pass through; entry order is preserved.
pub fn subsample_low_data(manifest: &Manifest, n_per_class: usize, seed: u64) -> Result<Manifest, DatasetError> {
    if n_per_class == 0 {
        return Err(DatasetError::InvalidSubsample("n_per_class must be at least 1"));
    }
    let mut keep = BTreeSet::new();
    for (class, pool) in by_class(&manifest.entries) {
        let mut rng = SeedBuilder::new("low-data").u64(seed).str(class).rng();
        keep.extend(choose(&pool, n_per_class, &mut rng));
    }
    Ok(rebuild(manifest, &keep))
}

/// Target count for each rank `k = 1..=classes` of the exponential
/// imbalance profile `n1 * gamma^(-(k-1)/(classes-1))`, floored.
///
/// A relative slack of 1e-9 is added before flooring so that values which
/// are integers in exact arithmetic (e.g. `1300 / 100`) are not lost to
/// rounding in `pow`.
pub fn long_tail_counts(classes: usize, n1: usize, gamma: f64) -> Vec<usize> {
    (1..=classes)
        .map(|k| {
            let exponent = -((k - 1) as f64) / ((classes - 1).max(1) as f64);
            let v = n1 as f64 * libm::pow(gamma, exponent);
            libm::floor(v * (1.0 + 1e-9)) as usize
        })
        .collect()
}

/// Long-tail subsampling of the real entries.
///
/// Classes are assigned ranks by a seeded permutation; the class at rank
/// `k` keeps `long_tail_counts(..)[k-1]` entries, clamped to
/// `[1, available]`. Synthetic entries pass through.
pub fn subsample_long_tail(manifest: &Manifest, gamma: f64, n1: usize, seed: u64) -> Result<Manifest, DatasetError> {
    if !(gamma > 1.0 && gamma.is_finite()) {
        return Err(DatasetError::InvalidSubsample("gamma must be greater than 1"));
    }
    if n1 == 0 {
        return Err(DatasetError::InvalidSubsample("n1 must be at least 1"));
    }
    let groups = by_class(&manifest.entries);
    if groups.len() < 2 {
        return Err(DatasetError::TooFewClasses(groups.len()));
    }
    let counts = long_tail_counts(groups.len(), n1, gamma);
    let mut ranked: Vec<(&str, Vec<usize>)> = groups.into_iter().collect();
    ranked.shuffle(&mut SeedBuilder::new("long-tail-rank").u64(seed).rng());

    let mut keep = BTreeSet::new();
    for ((class, pool), target) in ranked.iter().zip(counts) {
        let k = target.clamp(1, pool.len());
        let mut rng = SeedBuilder::new("long-tail").u64(seed).str(class).rng();
        keep.extend(choose(pool, k, &mut rng));
    }
    Ok(rebuild(manifest, &keep))
}

/// Class ranks chosen by [`subsample_long_tail`] for `seed`, head first.
pub fn long_tail_rank_order(manifest: &Manifest, seed: u64) -> Vec<String> {
    let mut classes: Vec<&str> = by_class(&manifest.entries).into_keys().collect();
    classes.shuffle(&mut SeedBuilder::new("long-tail-rank").u64(seed).rng());
    classes.into_iter().map(ToString::to_string).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShotBucket {
    Many,
    Medium,
    Few,
}

impl ShotBucket {
    /// More than 800 is many-shot, fewer than 300 is few-shot; both
    /// boundaries belong to medium.
    pub fn from_count(count: usize) -> Self {
        if count > 800 {
            ShotBucket::Many
        } else if count >= 300 {
            ShotBucket::Medium
        } else {
            ShotBucket::Few
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ShotBucket::Many => "many",
            ShotBucket::Medium => "medium",
            ShotBucket::Few => "few",
        }
    }
}

pub fn shot_buckets<K: Ord + Clone>(real_counts: &BTreeMap<K, usize>) -> BTreeMap<K, ShotBucket> {
    real_counts
        .iter()
        .map(|(k, &n)| (k.clone(), ShotBucket::from_count(n)))
        .collect()
}

/// Per-batch split between real and synthetic samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    /// Fraction of each batch drawn from the synthetic pool.
    pub sampling_weight: f64,
    pub seed: u64,
}

impl BatchPlan {
    pub fn new(batch_size: usize, sampling_weight: f64, seed: u64) -> Result<Self, DatasetError> {
        let plan = BatchPlan {
            batch_size,
            sampling_weight,
            seed,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.batch_size == 0 {
            return Err(DatasetError::InvalidBatchPlan("batch_size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.sampling_weight) {
            return Err(DatasetError::InvalidBatchPlan("sampling_weight must lie in [0, 1]"));
        }
        Ok(())
    }

    /// `round_half_up(w * B)`.
    pub fn n_synthetic(&self) -> usize {
        let n = libm::floor(self.sampling_weight * self.batch_size as f64 + 0.5) as usize;
        n.min(self.batch_size)
    }

    pub fn n_real(&self) -> usize {
        self.batch_size - self.n_synthetic()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComposedBatch<'a, T> {
    pub epoch: usize,
    pub index: usize,
    pub real: Vec<&'a T>,
    pub synthetic: Vec<&'a T>,
}

impl<'a, T> ComposedBatch<'a, T> {
    pub fn len(&self) -> usize {
        self.real.len() + self.synthetic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Real entries first, then synthetic, each tagged with its domain.
    pub fn tagged(&self) -> impl Iterator<Item = (Domain, &'a T)> + '_ {
        self.real
            .iter()
            .map(|&e| (Domain::Real, e))
            .chain(self.synthetic.iter().map(|&e| (Domain::Synthetic, e)))
    }
}

/// Iterator over balanced batches; see [`compose_batches`].
pub struct BatchStream<'a, T> {
    real: &'a [T],
    synthetic: &'a [T],
    n_real: usize,
    n_syn: usize,
    seed: u64,
    epochs: usize,
    per_epoch: usize,
    epoch: usize,
    index: usize,
    real_order: Vec<usize>,
    syn_order: Vec<usize>,
    syn_cursor: usize,
    syn_rng: ChaCha8Rng,
}

impl<'a, T> BatchStream<'a, T> {
    pub fn batches_per_epoch(&self) -> usize {
        self.per_epoch
    }

    fn start_epoch(&mut self) {
        self.real_order = (0..self.real.len()).collect();
        self.real_order.shuffle(
            &mut SeedBuilder::new("batch-real")
                .u64(self.seed)
                .u64(self.epoch as u64)
                .rng(),
        );
    }

    fn next_synthetic(&mut self) -> &'a T {
        if self.syn_cursor == self.syn_order.len() {
            self.syn_order = (0..self.synthetic.len()).collect();
            self.syn_order.shuffle(&mut self.syn_rng);
            self.syn_cursor = 0;
        }
        let i = self.syn_order[self.syn_cursor];
        self.syn_cursor += 1;
        &self.synthetic[i]
    }
}

impl<'a, T> Iterator for BatchStream<'a, T> {
    type Item = ComposedBatch<'a, T>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.epoch >= self.epochs || self.per_epoch == 0 {
            return None;
        }
        if self.index == 0 {
            self.start_epoch();
        }
        let start = self.index * self.n_real;
        let real = self.real_order[start..start + self.n_real]
            .iter()
            .map(|&i| &self.real[i])
            .collect();
        let synthetic = (0..self.n_syn).map(|_| self.next_synthetic()).collect();
        let batch = ComposedBatch {
            epoch: self.epoch,
            index: self.index,
            real,
            synthetic,
        };
        self.index += 1;
        if self.index == self.per_epoch {
            self.index = 0;
            self.epoch += 1;
        }
        Some(batch)
    }
}

/// Streams `epochs` passes of batches holding exactly `plan.n_real()` real
/// and `plan.n_synthetic()` synthetic items.
///
/// Real items are drawn without replacement, reshuffled every epoch from
/// `(seed, epoch)`; an incomplete trailing batch is dropped. Synthetic items
/// cycle through an independently shuffled order that is reshuffled each
/// time it is exhausted. When a batch is entirely synthetic, an epoch is one
/// pass over the synthetic pool.
pub fn compose_batches<'a, T>(
    real: &'a [T],
    synthetic: &'a [T],
    plan: &BatchPlan,
    epochs: usize,
) -> Result<BatchStream<'a, T>, DatasetError> {
    plan.validate()?;
    let (n_real, n_syn) = (plan.n_real(), plan.n_synthetic());
    if n_syn > 0 && synthetic.is_empty() {
        return Err(DatasetError::EmptySyntheticPool(n_syn));
    }
    let per_epoch = if n_real > 0 {
        if real.len() < n_real {
            return Err(DatasetError::RealPoolTooSmall {
                available: real.len(),
                per_batch: n_real,
            });
        }
        real.len() / n_real
    } else {
        synthetic.len().div_ceil(n_syn)
    };
    Ok(BatchStream {
        real,
        synthetic,
        n_real,
        n_syn,
        seed: plan.seed,
        epochs,
        per_epoch,
        epoch: 0,
        index: 0,
        real_order: Vec::new(),
        syn_order: Vec::new(),
        syn_cursor: 0,
        syn_rng: SeedBuilder::new("batch-synthetic").u64(plan.seed).rng(),
    })
}

/// Feature rows with integer class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDomains {
    pub real: LabeledSet,
    pub synthetic: LabeledSet,
}

impl ToyDomains {
    /// `x1,x2,label,domain` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x1,x2,label,domain\n");
        for (set, domain) in [(&self.real, Domain::Real), (&self.synthetic, Domain::Synthetic)] {
            for (i, &label) in set.labels.iter().enumerate() {
                let r = set.features.row(i);
                let _ = writeln!(out, "{},{},{},{}", r[0], r[1], label, domain.as_str());
            }
        }
        out
    }
}

/// Direction along which synthetic class means are displaced.
pub const TOY_SHIFT_DIRECTION: [f64; 2] = [core::f64::consts::FRAC_1_SQRT_2, core::f64::consts::FRAC_1_SQRT_2];
pub const TOY_RADIUS: f64 = 4.0;

/// Two-domain 2-D Gaussian blobs.
///
/// Real: class `c` is `N(mu_c, I)` with `mu_c` evenly spaced on a circle of
/// radius 4. Synthetic: `scale * (mu_c + shift * d + z)` with `z ~ N(0, I)`
/// and `d` the fixed diagonal direction, so per-coordinate variance is
/// `scale^2`. Samples are grouped by class.
pub fn make_two_domain_toy(
    seed: u64,
    n_per_class_per_domain: usize,
    classes: usize,
    shift: f64,
    scale: f64,
) -> Result<ToyDomains, DatasetError> {
    if classes < 2 {
        return Err(DatasetError::TooFewClasses(classes));
    }
    if n_per_class_per_domain == 0 {
        return Err(DatasetError::InvalidSubsample("need at least one sample per class"));
    }
    let means: Vec<[f64; 2]> = (0..classes)
        .map(|c| {
            let t = 2.0 * core::f64::consts::PI * c as f64 / classes as f64;
            [TOY_RADIUS * libm::cos(t), TOY_RADIUS * libm::sin(t)]
        })
        .collect();
    let draw = |domain: Domain| {
        let mut rng = SeedBuilder::new("toy").u64(seed).str(domain.as_str()).rng();
        let n = classes * n_per_class_per_domain;
        let mut data = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        for (c, mu) in means.iter().enumerate() {
            for _ in 0..n_per_class_per_domain {
                for (d, m) in mu.iter().enumerate() {
                    let z: f64 = rng.sample(StandardNormal);
                    data.push(match domain {
                        Domain::Real => m + z,
                        Domain::Synthetic => scale * (m + shift * TOY_SHIFT_DIRECTION[d] + z),
                    });
                }
                labels.push(c);
            }
        }
        LabeledSet {
            features: Matrix::from_vec(n, 2, data),
            labels,
        }
    };
    Ok(ToyDomains {
        real: draw(Domain::Real),
        synthetic: draw(Domain::Synthetic),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::vec;
    use proptest::prelude::*;

    fn real(id: &str, class: &str) -> ManifestEntry {
        ManifestEntry {
            id: id.into(),
            path: format!("{id}.jpg"),
            class_id: class.into(),
            domain: Domain::Real,
            format: "jpeg".into(),
            checksum: "0".into(),
            provenance: None,
        }
    }

    fn synthetic(id: &str, class: &str) -> ManifestEntry {
        ManifestEntry {
            domain: Domain::Synthetic,
            format: "ppm".into(),
            provenance: Some(Provenance {
                prompt_text: "a photograph of x, y, z, w".into(),
                kind: PromptKind::Cd,
                style: None,
                seed: 9,
                guidance_scale: 2.0,
                steps: 50,
                replica: 0,
            }),
            ..real(id, class)
        }
    }

    fn manifest(classes: usize, per_class: usize) -> Manifest {
        let mut v = Vec::new();
        for c in 0..classes {
            for i in 0..per_class {
                v.push(real(&format!("c{c}/{i}"), &format!("c{c}")));
            }
        }
        Manifest::new(v).unwrap()
    }

    #[test]
    fn jsonl_roundtrip() {
        let mut sd = synthetic("s2", "b");
        if let Some(p) = sd.provenance.as_mut() {
            p.kind = PromptKind::Sd;
            p.style = Some("Oil painting".into());
            p.replica = 3;
        }
        let m = Manifest::new(vec![real("r1", "a"), synthetic("s1", "a"), sd]).unwrap();
        let text = m.to_jsonl();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(Manifest::from_jsonl(&text).unwrap(), m);
        assert!(!text.lines().next().unwrap().contains("provenance"));
    }

    #[test]
    fn jsonl_errors() {
        let m = Manifest::new(vec![real("a", "x"), real("b", "x"), real("c", "x"), real("d", "x")]).unwrap();
        let mut lines: Vec<String> = m.to_jsonl().lines().map(String::from).collect();
        lines.push(lines[0].clone());
        let text = lines.join("\n");
        assert_eq!(
            Manifest::from_jsonl(&text),
            Err(DatasetError::DuplicateId {
                line: 5,
                id: "a".into()
            })
        );
        assert!(matches!(
            Manifest::from_jsonl("{\"id\":1}\n"),
            Err(DatasetError::ManifestParse { line: 1, .. })
        ));
        assert_eq!(Manifest::from_jsonl("").unwrap(), Manifest::default());
        let mut bad = synthetic("s", "a");
        bad.provenance = None;
        let line = serde_json::to_string(&bad).unwrap();
        assert!(matches!(
            Manifest::from_jsonl(&line),
            Err(DatasetError::ManifestParse { line: 1, .. })
        ));
    }

    #[test]
    fn low_data_counts_and_clamp() {
        let m = manifest(3, 1000);
        let s = subsample_low_data(&m, 100, 1).unwrap();
        assert_eq!(s.len(), 300);
        assert!(s.class_counts(Domain::Real).values().all(|&n| n == 100));
        assert_eq!(s, subsample_low_data(&m, 100, 1).unwrap());
        assert_ne!(s, subsample_low_data(&m, 100, 2).unwrap());

        let small = manifest(1, 50);
        assert_eq!(subsample_low_data(&small, 100, 1).unwrap().len(), 50);
    }

    #[test]
    fn low_data_passes_synthetic_through() {
        let mut m = manifest(2, 10);
        m.extend([synthetic("s0", "c0"), synthetic("s1", "c1")]).unwrap();
        let s = subsample_low_data(&m, 3, 0).unwrap();
        assert_eq!(s.filter_domain(Domain::Synthetic).len(), 2);
        assert_eq!(s.filter_domain(Domain::Real).len(), 6);
    }

    fn formula(k: usize, classes: usize, n1: f64, gamma: f64) -> f64 {
        n1 * libm::pow(gamma, -((k - 1) as f64) / ((classes - 1) as f64))
    }

    #[test]
    fn long_tail_profile() {
        // Oracle: direct formula values 100, 31.62, 10, 3.16, 1 floored.
        let oracle: Vec<usize> = (1..=5)
            .map(|k| libm::floor(formula(k, 5, 100.0, 100.0) + 1e-9) as usize)
            .collect();
        assert_eq!(oracle, vec![100, 31, 10, 3, 1]);
        assert_eq!(long_tail_counts(5, 100, 100.0), oracle);
        assert_eq!(long_tail_counts(1000, 1300, 100.0)[999], 13);
        assert_eq!(long_tail_counts(1000, 1300, 100.0)[0], 1300);
    }

    #[test]
    fn long_tail_subsample() {
        let m = manifest(5, 120);
        let s = subsample_long_tail(&m, 100.0, 100, 7).unwrap();
        let counts = s.class_counts(Domain::Real);
        let ranked: Vec<usize> = long_tail_rank_order(&m, 7).iter().map(|c| counts[c]).collect();
        assert_eq!(ranked, vec![100, 31, 10, 3, 1]);
        assert_eq!(s, subsample_long_tail(&m, 100.0, 100, 7).unwrap());

        // Head count is clamped to availability.
        let s = subsample_long_tail(&manifest(3, 20), 10.0, 100, 0).unwrap();
        assert!(s.class_counts(Domain::Real).values().any(|&n| n == 20));

        assert_eq!(
            subsample_long_tail(&manifest(1, 20), 10.0, 100, 0),
            Err(DatasetError::TooFewClasses(1))
        );
        assert!(subsample_long_tail(&manifest(2, 20), 1.0, 100, 0).is_err());
    }

    #[test]
    fn buckets() {
        assert_eq!(ShotBucket::from_count(900), ShotBucket::Many);
        assert_eq!(ShotBucket::from_count(801), ShotBucket::Many);
        assert_eq!(ShotBucket::from_count(800), ShotBucket::Medium);
        assert_eq!(ShotBucket::from_count(300), ShotBucket::Medium);
        assert_eq!(ShotBucket::from_count(299), ShotBucket::Few);
        assert_eq!(ShotBucket::from_count(0), ShotBucket::Few);
        let counts: BTreeMap<&str, usize> = [("a", 1000), ("b", 5)].into_iter().collect();
        let b = shot_buckets(&counts);
        assert_eq!(b["a"], ShotBucket::Many);
        assert_eq!(b["b"], ShotBucket::Few);
    }

    #[test]
    fn batch_split_rule() {
        assert_eq!(BatchPlan::new(8, 0.5, 0).unwrap().n_synthetic(), 4);
        assert_eq!(BatchPlan::new(10, 0.6, 0).unwrap().n_synthetic(), 6);
        assert_eq!(BatchPlan::new(5, 0.5, 0).unwrap().n_synthetic(), 3);
        assert_eq!(BatchPlan::new(8, 0.0, 0).unwrap().n_synthetic(), 0);
        assert_eq!(BatchPlan::new(8, 1.0, 0).unwrap().n_real(), 0);
        assert!(BatchPlan::new(0, 0.5, 0).is_err());
        assert!(BatchPlan::new(8, 1.5, 0).is_err());
    }

    #[test]
    fn batches_are_exact_and_cover_real_pool() {
        let real: Vec<usize> = (0..40).collect();
        let syn: Vec<usize> = (100..107).collect();
        let plan = BatchPlan::new(8, 0.5, 3).unwrap();
        let batches: Vec<_> = compose_batches(&real, &syn, &plan, 2).unwrap().collect();
        assert_eq!(batches.len(), 20);
        for b in &batches {
            assert_eq!((b.real.len(), b.synthetic.len()), (4, 4));
        }
        let mut seen: Vec<usize> = batches
            .iter()
            .filter(|b| b.epoch == 0)
            .flat_map(|b| b.real.iter().map(|&&x| x))
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, real);
        let e0: Vec<_> = batches[..10].iter().map(|b| b.real.clone()).collect();
        let e1: Vec<_> = batches[10..].iter().map(|b| b.real.clone()).collect();
        assert_ne!(e0, e1);

        // Synthetic items cycle: every 7 draws cover the pool once.
        let syn_draws: Vec<usize> = batches.iter().flat_map(|b| b.synthetic.iter().map(|&&x| x)).collect();
        let mut first: Vec<_> = syn_draws[..7].to_vec();
        first.sort_unstable();
        assert_eq!(first, syn);

        let again: Vec<_> = compose_batches(&real, &syn, &plan, 2).unwrap().collect();
        assert_eq!(batches, again);
        let tags: Vec<Domain> = batches[0].tagged().map(|(d, _)| d).collect();
        assert_eq!(tags.iter().filter(|&&d| d == Domain::Synthetic).count(), 4);
    }

    #[test]
    fn zero_weight_and_empty_pool() {
        let real: Vec<usize> = (0..16).collect();
        let empty: Vec<usize> = Vec::new();
        let plan = BatchPlan::new(8, 0.0, 1).unwrap();
        let b: Vec<_> = compose_batches(&real, &empty, &plan, 1).unwrap().collect();
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|b| b.synthetic.is_empty() && b.real.len() == 8));
        let plan = BatchPlan::new(8, 0.5, 1).unwrap();
        assert_eq!(
            compose_batches(&real, &empty, &plan, 1).err(),
            Some(DatasetError::EmptySyntheticPool(4))
        );
        assert!(matches!(
            compose_batches(&real[..3], &real, &plan, 1).err(),
            Some(DatasetError::RealPoolTooSmall { .. })
        ));
        let all_syn = BatchPlan::new(4, 1.0, 1).unwrap();
        let b: Vec<_> = compose_batches(&empty, &real, &all_syn, 1).unwrap().collect();
        assert_eq!(b.len(), 4);
    }

    #[test]
    fn toy_shapes_and_identity() {
        let t = make_two_domain_toy(1, 100, 2, 0.0, 1.0).unwrap();
        assert_eq!((t.real.len(), t.synthetic.len()), (200, 200));
        assert_eq!(t.real.features.cols(), 2);
        assert_eq!(t, make_two_domain_toy(1, 100, 2, 0.0, 1.0).unwrap());
        assert!(t.to_csv().starts_with("x1,x2,label,domain\n"));
        assert_eq!(t.to_csv().lines().count(), 401);
        assert!(make_two_domain_toy(1, 10, 1, 0.0, 1.0).is_err());
    }

    fn class_var(set: &LabeledSet, class: usize, dim: usize) -> f64 {
        let xs: Vec<f64> = (0..set.len())
            .filter(|&i| set.labels[i] == class)
            .map(|i| set.features[(i, dim)])
            .collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
    }

    #[test]
    fn toy_scale_multiplies_variance() {
        // Sample-variance oracle: within-class variance ratio ~ scale^2 = 9.
        let t = make_two_domain_toy(5, 20_000, 2, 2.0, 3.0).unwrap();
        for c in 0..2 {
            for d in 0..2 {
                let ratio = class_var(&t.synthetic, c, d) / class_var(&t.real, c, d);
                assert!((ratio / 9.0 - 1.0).abs() < 0.15, "ratio {ratio}");
            }
        }
    }

    proptest! {
        #[test]
        fn long_tail_monotone(classes in 2usize..300, gamma in 1.01f64..500.0, n1 in 1usize..2000) {
            let counts = long_tail_counts(classes, n1, gamma);
            prop_assert_eq!(counts[0], n1);
            for w in counts.windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
            let last = libm::floor(n1 as f64 / gamma * (1.0 + 1e-9)) as usize;
            prop_assert_eq!(counts[classes - 1], last);
        }

        #[test]
        fn batches_always_exact(b in 1usize..32, w in 0.0f64..=1.0, seed in any::<u64>()) {
            let real: Vec<usize> = (0..64).collect();
            let syn: Vec<usize> = (0..9).collect();
            let plan = BatchPlan::new(b, w, seed).unwrap();
            for batch in compose_batches(&real, &syn, &plan, 2).unwrap() {
                prop_assert_eq!(batch.real.len(), plan.n_real());
                prop_assert_eq!(batch.synthetic.len(), plan.n_synthetic());
            }
        }
    }
}
