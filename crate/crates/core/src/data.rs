//! Feature datasets, the synthetic long-tail generator, DCRF/CSV ingestion,
//! and the two samplers used by the training loop.
//!
//! Features are stored as `f32` (the on-disk precision) and widened to
//! `f64` when a [`Batch`] is materialized.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Stream};

/// Labeled feature vectors, row-major `N × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    features: Vec<f32>,
    labels: Vec<u32>,
    dim: usize,
    num_classes: usize,
    class_counts: Vec<usize>,
}

impl FeatureDataset {
    pub fn new(features: Vec<f32>, labels: Vec<u32>, dim: usize, num_classes: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDataset("feature dimension must be positive".into()));
        }
        if num_classes == 0 {
            return Err(Error::InvalidDataset("number of classes must be positive".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::InvalidDataset(format!(
                "{} feature values cannot form {} rows of dimension {}",
                features.len(),
                labels.len(),
                dim
            )));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset(format!(
                "non-finite feature value at row {}, column {}",
                pos / dim,
                pos % dim
            )));
        }
        let mut class_counts = vec![0usize; num_classes];
        for (row, &label) in labels.iter().enumerate() {
            let label = label as usize;
            if label >= num_classes {
                return Err(Error::LabelOutOfRange {
                    row,
                    label,
                    num_classes,
                });
            }
            class_counts[label] += 1;
        }
        Ok(Self {
            features,
            labels,
            dim,
            num_classes,
            class_counts,
        })
    }

    /// Builds a dataset from `f64` rows, rounding to the storage precision.
    pub fn from_rows(rows: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: bad.len(),
            });
        }
        let features = rows.iter().flatten().map(|&v| v as f32).collect();
        let labels = labels.iter().map(|&l| l as u32).collect();
        Self::new(features, labels, dim, num_classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    /// Row indices grouped by label.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = self.class_counts.iter().map(|&c| Vec::with_capacity(c)).collect();
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize].push(i);
        }
        out
    }

    pub fn batch(&self, indices: Vec<usize>) -> Batch {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in &indices {
            features.extend(self.row(i).iter().map(|&v| v as f64));
            labels.push(self.label(i));
        }
        Batch {
            indices,
            features,
            labels,
            dim: self.dim,
        }
    }
}

/// A materialized set of rows drawn from a [`FeatureDataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Parameters of the synthetic long-tailed Gaussian generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongTailSpec {
    pub num_classes: usize,
    pub samples_max: usize,
    pub imbalance_factor: f64,
    pub dim: usize,
    /// Per-dimension standard deviation of every class cluster. Class means
    /// are drawn from a standard normal, so this is relative to unit spacing.
    pub cluster_spread: f64,
    /// Fraction of the way each tail-class test mean moves toward its
    /// nearest head-class mean.
    pub drift_strength: f64,
    pub test_per_class: usize,
    /// Classes with more than this many training samples are head classes.
    pub head_threshold: usize,
    pub seed: u64,
}

impl Default for LongTailSpec {
    fn default() -> Self {
        Self {
            num_classes: 50,
            samples_max: 500,
            imbalance_factor: 100.0,
            dim: 32,
            cluster_spread: 0.5,
            drift_strength: 0.5,
            test_per_class: 50,
            head_threshold: 100,
            seed: 0,
        }
    }
}

impl LongTailSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidSpec(msg));
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if !self.imbalance_factor.is_finite() || self.imbalance_factor <= 1.0 {
            return fail(format!("imbalance factor must exceed 1, got {}", self.imbalance_factor));
        }
        if self.samples_max < self.num_classes {
            return fail(format!(
                "samples_max ({}) must be at least the number of classes ({})",
                self.samples_max, self.num_classes
            ));
        }
        if self.dim == 0 {
            return fail("dimension must be positive".into());
        }
        if !self.cluster_spread.is_finite() || self.cluster_spread < 0.0 {
            return fail(format!(
                "cluster spread must be finite and >= 0, got {}",
                self.cluster_spread
            ));
        }
        if !(0.0..=1.0).contains(&self.drift_strength) {
            return fail(format!(
                "drift strength must lie in [0, 1], got {}",
                self.drift_strength
            ));
        }
        if self.test_per_class == 0 {
            return fail("test_per_class must be positive".into());
        }
        Ok(())
    }

    /// `N_k = round(N_max · IF^(−k/(K−1)))`, at least 1.
    pub fn class_counts(&self) -> Vec<usize> {
        let k_minus_1 = (self.num_classes - 1) as f64;
        (0..self.num_classes)
            .map(|k| {
                let n = self.samples_max as f64 * self.imbalance_factor.powf(-(k as f64) / k_minus_1);
                (n.round() as usize).max(1)
            })
            .collect()
    }
}

/// Draws a long-tailed training set and a balanced, tail-drifted test set.
pub fn generate_longtail(spec: &LongTailSpec) -> Result<(FeatureDataset, FeatureDataset)> {
    spec.validate()?;
    let mut rng = seed::rng_for(spec.seed, Stream::Generator);
    let k = spec.num_classes;
    let d = spec.dim;
    let counts = spec.class_counts();

    let means: Vec<Vec<f64>> = (0..k).map(|_| gaussian_vec(&mut rng, d)).collect();
    let head: Vec<usize> = (0..k).filter(|&c| counts[c] > spec.head_threshold).collect();

    let test_means: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            if head.is_empty() || counts[c] > spec.head_threshold || spec.drift_strength == 0.0 {
                return means[c].clone();
            }
            let nearest = nearest_by_distance(&means[c], &head, &means);
            means[c]
                .iter()
                .zip(&means[nearest])
                .map(|(t, h)| t + spec.drift_strength * (h - t))
                .collect()
        })
        .collect();

    let train = sample_clusters(&mut rng, &means, &counts, spec.cluster_spread, k)?;
    let test_counts = vec![spec.test_per_class; k];
    let test = sample_clusters(&mut rng, &test_means, &test_counts, spec.cluster_spread, k)?;
    Ok((train, test))
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn nearest_by_distance(target: &[f64], candidates: &[usize], means: &[Vec<f64>]) -> usize {
    let mut best = candidates[0];
    let mut best_dist = f64::INFINITY;
    for &c in candidates {
        let dist = crate::math::squared_distance(target, &means[c]);
        if dist < best_dist {
            best = c;
            best_dist = dist;
        }
    }
    best
}

fn sample_clusters(
    rng: &mut ChaCha8Rng,
    means: &[Vec<f64>],
    counts: &[usize],
    spread: f64,
    num_classes: usize,
) -> Result<FeatureDataset> {
    let d = means[0].len();
    let total: usize = counts.iter().sum();
    let mut features = Vec::with_capacity(total * d);
    let mut labels = Vec::with_capacity(total);
    for (class, (mean, &count)) in means.iter().zip(counts).enumerate() {
        for _ in 0..count {
            for &m in mean {
                let z: f64 = StandardNormal.sample(rng);
                features.push((m + spread * z) as f32);
            }
            labels.push(class as u32);
        }
    }
    FeatureDataset::new(features, labels, d, num_classes)
}

// ---------------------------------------------------------------------------
// DCRF binary format
// ---------------------------------------------------------------------------

pub const DCRF_MAGIC: [u8; 4] = *b"DCRF";
pub const DCRF_VERSION: u32 = 1;

pub fn write_features(dataset: &FeatureDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_features(dataset))?;
    w.flush()?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureDataset> {
    let bytes = fs::read(path)?;
    decode_features(&bytes)
}

pub fn encode_features(dataset: &FeatureDataset) -> Vec<u8> {
    let n = dataset.len();
    let mut out = Vec::with_capacity(24 + n * 4 + dataset.features.len() * 4);
    out.extend_from_slice(&DCRF_MAGIC);
    out.extend_from_slice(&DCRF_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(dataset.dim as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.num_classes as u32).to_le_bytes());
    for &l in &dataset.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    for &v in &dataset.features {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureDataset> {
    let mut r = ByteReader::new(bytes);
    let magic = r.array::<4>("magic")?;
    if magic != DCRF_MAGIC {
        return Err(Error::BadMagic {
            expected: DCRF_MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")?;
    if version != DCRF_VERSION {
        return Err(Error::VersionMismatch {
            expected: DCRF_VERSION,
            found: version,
        });
    }
    let n = r.u64("row count")? as usize;
    let dim = r.u32("dimension")? as usize;
    let k = r.u32("class count")? as usize;
    let expected = n
        .checked_mul(4)
        .and_then(|l| n.checked_mul(dim).and_then(|f| f.checked_mul(4)).map(|f| l + f))
        .ok_or_else(|| Error::Malformed("header sizes overflow".into()))?;
    if r.remaining() < expected {
        return Err(Error::Truncated(format!(
            "header declares {n} rows of dimension {dim} ({expected} payload bytes) but only {} bytes follow",
            r.remaining()
        )));
    }
    let mut labels = Vec::with_capacity(n);
    for row in 0..n {
        let label = r.u32("labels")?;
        if label as usize >= k {
            return Err(Error::LabelOutOfRange {
                row,
                label: label as usize,
                num_classes: k,
            });
        }
        labels.push(label);
    }
    let mut features = Vec::with_capacity(n * dim);
    for _ in 0..n * dim {
        features.push(f32::from_le_bytes(r.array::<4>("features")?));
    }
    if r.remaining() != 0 {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after payload",
            r.remaining()
        )));
    }
    FeatureDataset::new(features, labels, dim, k)
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        if self.remaining() < N {
            return Err(Error::Truncated(format!("unexpected end of data while reading {what}")));
        }
        let mut out = [0u8; N];
        out.copy_from_slice(&self.bytes[self.pos..self.pos + N]);
        self.pos += N;
        Ok(out)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        self.array::<4>(what).map(u32::from_le_bytes)
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        self.array::<8>(what).map(u64::from_le_bytes)
    }

    pub(crate) fn f32(&mut self, what: &str) -> Result<f32> {
        self.array::<4>(what).map(f32::from_le_bytes)
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        self.array::<8>(what).map(f64::from_le_bytes)
    }
}

// ---------------------------------------------------------------------------
// CSV import
// ---------------------------------------------------------------------------

/// Reads `label,f0,...,f{D-1}` rows. When `num_classes` is `None` it is
/// inferred as the largest label plus one.
pub fn read_csv(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<FeatureDataset> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_error)?;
    let headers = reader.headers().map_err(csv_error)?.clone();
    if headers.get(0) != Some("label") {
        return Err(Error::Malformed("csv header must start with `label`".into()));
    }
    let dim = headers.len() - 1;
    for (i, h) in headers.iter().skip(1).enumerate() {
        if h != format!("f{i}") {
            return Err(Error::Malformed(format!(
                "csv column {} should be `f{i}`, found `{h}`",
                i + 1
            )));
        }
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(csv_error)?;
        if record.len() != dim + 1 {
            return Err(Error::Malformed(format!(
                "csv row {row} has {} fields, expected {}",
                record.len(),
                dim + 1
            )));
        }
        let label: u32 = record[0]
            .trim()
            .parse()
            .map_err(|_| Error::Malformed(format!("csv row {row}: bad label `{}`", &record[0])))?;
        labels.push(label);
        for field in record.iter().skip(1) {
            let v: f32 = field
                .trim()
                .parse()
                .map_err(|_| Error::Malformed(format!("csv row {row}: bad feature `{field}`")))?;
            features.push(v);
        }
    }
    let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |&m| m as usize + 1));
    FeatureDataset::new(features, labels, dim, k)
}

fn csv_error(e: csv::Error) -> Error {
    Error::Malformed(format!("csv: {e}"))
}

// ---------------------------------------------------------------------------
// Samplers
// ---------------------------------------------------------------------------

fn check_batch_size(dataset: &FeatureDataset, batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    if batch_size > dataset.len() {
        return Err(Error::InvalidConfig(format!(
            "batch size {batch_size} exceeds dataset size {}",
            dataset.len()
        )));
    }
    Ok(())
}

/// Uniform sampling: each epoch is a seeded permutation of all rows, cut
/// into consecutive batches. The last batch of an epoch may be short.
pub struct UniformSampler<'a> {
    dataset: &'a FeatureDataset,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> UniformSampler<'a> {
    pub fn new(dataset: &'a FeatureDataset, batch_size: usize, seed: u64) -> Result<Self> {
        Self::with_rng(dataset, batch_size, seed::rng_for(seed, Stream::UniformSampler))
    }

    pub fn with_rng(dataset: &'a FeatureDataset, batch_size: usize, rng: ChaCha8Rng) -> Result<Self> {
        check_batch_size(dataset, batch_size)?;
        let n = dataset.len();
        Ok(Self {
            dataset,
            batch_size,
            rng,
            order: (0..n).collect(),
            cursor: n,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.dataset.len().div_ceil(self.batch_size)
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let out = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        out
    }
}

impl Iterator for UniformSampler<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let idx = self.next_indices();
        Some(self.dataset.batch(idx))
    }
}

/// Class-balanced sampling: pick a class uniformly, then a row uniformly
/// within it, with replacement.
pub struct ClassBalancedSampler<'a> {
    dataset: &'a FeatureDataset,
    batch_size: usize,
    rng: ChaCha8Rng,
    per_class: Vec<Vec<usize>>,
}

impl<'a> ClassBalancedSampler<'a> {
    pub fn new(dataset: &'a FeatureDataset, batch_size: usize, seed: u64) -> Result<Self> {
        Self::with_rng(dataset, batch_size, seed::rng_for(seed, Stream::BalancedSampler))
    }

    pub fn with_rng(dataset: &'a FeatureDataset, batch_size: usize, rng: ChaCha8Rng) -> Result<Self> {
        check_batch_size(dataset, batch_size)?;
        let per_class = dataset.class_indices();
        if let Some(empty) = per_class.iter().position(Vec::is_empty) {
            return Err(Error::EmptyClass(empty));
        }
        Ok(Self {
            dataset,
            batch_size,
            rng,
            per_class,
        })
    }

    pub fn draw(&mut self) -> usize {
        let class = self.rng.random_range(0..self.per_class.len());
        let members = &self.per_class[class];
        members[self.rng.random_range(0..members.len())]
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        (0..self.batch_size).map(|_| self.draw()).collect()
    }
}

impl Iterator for ClassBalancedSampler<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let idx = self.next_indices();
        Some(self.dataset.batch(idx))
    }
}
