//! Multi-proxy classifiers and the residual balanced composition.
//!
//! Head classes own one weight vector; tail classes own `L` proxies whose
//! scores are combined by a softmax over the proxy scores:
//!
//! ```text
//! z_k = Σ_l π_kl (w_klᵀ f),   π_k = softmax_l(w_klᵀ f)
//! ```
//!
//! Equivalently, each tail class uses the sample-adaptive weight
//! `ŵ_k = Σ_l π_kl w_kl`. Biases are fixed at zero.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::math;
use crate::stats::{ClassStats, Partition};

#[derive(Debug, Clone, PartialEq)]
pub struct MultiProxyClassifier {
    dim: usize,
    proxies: usize,
    tail: Vec<bool>,
    counts: Vec<usize>,
    offsets: Vec<usize>,
    weights: Vec<f64>,
}

/// Per-sample forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Proxy scores `w_klᵀ f`, flat in proxy order.
    pub scores: Vec<f64>,
    /// Proxy weights `π_kl`, flat in proxy order (1 for single-proxy classes).
    pub pi: Vec<f64>,
    pub logits: Vec<f64>,
    /// Effective weights `ŵ_k`, one row per class.
    pub effective: Vec<Vec<f64>>,
}

impl MultiProxyClassifier {
    /// All-zero classifier with `proxies` weight vectors for every class
    /// flagged in `tail_mask` and one for the rest.
    pub fn zeros(dim: usize, tail_mask: &[bool], proxies: usize) -> Result<Self> {
        if dim == 0 || tail_mask.is_empty() {
            return Err(Error::InvalidConfig(
                "classifier needs positive dimension and class count".into(),
            ));
        }
        if proxies == 0 {
            return Err(Error::InvalidConfig("number of proxies must be at least 1".into()));
        }
        let counts: Vec<usize> = tail_mask.iter().map(|&t| if t { proxies } else { 1 }).collect();
        let mut offsets = Vec::with_capacity(counts.len());
        let mut total = 0;
        for &c in &counts {
            offsets.push(total);
            total += c;
        }
        Ok(Self {
            dim,
            proxies,
            tail: tail_mask.to_vec(),
            counts,
            offsets,
            weights: vec![0.0; total * dim],
        })
    }

    /// Zero-mean Gaussian weights with standard deviation `1/√D`, drawn
    /// independently for every proxy.
    pub fn init<R: Rng + ?Sized>(dim: usize, partition: &Partition, proxies: usize, rng: &mut R) -> Result<Self> {
        let k = partition.head.len() + partition.tail.len();
        let mut clf = Self::zeros(dim, &partition.is_tail_mask(k), proxies)?;
        let scale = 1.0 / (dim as f64).sqrt();
        for w in clf.weights.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *w = scale * z;
        }
        Ok(clf)
    }

    pub fn from_parts(dim: usize, tail_mask: &[bool], proxies: usize, weights: Vec<f64>) -> Result<Self> {
        let mut clf = Self::zeros(dim, tail_mask, proxies)?;
        if weights.len() != clf.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: clf.weights.len(),
                found: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidConfig("classifier weights must be finite".into()));
        }
        clf.weights = weights;
        Ok(clf)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    /// `L`, the proxy count used for tail classes.
    pub fn proxies(&self) -> usize {
        self.proxies
    }

    pub fn proxy_count(&self, k: usize) -> usize {
        self.counts[k]
    }

    pub fn proxy_offset(&self, k: usize) -> usize {
        self.offsets[k]
    }

    pub fn total_proxies(&self) -> usize {
        self.weights.len() / self.dim
    }

    pub fn tail_mask(&self) -> &[bool] {
        &self.tail
    }

    pub fn proxy(&self, k: usize, l: usize) -> &[f64] {
        let p = self.offsets[k] + l;
        &self.weights[p * self.dim..(p + 1) * self.dim]
    }

    /// Flat weights: classes in index order, proxies within a class in
    /// order, each proxy `D` contiguous values.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// Proxy-wise sum of two classifiers with identical layout.
    pub fn summed(&self, other: &Self) -> Self {
        assert_eq!(self.tail, other.tail, "classifier layouts differ");
        assert_eq!(self.proxies, other.proxies, "classifier layouts differ");
        assert_eq!(self.dim, other.dim, "classifier dimensions differ");
        let mut out = self.clone();
        for (a, b) in out.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        out
    }

    pub fn forward(&self, feature: &[f64]) -> Forward {
        let d = self.dim;
        let scores: Vec<f64> = self.weights.chunks_exact(d).map(|w| math::dot(w, feature)).collect();
        let mut pi = vec![1.0; scores.len()];
        let mut logits = Vec::with_capacity(self.counts.len());
        let mut effective = Vec::with_capacity(self.counts.len());
        for (k, &count) in self.counts.iter().enumerate() {
            let off = self.offsets[k];
            if count == 1 {
                logits.push(scores[off]);
                effective.push(self.proxy(k, 0).to_vec());
                continue;
            }
            let range = off..off + count;
            math::softmax_into(&scores[range.clone()], &mut pi[range.clone()]);
            logits.push(range.clone().map(|p| pi[p] * scores[p]).sum());
            let mut w_hat = vec![0.0; d];
            for (l, p) in range.enumerate() {
                for (acc, w) in w_hat.iter_mut().zip(self.proxy(k, l)) {
                    *acc += pi[p] * w;
                }
            }
            effective.push(w_hat);
        }
        Forward {
            scores,
            pi,
            logits,
            effective,
        }
    }

    /// Class logits and, per class, the proxy weights `π_k`.
    pub fn mp_logits(&self, feature: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let fwd = self.forward(feature);
        let pi = (0..self.num_classes())
            .map(|k| {
                let off = self.offsets[k];
                fwd.pi[off..off + self.counts[k]].to_vec()
            })
            .collect();
        (fwd.logits, pi)
    }

    /// `Ŵ` for this feature, one row `ŵ_k` per class.
    pub fn effective_weights(&self, feature: &[f64]) -> Vec<Vec<f64>> {
        self.forward(feature).effective
    }

    pub fn weight_norms(&self) -> Vec<f64> {
        self.weights.chunks_exact(self.dim).map(math::norm).collect()
    }
}

/// Uniform classifier, residual classifier and the frozen class statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct DcrModel {
    pub uniform: MultiProxyClassifier,
    pub residual: MultiProxyClassifier,
    pub stats: ClassStats,
}

impl DcrModel {
    pub fn new(uniform: MultiProxyClassifier, residual: MultiProxyClassifier, stats: ClassStats) -> Result<Self> {
        if uniform.tail != residual.tail || uniform.dim != residual.dim || uniform.proxies != residual.proxies {
            return Err(Error::InvalidConfig(
                "uniform and residual classifiers must share a layout".into(),
            ));
        }
        if uniform.dim != stats.dim() || uniform.num_classes() != stats.num_classes() {
            return Err(Error::DimensionMismatch {
                expected: stats.dim(),
                found: uniform.dim,
            });
        }
        Ok(Self {
            uniform,
            residual,
            stats,
        })
    }

    pub fn uniform_logits(&self, feature: &[f64]) -> Vec<f64> {
        self.uniform.forward(feature).logits
    }

    /// Residual balanced logits: proxy-wise sum of both classifiers, then the
    /// multi-proxy forward pass.
    pub fn rbmc_logits(&self, feature: &[f64]) -> Vec<f64> {
        self.balanced_classifier().forward(feature).logits
    }

    pub fn balanced_classifier(&self) -> MultiProxyClassifier {
        self.uniform.summed(&self.residual)
    }

    /// Test-time prediction: argmax of the balanced logits, no compensation.
    pub fn predict(&self, feature: &[f64]) -> usize {
        math::argmax(&self.rbmc_logits(feature))
    }
}
