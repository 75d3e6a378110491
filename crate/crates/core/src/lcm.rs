//! Logit compensation.
//!
//! Augmenting a tail feature with Gaussian-mixture noise
//! `v ~ Σ_j s_tj N(δ_tj, β_t σ_t²)` and letting the number of augmented
//! copies grow without bound gives an expected cross-entropy that is
//! upper-bounded (Jensen) by an ordinary cross-entropy on adjusted logits:
//!
//! ```text
//! z̄_j[k] = z_j[k] + (β_t / 2) Σ_d (ŵ_k[d] − ŵ_t[d])² σ_t[d]²
//! ```
//!
//! [`mc_expected_loss`] estimates the un-bounded expectation by sampling so
//! the bound can be checked numerically.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::fcm;
use crate::math;
use crate::seed::{self, Stream};
use crate::stats::ClassStats;

/// Additive adjustment `(β/2) Σ_d (ŵ_k − ŵ_t)_d² σ_d²` for every class `k`.
/// `weights` holds one effective weight vector per class.
pub fn logit_adjustment(weights: &[Vec<f64>], t: usize, beta: f64, sigma: &[f64]) -> Vec<f64> {
    let wt = &weights[t];
    weights
        .iter()
        .map(|wk| {
            let quad: f64 = wk
                .iter()
                .zip(wt)
                .zip(sigma)
                .map(|((a, b), s)| (a - b) * (a - b) * s * s)
                .sum();
            0.5 * beta * quad
        })
        .collect()
}

/// Applies the adjustment with `β_t` and `σ_t` of class `t`. Head classes
/// are returned unchanged.
pub fn compensate_logits(logits: &[f64], weights: &[Vec<f64>], t: usize, stats: &ClassStats) -> Vec<f64> {
    match stats.tail_drift(t) {
        Some(entry) if entry.beta != 0.0 => {
            let adj = logit_adjustment(weights, t, entry.beta, &stats.std_devs[t]);
            logits.iter().zip(adj).map(|(z, a)| z + a).collect()
        }
        _ => logits.to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundleMode {
    pub raw: Vec<f64>,
    pub compensated: Vec<f64>,
    pub probability: f64,
}

/// Raw and compensated logits for every mode of one training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBundle {
    pub label: usize,
    pub modes: Vec<BundleMode>,
}

/// `Σ_j s_tj · CE(z̄_j, t)`.
pub fn lcm_loss(bundle: &LogitBundle) -> f64 {
    bundle
        .modes
        .iter()
        .map(|m| m.probability * math::cross_entropy(&m.compensated, bundle.label))
        .sum()
}

/// Builds the bundle of a feature under a fixed linear classifier whose
/// rows are `weights`.
pub fn linear_bundle(feature: &[f64], t: usize, weights: &[Vec<f64>], stats: &ClassStats) -> LogitBundle {
    let set = fcm::compensate(feature, t, stats);
    let modes = set
        .modes
        .into_iter()
        .map(|m| {
            let raw: Vec<f64> = weights.iter().map(|w| math::dot(w, &m.feature)).collect();
            let compensated = compensate_logits(&raw, weights, t, stats);
            BundleMode {
                raw,
                compensated,
                probability: m.probability,
            }
        })
        .collect();
    LogitBundle { label: t, modes }
}

/// Monte-Carlo estimate of the expected cross-entropy under explicit
/// mixture augmentation, with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    /// Draws actually taken; at least the requested count, since every
    /// mode gets [`MIN_DRAWS_PER_MODE`].
    pub samples: usize,
}

/// Every mode is sampled at least this often so its variance is estimable.
pub const MIN_DRAWS_PER_MODE: usize = 2;
const MC_SHARDS: usize = 16;

/// Running mean and sum of squared deviations.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    count: usize,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn merge(self, other: Self) -> Self {
        if other.count == 0 {
            return self;
        }
        if self.count == 0 {
            return other;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        Self {
            count: self.count + other.count,
            mean: self.mean + delta * other.count as f64 / n,
            m2: self.m2 + other.m2 + delta * delta * self.count as f64 * other.count as f64 / n,
        }
    }
}

/// Estimates `E_j E_ε CE(Ŵᵀ(f + δ_tj + √β_t σ_t ⊙ ε), t)` with `j ~ s_t`.
///
/// Sampling is stratified by mode: mode `j` receives
/// `max(MIN_DRAWS_PER_MODE, round(M s_tj))` draws and the per-mode means
/// are combined with the known weights `s_tj`. Plain mixture sampling
/// leaves modes with `s_tj ≪ 1/M` unsampled, which biases its standard
/// error low. Draws are split into fixed shards with independent
/// substreams, so the result does not depend on the thread count.
pub fn mc_expected_loss(
    feature: &[f64],
    t: usize,
    weights: &[Vec<f64>],
    stats: &ClassStats,
    samples: usize,
    seed: u64,
) -> McEstimate {
    assert!(samples >= 1, "at least one Monte-Carlo sample is required");
    let set = fcm::compensate(feature, t, stats);
    let (beta, sigma) = match stats.tail_drift(t) {
        Some(e) => (e.beta, stats.std_devs[t].clone()),
        None => (0.0, vec![0.0; feature.len()]),
    };
    let noise_scale: Vec<f64> = sigma.iter().map(|s| beta.sqrt() * s).collect();
    let draws: Vec<usize> = set
        .modes
        .iter()
        .map(|m| ((samples as f64 * m.probability).round() as usize).max(MIN_DRAWS_PER_MODE))
        .collect();

    let shards: Vec<Vec<Moments>> = (0..MC_SHARDS)
        .into_par_iter()
        .map(|shard| {
            let mut rng = seed::rng_for_indexed(seed, Stream::MonteCarlo, shard as u64);
            let mut augmented = vec![0.0; feature.len()];
            let mut logits = vec![0.0; weights.len()];
            set.modes
                .iter()
                .zip(&draws)
                .map(|(mode, &n)| {
                    let count = n / MC_SHARDS + usize::from(shard < n % MC_SHARDS);
                    let mut acc = Moments::default();
                    for _ in 0..count {
                        for ((a, base), s) in augmented.iter_mut().zip(&mode.feature).zip(&noise_scale) {
                            let eps: f64 = StandardNormal.sample(&mut rng);
                            *a = base + s * eps;
                        }
                        for (z, w) in logits.iter_mut().zip(weights) {
                            *z = math::dot(w, &augmented);
                        }
                        acc.push(math::cross_entropy(&logits, t));
                    }
                    acc
                })
                .collect()
        })
        .collect();

    let mut mean = 0.0;
    let mut variance = 0.0;
    for (j, mode) in set.modes.iter().enumerate() {
        let acc = shards.iter().fold(Moments::default(), |a, s| a.merge(s[j]));
        mean += mode.probability * acc.mean;
        let sample_var = acc.m2 / (acc.count - 1) as f64;
        variance += mode.probability * mode.probability * sample_var / acc.count as f64;
    }
    McEstimate {
        mean,
        std_error: variance.sqrt(),
        samples: draws.iter().sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{Partition, StatsConfig, TailDrift};

    fn stats_with(beta: f64, sigma: Vec<f64>, k: usize) -> ClassStats {
        let d = sigma.len();
        let mut drift = vec![None; k];
        drift[0] = Some(TailDrift {
            neighbors: vec![1],
            similarities: vec![0.5],
            drifts: vec![vec![0.25; d]],
            probabilities: vec![0.3, 0.7],
            alpha: 0.5,
            beta,
        });
        let mut std_devs = vec![vec![0.0; d]; k];
        std_devs[0] = sigma;
        ClassStats {
            config: StatsConfig::default(),
            class_counts: vec![5; k],
            prototypes: vec![vec![1.0; d]; k],
            std_devs,
            partition: Partition {
                head: (1..k).collect(),
                tail: vec![0],
            },
            drift,
        }
    }

    #[test]
    fn one_dimensional_adjustment() {
        let stats = stats_with(2.0, vec![0.5], 2);
        let w = vec![vec![1.0], vec![3.0]];
        let z = compensate_logits(&[0.1, 0.2], &w, 0, &stats);
        assert_eq!(z, vec![0.1, 0.2 + 1.0]);
    }

    #[test]
    fn zero_beta_or_sigma_is_identity() {
        let w = vec![vec![1.0, -2.0], vec![3.0, 0.5], vec![0.0, 1.0]];
        let z = vec![0.3, -0.7, 1.1];
        assert_eq!(compensate_logits(&z, &w, 0, &stats_with(0.0, vec![1.0, 2.0], 3)), z);
        assert_eq!(compensate_logits(&z, &w, 0, &stats_with(4.0, vec![0.0, 0.0], 3)), z);
        assert_eq!(compensate_logits(&z, &w, 1, &stats_with(4.0, vec![1.0, 1.0], 3)), z);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let bundle = LogitBundle {
            label: 2,
            modes: vec![BundleMode {
                raw: vec![0.5; 5],
                compensated: vec![0.5; 5],
                probability: 1.0,
            }],
        };
        assert!((lcm_loss(&bundle) - 5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn duplicate_modes_equal_single_mode() {
        let z = vec![0.3, -1.0, 2.0];
        let mode = |p| BundleMode {
            raw: z.clone(),
            compensated: z.clone(),
            probability: p,
        };
        let single = LogitBundle {
            label: 1,
            modes: vec![mode(1.0)],
        };
        let double = LogitBundle {
            label: 1,
            modes: vec![mode(0.25), mode(0.75)],
        };
        assert!((lcm_loss(&single) - lcm_loss(&double)).abs() < 1e-15);
    }

    #[test]
    fn mc_is_reproducible_for_one_sample() {
        let stats = stats_with(1.0, vec![0.3, 0.4], 2);
        let w = vec![vec![0.2, 0.1], vec![-0.3, 0.5]];
        let a = mc_expected_loss(&[1.0, 0.5], 0, &w, &stats, 1, 99);
        let b = mc_expected_loss(&[1.0, 0.5], 0, &w, &stats, 1, 99);
        assert_eq!(a, b);
        assert_eq!(a.samples, 2 * MIN_DRAWS_PER_MODE);
    }

    #[test]
    fn moments_merge_matches_single_pass() {
        let xs = [0.5, 2.0, -1.0, 3.5, 0.25];
        let mut all = Moments::default();
        xs.iter().for_each(|&x| all.push(x));
        let mut a = Moments::default();
        let mut b = Moments::default();
        xs[..2].iter().for_each(|&x| a.push(x));
        xs[2..].iter().for_each(|&x| b.push(x));
        let merged = a.merge(b);
        assert_eq!(merged.count, 5);
        assert!((merged.mean - all.mean).abs() < 1e-15);
        assert!((merged.m2 - all.m2).abs() < 1e-12);
    }
}
