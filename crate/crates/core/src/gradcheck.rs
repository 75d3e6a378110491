//! Central finite-difference check of the analytic training gradients on
//! small random instances.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::classifier::{DcrModel, MultiProxyClassifier};
use crate::data::{Batch, FeatureDataset};
use crate::error::Result;
use crate::seed::{self, Stream};
use crate::stats::{self, StatsConfig};
use crate::training::{self, TrainConfig};

/// Denominator floor of the relative error, per unit of loss. Central
/// differences lose about `ε·|ℒ|/h` to cancellation, so components smaller
/// than `RELATIVE_FLOOR · max(1, |ℒ|)` are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckConfig {
    pub dim: usize,
    pub proxies: usize,
    pub alpha0: f64,
    pub beta0: f64,
    pub phi: f64,
    pub tau: f64,
    pub neighbors: usize,
    /// Multiplier on the `1/√D` weight scale; large values push logits
    /// into the saturated regime.
    pub weight_scale: f64,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self::from_train(&TrainConfig::default())
    }
}

impl GradCheckConfig {
    pub fn from_train(cfg: &TrainConfig) -> Self {
        Self {
            dim: 8,
            proxies: cfg.proxies,
            alpha0: cfg.alpha0,
            beta0: cfg.beta0,
            phi: cfg.phi,
            tau: cfg.tau,
            neighbors: cfg.neighbors,
            weight_scale: 1.0,
            step: 1e-4,
            tolerance: 1e-4,
            seed: cfg.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrialResult {
    pub trial: usize,
    pub parameters: usize,
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub config: GradCheckConfig,
    pub trials: Vec<TrialResult>,
    pub max_relative_error: f64,
    pub pass: bool,
}

/// Class counts of the random instances: two head classes and four tail
/// classes of decreasing size at head threshold 20.
const COUNTS: [usize; 6] = [30, 25, 12, 8, 4, 2];
const HEAD_THRESHOLD: usize = 20;

/// A random model plus one uniform and one class-balanced batch.
pub struct Instance {
    pub model: DcrModel,
    pub batch_uniform: Batch,
    pub batch_balanced: Batch,
}

pub fn random_instance(cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let d = cfg.dim;
    let k = COUNTS.len();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (c, &n) in COUNTS.iter().enumerate() {
        let mean: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..n {
            let row: Vec<f64> = mean
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + 0.7 * z
                })
                .collect();
            rows.push(row);
            labels.push(c);
        }
    }
    let train = FeatureDataset::from_rows(&rows, &labels, k)?;
    let stats = stats::build_class_stats(
        &train,
        &StatsConfig {
            neighbors: cfg.neighbors,
            tau: cfg.tau,
            alpha0: cfg.alpha0,
            beta0: cfg.beta0,
            head_threshold: HEAD_THRESHOLD,
        },
    )?;
    let init = |rng: &mut ChaCha8Rng| -> Result<MultiProxyClassifier> {
        let mut clf = MultiProxyClassifier::init(d, &stats.partition, cfg.proxies, rng)?;
        clf.weights_mut().iter_mut().for_each(|w| *w *= cfg.weight_scale);
        Ok(clf)
    };
    let uniform = init(rng)?;
    let residual = init(rng)?;
    let model = DcrModel::new(uniform, residual, stats)?;

    let per_class = train.class_indices();
    let batch_uniform = train.batch((0..6).map(|_| rng.random_range(0..train.len())).collect());
    // Over-represent the rarest classes so every tail path is exercised.
    let batch_balanced = train.batch(
        (0..4)
            .map(|i| {
                let class = [5, 4, 3, rng.random_range(0..k)][i];
                per_class[class][rng.random_range(0..per_class[class].len())]
            })
            .collect(),
    );
    Ok(Instance {
        model,
        batch_uniform,
        batch_balanced,
    })
}

fn loss_at(model: &DcrModel, inst: &Instance, phi: f64) -> f64 {
    training::loss_and_grad(model, &inst.batch_uniform, &inst.batch_balanced, phi)
        .expect("non-empty batches")
        .loss
}

/// `|a − n| / max(|a|, |n|, RELATIVE_FLOOR · max(1, |ℒ|))`.
pub fn relative_error(analytic: f64, numeric: f64, loss: f64) -> f64 {
    let floor = RELATIVE_FLOOR * loss.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares every gradient component of one instance against central
/// differences with step `cfg.step`.
pub fn check_instance(inst: &Instance, cfg: &GradCheckConfig, trial: usize) -> TrialResult {
    let lg = training::loss_and_grad(&inst.model, &inst.batch_uniform, &inst.batch_balanced, cfg.phi)
        .expect("non-empty batches");
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut model = inst.model.clone();
    let h = cfg.step;
    let mut count = 0;
    for which in 0..2 {
        let analytic = if which == 0 {
            &lg.grad_uniform
        } else {
            &lg.grad_residual
        };
        for (i, &a) in analytic.iter().enumerate() {
            let original = weights(&model, which)[i];
            weights_mut(&mut model, which)[i] = original + h;
            let plus = loss_at(&model, inst, cfg.phi);
            weights_mut(&mut model, which)[i] = original - h;
            let minus = loss_at(&model, inst, cfg.phi);
            weights_mut(&mut model, which)[i] = original;
            let numeric = (plus - minus) / (2.0 * h);
            max_rel = max_rel.max(relative_error(a, numeric, lg.loss));
            max_abs = max_abs.max((a - numeric).abs());
            count += 1;
        }
    }
    TrialResult {
        trial,
        parameters: count,
        max_relative_error: max_rel,
        max_absolute_error: max_abs,
        loss: lg.loss,
    }
}

fn weights(model: &DcrModel, which: usize) -> &[f64] {
    if which == 0 {
        model.uniform.weights()
    } else {
        model.residual.weights()
    }
}

fn weights_mut(model: &mut DcrModel, which: usize) -> &mut [f64] {
    if which == 0 {
        model.uniform.weights_mut()
    } else {
        model.residual.weights_mut()
    }
}

pub fn gradcheck(cfg: &GradCheckConfig, trials: usize) -> Result<GradCheckReport> {
    let mut results = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut rng = seed::rng_for_indexed(cfg.seed, Stream::GradCheck, trial as u64);
        let inst = random_instance(cfg, &mut rng)?;
        results.push(check_instance(&inst, cfg, trial));
    }
    let max_rel = results.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        config: cfg.clone(),
        pass: trials > 0 && max_rel <= cfg.tolerance,
        max_relative_error: max_rel,
        trials: results,
    })
}
