//! Numerical check of the closed-form logit compensation against sampled
//! mixture augmentation.
//!
//! For a linear classifier, the expected cross-entropy over augmented copies
//! `f + δ_tj + √β_t σ_t ⊙ ε` must not exceed the compensated-logit loss. With
//! `β_t = 0` the two coincide.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gradcheck::{self, GradCheckConfig};
use crate::lcm;
use crate::seed::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCheckConfig {
    pub samples: usize,
    pub alpha0: f64,
    pub beta0: f64,
    pub tau: f64,
    pub neighbors: usize,
    /// Allowed excess of the sampled loss, in standard errors.
    pub sigmas: f64,
    pub seed: u64,
}

impl Default for BoundCheckConfig {
    fn default() -> Self {
        Self {
            samples: 100_000,
            alpha0: 0.5,
            beta0: 6.0,
            tau: 8.0,
            neighbors: 2,
            sigmas: 3.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundTrial {
    pub trial: usize,
    pub class: usize,
    pub beta: f64,
    pub closed_form: f64,
    pub sampled: f64,
    pub std_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundCheckReport {
    pub config: BoundCheckConfig,
    pub trials: Vec<BoundTrial>,
    pub pass: bool,
}

/// Runs `trials` random instances. Each uses the rarest tail class of a
/// small random dataset and a random linear classifier. For `β_t > 0` a
/// trial passes when `sampled ≤ closed_form + sigmas·SE`; for `β_t = 0`
/// when `|sampled − closed_form| ≤ sigmas·SE`.
pub fn bound_check(cfg: &BoundCheckConfig, trials: usize) -> Result<BoundCheckReport> {
    if cfg.samples == 0 {
        return Err(Error::InvalidConfig("samples must be positive".into()));
    }
    if cfg.sigmas.is_nan() || cfg.sigmas < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "sigmas must be non-negative, got {}",
            cfg.sigmas
        )));
    }
    let instance_cfg = GradCheckConfig {
        proxies: 1,
        alpha0: cfg.alpha0,
        beta0: cfg.beta0,
        tau: cfg.tau,
        neighbors: cfg.neighbors,
        seed: cfg.seed,
        ..GradCheckConfig::default()
    };
    let mut results = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut rng = seed::rng_for_indexed(cfg.seed, Stream::GradCheck, trial as u64);
        let inst = gradcheck::random_instance(&instance_cfg, &mut rng)?;
        let stats = &inst.model.stats;
        let weights: Vec<Vec<f64>> = (0..stats.num_classes())
            .map(|c| inst.model.uniform.proxy(c, 0).to_vec())
            .collect();
        // The first balanced row always belongs to the rarest class.
        let (feature, class) = (inst.batch_balanced.row(0), inst.batch_balanced.labels[0]);
        let beta = stats.tail_drift(class).map_or(0.0, |e| e.beta);
        let closed_form = lcm::lcm_loss(&lcm::linear_bundle(feature, class, &weights, stats));
        let mc = lcm::mc_expected_loss(
            feature,
            class,
            &weights,
            stats,
            cfg.samples,
            cfg.seed.wrapping_add(trial as u64),
        );
        let slack = cfg.sigmas * mc.std_error;
        let pass = if beta > 0.0 {
            mc.mean <= closed_form + slack
        } else {
            (mc.mean - closed_form).abs() <= slack
        };
        results.push(BoundTrial {
            trial,
            class,
            beta,
            closed_form,
            sampled: mc.mean,
            std_error: mc.std_error,
            pass,
        });
    }
    Ok(BoundCheckReport {
        config: cfg.clone(),
        pass: trials > 0 && results.iter().all(|r| r.pass),
        trials: results,
    })
}
