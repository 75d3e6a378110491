//! Dual-branch training of the uniform and residual classifiers.
//!
//! Every iteration draws a uniform batch and a class-balanced batch. Each
//! sample is expanded into its compensated modes, scored by the uniform
//! classifier (uniform branch) or by the proxy-wise sum of both
//! classifiers (balanced branch), logit-compensated, and scored with the
//! mode-weighted cross-entropy. The combined loss is
//! `φ ℒ₁ + (1 − φ) ℒ₂`, minimized by SGD with classical momentum under a
//! cosine learning-rate schedule.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{DcrModel, MultiProxyClassifier};
use crate::data::{Batch, ClassBalancedSampler, FeatureDataset, UniformSampler};
use crate::error::{Error, Result};
use crate::fcm;
use crate::lcm;
use crate::math;
use crate::seed::{self, Stream};
use crate::stats::{self, ClassStats, StatsConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_uniform: usize,
    pub batch_balanced: usize,
    pub lr_initial: f64,
    pub momentum: f64,
    /// `φ`, weight of the uniform-branch loss.
    pub phi: f64,
    /// `m`.
    pub neighbors: usize,
    pub alpha0: f64,
    pub beta0: f64,
    pub tau: f64,
    /// `L`, proxies per tail class.
    pub proxies: usize,
    pub head_threshold: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 90,
            batch_uniform: 192,
            batch_balanced: 64,
            lr_initial: 0.075,
            momentum: 0.9,
            phi: 0.8,
            neighbors: 2,
            alpha0: 0.5,
            beta0: 6.0,
            tau: 8.0,
            proxies: 2,
            head_threshold: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 13] = [
        "epochs",
        "batch_uniform",
        "batch_balanced",
        "lr_initial",
        "momentum",
        "phi",
        "neighbors",
        "alpha0",
        "beta0",
        "tau",
        "proxies",
        "head_threshold",
        "seed",
    ];

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.phi) {
            return fail(format!("phi must lie in [0, 1], got {}", self.phi));
        }
        if self.batch_uniform == 0 || self.batch_balanced == 0 {
            return fail("batch sizes must be positive".into());
        }
        if !self.lr_initial.is_finite() || self.lr_initial <= 0.0 {
            return fail(format!("lr_initial must be positive, got {}", self.lr_initial));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.proxies == 0 {
            return fail("proxies must be at least 1".into());
        }
        self.stats_config().validate()
    }

    pub fn stats_config(&self) -> StatsConfig {
        StatsConfig {
            neighbors: self.neighbors,
            tau: self.tau,
            alpha0: self.alpha0,
            beta0: self.beta0,
            head_threshold: self.head_threshold,
        }
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("cannot parse `{value}` for `{key}`")))
        }
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_uniform" => self.batch_uniform = parse(key, value)?,
            "batch_balanced" => self.batch_balanced = parse(key, value)?,
            "lr_initial" => self.lr_initial = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "phi" => self.phi = parse(key, value)?,
            "neighbors" => self.neighbors = parse(key, value)?,
            "alpha0" => self.alpha0 = parse(key, value)?,
            "beta0" => self.beta0 = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "proxies" => self.proxies = parse(key, value)?,
            "head_threshold" => self.head_threshold = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(Error::InvalidConfig(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Parses flat `key = value` lines over the defaults. `#` starts a
    /// comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_text(&std::fs::read_to_string(path)?)
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "batch_uniform = {}", self.batch_uniform)?;
        writeln!(f, "batch_balanced = {}", self.batch_balanced)?;
        writeln!(f, "lr_initial = {}", self.lr_initial)?;
        writeln!(f, "momentum = {}", self.momentum)?;
        writeln!(f, "phi = {}", self.phi)?;
        writeln!(f, "neighbors = {}", self.neighbors)?;
        writeln!(f, "alpha0 = {}", self.alpha0)?;
        writeln!(f, "beta0 = {}", self.beta0)?;
        writeln!(f, "tau = {}", self.tau)?;
        writeln!(f, "proxies = {}", self.proxies)?;
        writeln!(f, "head_threshold = {}", self.head_threshold)?;
        writeln!(f, "seed = {}", self.seed)
    }
}

/// Loss of one batch pair and its gradients.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub loss_uniform: f64,
    pub loss_balanced: f64,
    pub grad_uniform: Vec<f64>,
    pub grad_residual: Vec<f64>,
}

/// Mode-weighted compensated cross-entropy of one sample under `clf`.
/// When `grad` is given, `scale` times the gradient with respect to the
/// flat weights of `clf` is added to it.
pub fn sample_loss(
    clf: &MultiProxyClassifier,
    stats: &ClassStats,
    feature: &[f64],
    label: usize,
    mut grad: Option<(&mut [f64], f64)>,
) -> f64 {
    let d = clf.dim();
    let k_classes = clf.num_classes();
    let set = fcm::compensate(feature, label, stats);
    let lcm = stats
        .tail_drift(label)
        .filter(|e| e.beta != 0.0)
        .map(|e| (e.beta, &stats.std_devs[label]));

    let mut total = 0.0;
    let mut upstream = vec![vec![0.0; d]; k_classes];
    for mode in &set.modes {
        let fwd = clf.forward(&mode.feature);
        let logits = match lcm {
            Some((beta, sigma)) => {
                let adj = lcm::logit_adjustment(&fwd.effective, label, beta, sigma);
                fwd.logits.iter().zip(&adj).map(|(z, a)| z + a).collect()
            }
            None => fwd.logits.clone(),
        };
        let loss = math::cross_entropy(&logits, label);
        total += mode.probability * loss;

        let Some((g_out, scale)) = grad.as_mut() else {
            continue;
        };
        let weight = *scale * mode.probability;
        if weight == 0.0 {
            continue;
        }
        // dL/dz̄ = softmax − onehot
        let mut dz = math::softmax(&logits);
        dz[label] -= 1.0;

        // Gradient of the quadratic adjustment with respect to ŵ.
        let has_lcm = if let Some((beta, sigma)) = lcm {
            let w_t = &fwd.effective[label];
            let mut g_t = vec![0.0; d];
            for k in 0..k_classes {
                let up = &mut upstream[k];
                if k == label {
                    continue;
                }
                for dd in 0..d {
                    let q = beta * (fwd.effective[k][dd] - w_t[dd]) * sigma[dd] * sigma[dd] * dz[k];
                    up[dd] = q;
                    g_t[dd] -= q;
                }
            }
            upstream[label] = g_t;
            true
        } else {
            false
        };

        for k in 0..k_classes {
            let off = clf.proxy_offset(k);
            let count = clf.proxy_count(k);
            let up = &upstream[k];
            let up_dot_what = if has_lcm { math::dot(up, &fwd.effective[k]) } else { 0.0 };
            for l in 0..count {
                let p = off + l;
                let pi = fwd.pi[p];
                let w = clf.proxy(k, l);
                // d z_k / d a_l = π_l (1 + a_l − z_k); d(G·ŵ_k)/d a_l = π_l (G·w_l − G·ŵ_k)
                let mut coef = if count == 1 {
                    dz[k]
                } else {
                    dz[k] * pi * (1.0 + fwd.scores[p] - fwd.logits[k])
                };
                if has_lcm && count > 1 {
                    coef += pi * (math::dot(up, w) - up_dot_what);
                }
                let g = &mut g_out[p * d..(p + 1) * d];
                for dd in 0..d {
                    let mut v = coef * mode.feature[dd];
                    if has_lcm {
                        v += pi * up[dd];
                    }
                    g[dd] += weight * v;
                }
            }
        }
    }
    total
}

const CHUNK: usize = 16;

/// Mean loss over `batch` under `clf` and, if `scale != 0`, `scale / n`
/// times the summed gradient. Chunks are reduced in a fixed order.
fn branch_loss(clf: &MultiProxyClassifier, stats: &ClassStats, batch: &Batch, scale: f64) -> (f64, Vec<f64>) {
    let n = batch.len();
    let per_sample = if scale == 0.0 { 0.0 } else { scale / n as f64 };
    let nparams = clf.weights().len();
    let chunks: Vec<(f64, Vec<f64>)> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut g = if per_sample != 0.0 {
                vec![0.0; nparams]
            } else {
                Vec::new()
            };
            let mut loss = 0.0;
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let grad = if per_sample != 0.0 {
                    Some((g.as_mut_slice(), per_sample))
                } else {
                    None
                };
                loss += sample_loss(clf, stats, batch.row(i), batch.labels[i], grad);
            }
            (loss, g)
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; nparams];
    for (l, g) in chunks {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    (loss / n as f64, grad)
}

/// `ℒ = φ ℒ₁ + (1 − φ) ℒ₂` and its exact gradients. ℒ₁ reaches only the
/// uniform weights; ℒ₂ reaches both.
pub fn loss_and_grad(model: &DcrModel, batch_u: &Batch, batch_b: &Batch, phi: f64) -> Result<LossGrad> {
    if batch_u.is_empty() || batch_b.is_empty() {
        return Err(Error::InvalidConfig("batches must be non-empty".into()));
    }
    let (loss_uniform, mut grad_uniform) = branch_loss(&model.uniform, &model.stats, batch_u, phi);
    let balanced = model.balanced_classifier();
    let (loss_balanced, grad_balanced) = branch_loss(&balanced, &model.stats, batch_b, 1.0 - phi);
    for (a, b) in grad_uniform.iter_mut().zip(&grad_balanced) {
        *a += b;
    }
    Ok(LossGrad {
        loss: phi * loss_uniform + (1.0 - phi) * loss_balanced,
        loss_uniform,
        loss_balanced,
        grad_uniform,
        grad_residual: grad_balanced,
    })
}

/// Learning rate at `iteration` of `total`: `lr₀ · ½ (1 + cos(π i / total))`.
pub fn cosine_lr(lr_initial: f64, iteration: usize, total: usize) -> f64 {
    if total == 0 {
        return lr_initial;
    }
    0.5 * lr_initial * (1.0 + (std::f64::consts::PI * iteration as f64 / total as f64).cos())
}

/// SGD with classical momentum: `v ← μ v − lr g`, `w ← w + v`.
#[derive(Debug, Clone)]
pub struct Momentum {
    momentum: f64,
    velocity: Vec<f64>,
}

impl Momentum {
    pub fn new(len: usize, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: vec![0.0; len],
        }
    }

    pub fn step(&mut self, weights: &mut [f64], grad: &[f64], lr: f64) {
        for ((w, v), g) in weights.iter_mut().zip(self.velocity.iter_mut()).zip(grad) {
            *v = self.momentum * *v - lr * g;
            *w += *v;
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss_uniform: f64,
    pub loss_balanced: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub epochs: Vec<EpochLoss>,
    /// Combined loss of every iteration, in order.
    pub iteration_losses: Vec<f64>,
    /// Not serialized, so saved reports of identical runs are identical.
    #[serde(skip)]
    pub wall_clock_secs: f64,
    pub seed: u64,
}

/// Builds the statistics and the initial model: uniform weights drawn at
/// scale `1/√D`, residual weights zero.
pub fn init_model(train_set: &FeatureDataset, config: &TrainConfig) -> Result<DcrModel> {
    config.validate()?;
    let stats = stats::build_class_stats(train_set, &config.stats_config())?;
    init_model_with_stats(stats, config)
}

pub fn init_model_with_stats(stats: ClassStats, config: &TrainConfig) -> Result<DcrModel> {
    let mut rng = seed::rng_for(config.seed, Stream::InitUniform);
    let uniform = MultiProxyClassifier::init(stats.dim(), &stats.partition, config.proxies, &mut rng)?;
    let mask = stats.partition.is_tail_mask(stats.num_classes());
    let residual = MultiProxyClassifier::zeros(stats.dim(), &mask, config.proxies)?;
    DcrModel::new(uniform, residual, stats)
}

pub fn train(train_set: &FeatureDataset, config: &TrainConfig) -> Result<(DcrModel, TrainReport)> {
    let model = init_model(train_set, config)?;
    train_model(model, train_set, config)
}

/// Runs the training loop from an existing model.
pub fn train_model(
    mut model: DcrModel,
    train_set: &FeatureDataset,
    config: &TrainConfig,
) -> Result<(DcrModel, TrainReport)> {
    config.validate()?;
    let start = Instant::now();
    let mut uniform = UniformSampler::new(train_set, config.batch_uniform, config.seed)?;
    let mut balanced = ClassBalancedSampler::new(train_set, config.batch_balanced, config.seed)?;
    let per_epoch = uniform.batches_per_epoch();
    let total = per_epoch * config.epochs;
    let mut opt_u = Momentum::new(model.uniform.weights().len(), config.momentum);
    let mut opt_r = Momentum::new(model.residual.weights().len(), config.momentum);
    let limit = 1e3 * (model.stats.num_classes() as f64).ln().max(1.0);
    let update_residual = config.phi < 1.0;

    let mut epochs = Vec::with_capacity(config.epochs);
    let mut iteration_losses = Vec::with_capacity(total);
    let mut it = 0;
    for epoch in 0..config.epochs {
        let (mut l1, mut l2, mut l) = (0.0, 0.0, 0.0);
        for step in 0..per_epoch {
            let bu = uniform.next().expect("sampler is unbounded");
            let bb = balanced.next().expect("sampler is unbounded");
            let lg = loss_and_grad(&model, &bu, &bb, config.phi)?;
            if !lg.loss.is_finite() || lg.loss > limit {
                return Err(Error::Diverged {
                    epoch,
                    iteration: step,
                    diagnostic: divergence_diagnostic(&model, &bu, lg.loss),
                });
            }
            let lr = cosine_lr(config.lr_initial, it, total);
            opt_u.step(model.uniform.weights_mut(), &lg.grad_uniform, lr);
            if update_residual {
                opt_r.step(model.residual.weights_mut(), &lg.grad_residual, lr);
            }
            l1 += lg.loss_uniform;
            l2 += lg.loss_balanced;
            l += lg.loss;
            iteration_losses.push(lg.loss);
            it += 1;
        }
        let n = per_epoch as f64;
        log::debug!(
            "epoch {epoch}: loss {:.6} (uniform {:.6}, balanced {:.6})",
            l / n,
            l1 / n,
            l2 / n
        );
        epochs.push(EpochLoss {
            epoch,
            loss_uniform: l1 / n,
            loss_balanced: l2 / n,
            loss: l / n,
        });
    }
    let report = TrainReport {
        config: config.clone(),
        epochs,
        iteration_losses,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        seed: config.seed,
    };
    Ok((model, report))
}

fn divergence_diagnostic(model: &DcrModel, batch: &Batch, loss: f64) -> String {
    let max_norm = |c: &MultiProxyClassifier| c.weight_norms().into_iter().fold(0.0f64, f64::max);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..batch.len() {
        for z in model.rbmc_logits(batch.row(i)) {
            lo = lo.min(z);
            hi = hi.max(z);
        }
    }
    format!(
        "loss {loss}, max uniform weight norm {:.4e}, max residual weight norm {:.4e}, logits in [{lo:.4e}, {hi:.4e}]",
        max_norm(&model.uniform),
        max_norm(&model.residual)
    )
}
