//! Two-stage decoupled baseline: a linear classifier trained under uniform
//! sampling, then retrained under class-balanced sampling on the same
//! frozen features. No compensation, one weight vector per class.

use serde::Serialize;

use crate::classifier::{DcrModel, MultiProxyClassifier};
use crate::data::{Batch, ClassBalancedSampler, FeatureDataset, UniformSampler};
use crate::error::{Error, Result};
use crate::math;
use crate::seed::{self, Stream};
use crate::stats;
use crate::training::{cosine_lr, Momentum, TrainConfig};

#[derive(Debug, Clone, Serialize)]
pub struct CrtReport {
    pub uniform_stage_losses: Vec<f64>,
    pub balanced_stage_losses: Vec<f64>,
}

/// Mean softmax cross-entropy of a linear classifier over `batch` and its
/// gradient `(softmax − onehot) fᵀ`, averaged.
pub fn linear_ce_loss_grad(weights: &[f64], num_classes: usize, batch: &Batch) -> (f64, Vec<f64>) {
    let d = batch.dim;
    let mut grad = vec![0.0; weights.len()];
    let mut loss = 0.0;
    let n = batch.len() as f64;
    for i in 0..batch.len() {
        let f = batch.row(i);
        let logits: Vec<f64> = weights.chunks_exact(d).map(|w| math::dot(w, f)).collect();
        loss += math::cross_entropy(&logits, batch.labels[i]);
        let mut p = math::softmax(&logits);
        p[batch.labels[i]] -= 1.0;
        for k in 0..num_classes {
            for (g, x) in grad[k * d..(k + 1) * d].iter_mut().zip(f) {
                *g += p[k] * x / n;
            }
        }
    }
    (loss / n, grad)
}

fn run_stage<F: FnMut() -> Batch>(
    weights: &mut [f64],
    num_classes: usize,
    config: &TrainConfig,
    iterations: usize,
    mut next: F,
) -> Result<Vec<f64>> {
    let mut opt = Momentum::new(weights.len(), config.momentum);
    let mut losses = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let batch = next();
        let (loss, grad) = linear_ce_loss_grad(weights, num_classes, &batch);
        if !loss.is_finite() {
            return Err(Error::Diverged {
                epoch: it,
                iteration: it,
                diagnostic: format!("baseline loss {loss}"),
            });
        }
        opt.step(weights, &grad, cosine_lr(config.lr_initial, it, iterations));
        losses.push(loss);
    }
    Ok(losses)
}

/// Trains the baseline with the schedule, batch size and epoch count of
/// `config` for each stage. The balanced stage starts from the uniform
/// stage's weights and draws batches of `batch_uniform` rows.
pub fn train_crt(train_set: &FeatureDataset, config: &TrainConfig) -> Result<(DcrModel, CrtReport)> {
    config.validate()?;
    let stats = stats::build_class_stats(train_set, &config.stats_config())?;
    let k = stats.num_classes();
    let d = stats.dim();
    let mut rng = seed::rng_for(config.seed, Stream::InitUniform);
    let mut clf = MultiProxyClassifier::init(d, &stats.partition, 1, &mut rng)?;
    let iterations = train_set.len().div_ceil(config.batch_uniform) * config.epochs;

    let mut uniform = UniformSampler::new(train_set, config.batch_uniform, config.seed)?;
    let uniform_stage_losses = run_stage(clf.weights_mut(), k, config, iterations, || {
        uniform.next().expect("sampler is unbounded")
    })?;
    let mut balanced = ClassBalancedSampler::new(train_set, config.batch_uniform, config.seed)?;
    let balanced_stage_losses = run_stage(clf.weights_mut(), k, config, iterations, || {
        balanced.next().expect("sampler is unbounded")
    })?;

    let residual = MultiProxyClassifier::zeros(d, clf.tail_mask(), 1)?;
    let model = DcrModel::new(clf, residual, stats)?;
    Ok((
        model,
        CrtReport {
            uniform_stage_losses,
            balanced_stage_losses,
        },
    ))
}
