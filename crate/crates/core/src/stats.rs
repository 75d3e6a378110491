//! Per-class statistics and the tail-class drift table.
//!
//! Everything here is computed once from the training features and treated
//! as a constant during training: prototypes `c_k`, diagonal standard
//! deviations `σ_k`, the head/tail split, and for every tail class `t` its
//! nearest head classes `S_t`, drift vectors `δ_tj = α_t (c_j − c_t)`, drift
//! probabilities `s_tj`, and the class-adaptive coefficients `α_t`, `β_t`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::FeatureDataset;
use crate::error::{Error, Result};
use crate::math;

/// Hyperparameters that shape the drift table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsConfig {
    /// `m`: number of head neighbors per tail class.
    pub neighbors: usize,
    /// `τ`: temperature of the drift-probability softmax.
    pub tau: f64,
    /// `α⁰`: maximum drift-compensation strength.
    pub alpha0: f64,
    /// `β⁰`: maximum logit-compensation strength.
    pub beta0: f64,
    /// Classes with strictly more training samples are head classes.
    pub head_threshold: usize,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            neighbors: 2,
            tau: 8.0,
            alpha0: 0.5,
            beta0: 6.0,
            head_threshold: 100,
        }
    }
}

impl StatsConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if !self.alpha0.is_finite() || self.alpha0 < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "alpha0 must be >= 0, got {}",
                self.alpha0
            )));
        }
        if !self.beta0.is_finite() || self.beta0 < 0.0 {
            return Err(Error::InvalidConfig(format!("beta0 must be >= 0, got {}", self.beta0)));
        }
        Ok(())
    }
}

/// Head/tail split of the label space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub head: Vec<usize>,
    pub tail: Vec<usize>,
}

impl Partition {
    pub fn is_tail_mask(&self, num_classes: usize) -> Vec<bool> {
        let mut mask = vec![false; num_classes];
        for &t in &self.tail {
            mask[t] = true;
        }
        mask
    }

    pub fn from_tail_mask(mask: &[bool]) -> Self {
        let (tail, head): (Vec<usize>, Vec<usize>) = (0..mask.len()).partition(|&k| mask[k]);
        Self { head, tail }
    }
}

/// Drift entry of one tail class.
#[derive(Debug, Clone, PartialEq)]
pub struct TailDrift {
    /// `S_t`, ordered by descending cosine similarity.
    pub neighbors: Vec<usize>,
    /// `g(c_t, c_j)` for each neighbor.
    pub similarities: Vec<f64>,
    /// `δ_tj` for each neighbor.
    pub drifts: Vec<Vec<f64>>,
    /// `s_tj` for each neighbor followed by `s_tt`.
    pub probabilities: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
}

impl TailDrift {
    pub fn self_probability(&self) -> f64 {
        *self.probabilities.last().expect("probabilities include the self term")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub config: StatsConfig,
    pub class_counts: Vec<usize>,
    pub prototypes: Vec<Vec<f64>>,
    pub std_devs: Vec<Vec<f64>>,
    pub partition: Partition,
    /// Indexed by class; `Some` exactly for tail classes.
    pub drift: Vec<Option<TailDrift>>,
}

impl ClassStats {
    pub fn num_classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.first().map_or(0, Vec::len)
    }

    pub fn is_tail(&self, k: usize) -> bool {
        self.drift[k].is_some()
    }

    pub fn tail_drift(&self, k: usize) -> Option<&TailDrift> {
        self.drift[k].as_ref()
    }

    /// Checks every structural invariant of the table.
    pub fn check_invariants(&self) -> Result<()> {
        let k = self.num_classes();
        let d = self.dim();
        let bad = |msg: String| Err(Error::InvalidDataset(msg));
        if self.std_devs.len() != k || self.class_counts.len() != k || self.drift.len() != k {
            return bad("per-class tables disagree on the number of classes".into());
        }
        let mut seen = vec![0u8; k];
        for &c in self.partition.head.iter().chain(&self.partition.tail) {
            if c >= k {
                return bad(format!("partition names class {c} outside [0, {k})"));
            }
            seen[c] += 1;
        }
        if seen.iter().any(|&s| s != 1) {
            return bad("head and tail sets must be disjoint and cover every class".into());
        }
        for (c, sd) in self.std_devs.iter().enumerate() {
            if sd.len() != d || sd.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return bad(format!("class {c} has an invalid standard deviation vector"));
            }
        }
        let expected_neighbors = self.config.neighbors.min(self.partition.head.len());
        for (c, entry) in self.drift.iter().enumerate() {
            let is_tail = self.partition.tail.contains(&c);
            match (entry, is_tail) {
                (None, false) => {}
                (Some(e), true) => {
                    if e.neighbors.len() != expected_neighbors
                        || e.drifts.len() != e.neighbors.len()
                        || e.similarities.len() != e.neighbors.len()
                        || e.probabilities.len() != e.neighbors.len() + 1
                    {
                        return bad(format!("tail class {c} has a malformed drift entry"));
                    }
                    if e.neighbors.iter().any(|j| !self.partition.head.contains(j)) {
                        return bad(format!("tail class {c} lists a non-head neighbor"));
                    }
                    let total: f64 = e.probabilities.iter().sum();
                    if (total - 1.0).abs() > 1e-9 || e.probabilities.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
                        return bad(format!("tail class {c} drift probabilities are not a distribution"));
                    }
                    if !(0.0..=self.config.alpha0).contains(&e.alpha) || !(0.0..=self.config.beta0).contains(&e.beta) {
                        return bad(format!("tail class {c} coefficients out of range"));
                    }
                }
                _ => return bad(format!("drift table and partition disagree on class {c}")),
            }
        }
        Ok(())
    }

    /// One line per class: index, count, H/T, ‖c_k‖, mean σ, S_t, s_tj, α_t, β_t.
    pub fn report(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# classes={} dim={} head={} tail={} m={} tau={} alpha0={} beta0={} head_threshold={}",
            self.num_classes(),
            self.dim(),
            self.partition.head.len(),
            self.partition.tail.len(),
            self.config.neighbors,
            self.config.tau,
            self.config.alpha0,
            self.config.beta0,
            self.config.head_threshold
        );
        let _ = writeln!(out, "# class count kind proto_norm mean_std neighbors probs alpha beta");
        for k in 0..self.num_classes() {
            let mean_std = self.std_devs[k].iter().sum::<f64>() / self.dim().max(1) as f64;
            let norm = math::norm(&self.prototypes[k]);
            match &self.drift[k] {
                None => {
                    let _ = writeln!(out, "{k} {} H {norm:.6} {mean_std:.6} - - - -", self.class_counts[k]);
                }
                Some(e) => {
                    let neighbors: Vec<String> = e.neighbors.iter().map(usize::to_string).collect();
                    let probs: Vec<String> = e.probabilities.iter().map(|p| format!("{p:.6}")).collect();
                    let _ = writeln!(
                        out,
                        "{k} {} T {norm:.6} {mean_std:.6} {} {} {:.6} {:.6}",
                        self.class_counts[k],
                        neighbors.join(","),
                        probs.join(","),
                        e.alpha,
                        e.beta
                    );
                }
            }
        }
        out
    }
}

/// Per-class arithmetic means of the training rows.
pub fn compute_prototypes(train: &FeatureDataset) -> Result<Vec<Vec<f64>>> {
    let d = train.dim();
    let mut sums = vec![vec![0.0f64; d]; train.num_classes()];
    for i in 0..train.len() {
        let acc = &mut sums[train.label(i)];
        for (a, &v) in acc.iter_mut().zip(train.row(i)) {
            *a += v as f64;
        }
    }
    for (k, (acc, &n)) in sums.iter_mut().zip(train.class_counts()).enumerate() {
        if n == 0 {
            return Err(Error::EmptyClass(k));
        }
        for a in acc.iter_mut() {
            *a /= n as f64;
        }
    }
    Ok(sums)
}

/// Per-class, per-dimension population standard deviation. Classes with
/// fewer than two samples get a zero vector.
pub fn compute_std(train: &FeatureDataset) -> Vec<Vec<f64>> {
    let d = train.dim();
    let k = train.num_classes();
    let counts = train.class_counts();
    let mut means = vec![vec![0.0f64; d]; k];
    for i in 0..train.len() {
        for (m, &v) in means[train.label(i)].iter_mut().zip(train.row(i)) {
            *m += v as f64;
        }
    }
    for (m, &n) in means.iter_mut().zip(counts) {
        if n > 0 {
            m.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    let mut var = vec![vec![0.0f64; d]; k];
    for i in 0..train.len() {
        let c = train.label(i);
        for ((s, &v), m) in var[c].iter_mut().zip(train.row(i)).zip(&means[c]) {
            let diff = v as f64 - m;
            *s += diff * diff;
        }
    }
    for (s, &n) in var.iter_mut().zip(counts) {
        if n < 2 {
            s.iter_mut().for_each(|v| *v = 0.0);
        } else {
            s.iter_mut().for_each(|v| *v = (*v / n as f64).sqrt());
        }
    }
    var
}

/// `C_h = {k : N_k > threshold}`, `C_t` its complement.
pub fn partition_head_tail(class_counts: &[usize], head_threshold: usize) -> Result<Partition> {
    let (head, tail): (Vec<usize>, Vec<usize>) =
        (0..class_counts.len()).partition(|&k| class_counts[k] > head_threshold);
    if head.is_empty() {
        return Err(Error::NoHeadClasses {
            threshold: head_threshold,
        });
    }
    if tail.is_empty() {
        log::warn!("no tail classes at threshold {head_threshold}; feature and logit compensation are disabled");
    }
    Ok(Partition { head, tail })
}

pub use crate::math::cosine_similarity;

/// The `m` head classes most cosine-similar to class `t`, with their
/// similarities, in descending order. Ties go to the lower class index.
pub fn select_neighbors(prototypes: &[Vec<f64>], head: &[usize], t: usize, m: usize) -> Result<Vec<(usize, f64)>> {
    let mut scored = head
        .iter()
        .map(|&j| Ok((j, cosine_similarity(&prototypes[t], &prototypes[j])?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(m.min(head.len()));
    Ok(scored)
}

/// `coef⁰ (N_max − N_t) / (N_max − N_min)`; returns `coef⁰` when the range
/// is degenerate.
pub fn class_adaptive_coefficient(n_t: usize, n_max: usize, n_min: usize, coef0: f64) -> f64 {
    if n_max <= n_min {
        return coef0;
    }
    let n_t = n_t.clamp(n_min, n_max);
    coef0 * ((n_max - n_t) as f64 / (n_max - n_min) as f64)
}

/// `α_t`.
pub fn alpha_schedule(n_t: usize, n_max: usize, n_min: usize, alpha0: f64) -> f64 {
    class_adaptive_coefficient(n_t, n_max, n_min, alpha0)
}

/// `β_t`.
pub fn beta_schedule(n_t: usize, n_max: usize, n_min: usize, beta0: f64) -> f64 {
    class_adaptive_coefficient(n_t, n_max, n_min, beta0)
}

/// `δ_tj = α_t (c_j − c_t)` for each neighbor `j`.
pub fn drift_vectors(prototypes: &[Vec<f64>], t: usize, neighbors: &[usize], alpha: f64) -> Vec<Vec<f64>> {
    neighbors
        .iter()
        .map(|&j| {
            prototypes[j]
                .iter()
                .zip(&prototypes[t])
                .map(|(cj, ct)| alpha * (cj - ct))
                .collect()
        })
        .collect()
}

/// Softmax over `τ g(c_t, c_j)` for the neighbors plus the self term
/// `τ g(c_t, c_t) = τ`, which is placed last.
pub fn drift_probabilities(similarities: &[f64], tau: f64) -> Vec<f64> {
    let mut scores: Vec<f64> = similarities.iter().map(|g| tau * g).collect();
    scores.push(tau);
    math::softmax(&scores)
}

pub fn build_class_stats(train: &FeatureDataset, config: &StatsConfig) -> Result<ClassStats> {
    config.validate()?;
    let prototypes = compute_prototypes(train)?;
    let std_devs = compute_std(train);
    let counts = train.class_counts().to_vec();
    let partition = partition_head_tail(&counts, config.head_threshold)?;

    let tail_counts = partition.tail.iter().map(|&t| counts[t]);
    let n_max = tail_counts.clone().max().unwrap_or(0);
    let n_min = tail_counts.min().unwrap_or(0);

    let mut drift = vec![None; counts.len()];
    for &t in &partition.tail {
        let scored = select_neighbors(&prototypes, &partition.head, t, config.neighbors)?;
        let (neighbors, similarities): (Vec<usize>, Vec<f64>) = scored.into_iter().unzip();
        let alpha = alpha_schedule(counts[t], n_max, n_min, config.alpha0);
        let beta = beta_schedule(counts[t], n_max, n_min, config.beta0);
        drift[t] = Some(TailDrift {
            drifts: drift_vectors(&prototypes, t, &neighbors, alpha),
            probabilities: drift_probabilities(&similarities, config.tau),
            neighbors,
            similarities,
            alpha,
            beta,
        });
    }
    Ok(ClassStats {
        config: config.clone(),
        class_counts: counts,
        prototypes,
        std_devs,
        partition,
        drift,
    })
}
