//! Test-phase evaluation and drift diagnostics.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::Serialize;

use crate::classifier::DcrModel;
use crate::data::FeatureDataset;
use crate::error::{Error, Result};
use crate::fcm;
use crate::math;
use crate::stats::{self, ClassStats};

/// Shot splits by training count: Many `> many_above`, Few `< few_below`,
/// Medium otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SplitThresholds {
    pub many_above: usize,
    pub few_below: usize,
}

impl Default for SplitThresholds {
    fn default() -> Self {
        Self {
            many_above: 100,
            few_below: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Split {
    Many,
    Medium,
    Few,
}

impl SplitThresholds {
    pub fn split_of(&self, train_count: usize) -> Split {
        if train_count > self.many_above {
            Split::Many
        } else if train_count < self.few_below {
            Split::Few
        } else {
            Split::Medium
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub split: Split,
    pub train_count: usize,
    pub test_count: usize,
    pub correct: usize,
    /// `None` when the class has no test samples.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub overall: f64,
    /// Split accuracies are `None` when no test sample falls in the split.
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub thresholds: SplitThresholds,
    pub per_class: Vec<ClassAccuracy>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn split_accuracy(&self, split: Split) -> Option<f64> {
        match split {
            Split::Many => self.many,
            Split::Medium => self.medium,
            Split::Few => self.few,
        }
    }

    /// Columns: `class,split,train_count,test_count,correct,accuracy`.
    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("class,split,train_count,test_count,correct,accuracy\n");
        for c in &self.per_class {
            let acc = c.accuracy.map_or(String::new(), |a| format!("{a:.6}"));
            let _ = writeln!(
                out,
                "{},{:?},{},{},{},{}",
                c.class, c.split, c.train_count, c.test_count, c.correct, acc
            );
        }
        out
    }
}

/// Argmax of the balanced logits; compensation is never applied here.
pub fn predict(model: &DcrModel, feature: &[f64]) -> usize {
    model.predict(feature)
}

pub fn evaluate(
    model: &DcrModel,
    test: &FeatureDataset,
    train_counts: &[usize],
    thresholds: SplitThresholds,
) -> Result<EvalReport> {
    if test.dim() != model.uniform.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.uniform.dim(),
            found: test.dim(),
        });
    }
    let predictions: Vec<usize> = (0..test.len()).map(|i| predict(model, &test.row_f64(i))).collect();
    let labels: Vec<usize> = (0..test.len()).map(|i| test.label(i)).collect();
    evaluate_predictions(
        &predictions,
        &labels,
        model.stats.num_classes().max(test.num_classes()),
        train_counts,
        thresholds,
    )
}

/// Builds the report from precomputed predictions.
pub fn evaluate_predictions(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
    train_counts: &[usize],
    thresholds: SplitThresholds,
) -> Result<EvalReport> {
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            found: predictions.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::InvalidDataset("test set is empty".into()));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= num_classes || p >= num_classes {
            return Err(Error::LabelOutOfRange {
                row: 0,
                label: y.max(p),
                num_classes,
            });
        }
        if train_counts.get(y).copied().unwrap_or(0) == 0 {
            return Err(Error::InvalidDataset(format!("test class {y} has no training samples")));
        }
        confusion[y][p] += 1;
    }
    let mut per_class = Vec::with_capacity(num_classes);
    let mut split_hits = [(0usize, 0usize); 3];
    for (k, row) in confusion.iter().enumerate() {
        let test_count: usize = row.iter().sum();
        let correct = row[k];
        let train_count = train_counts.get(k).copied().unwrap_or(0);
        let split = thresholds.split_of(train_count);
        let slot = &mut split_hits[split as usize];
        slot.0 += correct;
        slot.1 += test_count;
        per_class.push(ClassAccuracy {
            class: k,
            split,
            train_count,
            test_count,
            correct,
            accuracy: (test_count > 0).then(|| correct as f64 / test_count as f64),
        });
    }
    let rate = |(c, n): (usize, usize)| (n > 0).then(|| c as f64 / n as f64);
    let total_correct: usize = split_hits.iter().map(|s| s.0).sum();
    Ok(EvalReport {
        overall: total_correct as f64 / predictions.len() as f64,
        many: rate(split_hits[Split::Many as usize]),
        medium: rate(split_hits[Split::Medium as usize]),
        few: rate(split_hits[Split::Few as usize]),
        thresholds,
        per_class,
        confusion,
    })
}

/// Per-class drift measurements. Vectors are indexed by class; entries are
/// `None` where the measurement does not apply (head classes for the
/// tail-only columns, or classes without test samples).
#[derive(Debug, Clone, Serialize)]
pub struct DriftReport {
    /// Euclidean distance between the train and test prototype.
    pub prototype_shift: Vec<Option<f64>>,
    /// Head class most cosine-similar to the tail prototype.
    pub nearest_head: Vec<Option<usize>>,
    /// Mean distance of the class's train features to that head prototype.
    pub train_to_head: Vec<Option<f64>>,
    /// Same for the test features.
    pub test_to_head: Vec<Option<f64>>,
    /// Number of distinct cosine-nearest head prototypes over test samples.
    pub distinct_test_heads: Vec<Option<usize>>,
    /// Mean over test features of the distance to the closest training
    /// feature of the same class.
    pub test_to_train: Vec<Option<f64>>,
    /// Same, against the drift-shifted copies `f + δ_tj` (`j ∈ S_t`) of the
    /// training features; head classes use their original features.
    pub test_to_compensated: Option<Vec<Option<f64>>>,
}

impl DriftReport {
    /// Columns: `class,kind,train_count,prototype_shift,nearest_head,
    /// train_to_head,test_to_head,distinct_test_heads,test_to_train,
    /// test_to_compensated`.
    pub fn to_csv(&self, stats: &ClassStats) -> String {
        fn opt<T: ToString>(v: &Option<T>) -> String {
            v.as_ref().map_or(String::new(), T::to_string)
        }
        let mut out = String::from(
            "class,kind,train_count,prototype_shift,nearest_head,train_to_head,test_to_head,distinct_test_heads,test_to_train,test_to_compensated\n",
        );
        for k in 0..self.prototype_shift.len() {
            let comp = self.test_to_compensated.as_ref().and_then(|v| v[k]);
            let _ = writeln!(
                out,
                "{k},{},{},{},{},{},{},{},{},{}",
                if stats.is_tail(k) { "tail" } else { "head" },
                stats.class_counts[k],
                opt(&self.prototype_shift[k]),
                opt(&self.nearest_head[k]),
                opt(&self.train_to_head[k]),
                opt(&self.test_to_head[k]),
                opt(&self.distinct_test_heads[k]),
                opt(&self.test_to_train[k]),
                opt(&comp),
            );
        }
        out
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn nearest_head_of(feature: &[f64], stats: &ClassStats) -> Option<usize> {
    let mut best = None;
    let mut best_sim = f64::NEG_INFINITY;
    for &j in &stats.partition.head {
        if let Ok(sim) = math::cosine_similarity(feature, &stats.prototypes[j]) {
            if sim > best_sim {
                best_sim = sim;
                best = Some(j);
            }
        }
    }
    best
}

pub fn drift_report(
    train: &FeatureDataset,
    test: &FeatureDataset,
    stats: &ClassStats,
    with_compensation: bool,
) -> Result<DriftReport> {
    if train.dim() != test.dim() || train.dim() != stats.dim() {
        return Err(Error::DimensionMismatch {
            expected: train.dim(),
            found: test.dim(),
        });
    }
    let k = stats.num_classes();
    let train_rows: Vec<Vec<Vec<f64>>> = train
        .class_indices()
        .iter()
        .map(|idx| idx.iter().map(|&i| train.row_f64(i)).collect())
        .collect();
    let mut test_rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); k];
    for i in 0..test.len() {
        let label = test.label(i);
        if label < k {
            test_rows[label].push(test.row_f64(i));
        }
    }

    let mut report = DriftReport {
        prototype_shift: vec![None; k],
        nearest_head: vec![None; k],
        train_to_head: vec![None; k],
        test_to_head: vec![None; k],
        distinct_test_heads: vec![None; k],
        test_to_train: vec![None; k],
        test_to_compensated: with_compensation.then(|| vec![None; k]),
    };

    for c in 0..k {
        let tests = &test_rows[c];
        if !tests.is_empty() {
            let d = stats.dim();
            let mut proto = vec![0.0; d];
            for row in tests {
                proto.iter_mut().zip(row).for_each(|(p, v)| *p += v);
            }
            proto.iter_mut().for_each(|p| *p /= tests.len() as f64);
            report.prototype_shift[c] = Some(math::euclidean_distance(&stats.prototypes[c], &proto));
            report.test_to_train[c] = closest_mean(tests, &train_rows[c]);
        }

        if let Some(entry) = stats.tail_drift(c) {
            let head = stats::select_neighbors(&stats.prototypes, &stats.partition.head, c, 1)?[0].0;
            report.nearest_head[c] = Some(head);
            let hp = &stats.prototypes[head];
            report.train_to_head[c] = mean(train_rows[c].iter().map(|f| math::euclidean_distance(f, hp)));
            report.test_to_head[c] = mean(tests.iter().map(|f| math::euclidean_distance(f, hp)));
            if !tests.is_empty() {
                let heads: BTreeSet<usize> = tests.iter().filter_map(|f| nearest_head_of(f, stats)).collect();
                report.distinct_test_heads[c] = Some(heads.len());
            }
            if let Some(comp) = report.test_to_compensated.as_mut() {
                let shifted: Vec<Vec<f64>> = train_rows[c]
                    .iter()
                    .flat_map(|f| {
                        let n = entry.neighbors.len();
                        fcm::compensate(f, c, stats)
                            .modes
                            .into_iter()
                            .take(n)
                            .map(|m| m.feature)
                    })
                    .collect();
                comp[c] = closest_mean(tests, &shifted);
            }
        } else if let Some(comp) = report.test_to_compensated.as_mut() {
            comp[c] = report.test_to_train[c];
        }
    }
    Ok(report)
}

/// Mean over `queries` of the distance to the closest row of `pool`.
fn closest_mean(queries: &[Vec<f64>], pool: &[Vec<f64>]) -> Option<f64> {
    if pool.is_empty() {
        return None;
    }
    mean(queries.iter().map(|q| {
        pool.iter()
            .map(|p| math::squared_distance(q, p))
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    }))
}
