//! Feature compensation: expand a training feature into its drift modes.

use crate::stats::ClassStats;

/// One compensated copy of a feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Mode {
    /// `j`: the neighbor class the feature was shifted toward, or the
    /// base label for the retained original.
    pub class: usize,
    pub feature: Vec<f64>,
    pub probability: f64,
}

/// All modes of a feature together with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct CompensatedSet {
    pub label: usize,
    pub modes: Vec<Mode>,
}

impl CompensatedSet {
    pub fn total_probability(&self) -> f64 {
        self.modes.iter().map(|m| m.probability).sum()
    }
}

/// `f̄_j = f + δ_tj` with probability `s_tj` for `j ∈ S_t ∪ {t}`. Head-class
/// features come back as a single untouched mode.
pub fn compensate(feature: &[f64], label: usize, stats: &ClassStats) -> CompensatedSet {
    let Some(entry) = stats.tail_drift(label) else {
        return CompensatedSet {
            label,
            modes: vec![Mode {
                class: label,
                feature: feature.to_vec(),
                probability: 1.0,
            }],
        };
    };
    let mut modes = Vec::with_capacity(entry.neighbors.len() + 1);
    for ((&j, delta), &p) in entry.neighbors.iter().zip(&entry.drifts).zip(&entry.probabilities) {
        modes.push(Mode {
            class: j,
            feature: feature.iter().zip(delta).map(|(f, d)| f + d).collect(),
            probability: p,
        });
    }
    modes.push(Mode {
        class: label,
        feature: feature.to_vec(),
        probability: entry.self_probability(),
    });
    CompensatedSet { label, modes }
}
