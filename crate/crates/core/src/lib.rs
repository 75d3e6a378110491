//! Dual compensation residual heads for long-tailed classification over
//! fixed feature embeddings.
//!
//! - [`data`]: datasets, the synthetic long-tail generator, file formats, samplers
//! - [`stats`]: prototypes, standard deviations, head/tail split, drift table
//! - [`fcm`]: feature compensation toward similar head classes
//! - [`lcm`]: closed-form logit compensation and its Monte-Carlo check
//! - [`classifier`]: multi-proxy and residual balanced classifiers
//! - [`training`]: dual-branch loss, analytic gradients, SGD loop
//! - [`eval`]: accuracy by shot split and drift diagnostics
//! - [`gradcheck`], [`oracle`]: finite-difference and Monte-Carlo self-checks

pub mod baseline;
pub mod checkpoint;
pub mod classifier;
pub mod data;
pub mod error;
pub mod eval;
pub mod fcm;
pub mod gradcheck;
pub mod lcm;
pub mod math;
pub mod oracle;
pub mod seed;
pub mod stats;
pub mod training;

pub use classifier::{DcrModel, MultiProxyClassifier};
pub use data::{Batch, FeatureDataset, LongTailSpec};
pub use error::{Error, Result};
pub use stats::{ClassStats, StatsConfig};
pub use training::{TrainConfig, TrainReport};
