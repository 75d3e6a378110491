use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("label {label} at row {row} is out of range for {num_classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid long-tail spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("class {0} has no training samples")]
    EmptyClass(usize),

    #[error("no head classes: every class has at most {threshold} training samples")]
    NoHeadClasses { threshold: usize },

    #[error("zero-norm vector has no defined direction")]
    ZeroNorm,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("training diverged at epoch {epoch}, iteration {iteration}: {diagnostic}")]
    Diverged {
        epoch: usize,
        iteration: usize,
        diagnostic: String,
    },
}
