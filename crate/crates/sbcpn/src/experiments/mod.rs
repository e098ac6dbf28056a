//! Benchmark problem families: sparse recovery under Student's t noise,
//! robust binary classification, and grouped robust regression.

pub mod classify;
pub mod dct;
pub mod students_t;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("instance too small: n = {n}, need n >= 40")]
    TooSmall { n: usize },
    #[error("bad instance data: {0}")]
    Format(String),
    #[error("labels must be -1 or 1, found {0}")]
    BadLabel(f64),
}
