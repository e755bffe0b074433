//! Bitemporal image change detection with a dataset-shared encoder-decoder
//! and lightweight per-dataset adapters.
//!
//! The crate is organized around a small rank-4 tensor core with reverse-mode
//! automatic differentiation (`tensor`), composite attention and fusion
//! blocks (`blocks`), the partitioned change-detection model (`model`), a
//! multi-dataset training and evaluation harness (`trainer`), and a
//! deterministic synthetic dataset generator (`synthdata`). The `canet`
//! binary ties these together into reproducible experiments.

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod model;
pub mod netpbm;
pub mod suite;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

use std::fmt;

/// Identifier of a registered dataset. Selects the active adapter and the
/// batch-normalization bank entries during a forward pass.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct DatasetId(String);

impl DatasetId {
    pub fn new(name: impl Into<String>) -> Self {
        DatasetId(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DatasetId {
    fn from(s: &str) -> Self {
        DatasetId(s.to_string())
    }
}
