//! Few-shot classification with task discrepancy maximization (TDM) on top of
//! a small convolutional backbone and a prototype metric head.
//!
//! Everything is built on a tape-style reverse-mode autodiff engine in
//! [`tensor`]. Data-parallel work (per-image convolution, evaluation
//! episodes) runs on rayon when the `parallel` feature is enabled and falls
//! back to plain loops otherwise.

pub mod backbone;
pub mod data;
pub mod error;
pub mod harness;
pub mod metric;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod tdm;
pub mod tensor;

mod norm;

use serde::{Deserialize, Serialize};

pub use error::{Error, Result};
pub use norm::{BatchNormParams, BN_EPS, BN_MOMENTUM};

/// Training mode uses batch statistics and task-weight noise; evaluation
/// mode uses running statistics and no noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}
