//! Sleep-conditioned mood classification from wearable time-series.
//!
//! Pipeline: a CNN-Transformer encoder over 10-second ECG/PPG/EDA windows,
//! contrastively pre-trained on unlabeled windows, then adapted with frozen
//! weights by prepending a projected sleep-measure token and training
//! per-layer prompt parameters for 7-way multi-label mood classification.
//! A synthetic-data generator and a cross-subject evaluation harness make
//! the directional claims (sleep helps, prompts are sample-efficient, REM
//! matters most) testable at desk scale.

pub mod augment;
pub mod checkpoint;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod signal;
pub mod tensor;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
