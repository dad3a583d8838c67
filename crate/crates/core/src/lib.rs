//! Self-adaptive inference for semantic segmentation on a synthetic
//! domain-shift benchmark: normalization-statistic interpolation,
//! augmentation-fused pseudo-labels, and per-sample fine-tuning, all on a
//! small CPU-only network with tape-based reverse-mode differentiation.

pub mod adapt;
pub mod augment;
pub mod checkpoint;
pub mod error;
pub mod exec;
pub mod graph;
pub mod io;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod norm;
pub mod optim;
pub mod pseudo;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tensor, U8Tensor};
