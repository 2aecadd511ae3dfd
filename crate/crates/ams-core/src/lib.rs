//! Feature normalization and whitening blocks with explicit, auditable
//! gradients, plus the metric-learning losses and retrieval metrics used to
//! train and evaluate them.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`conv`], [`matrix`]: dense rank-4 tensors, direct
//!   convolution and small-matrix primitives, each with a hand-written
//!   backward pass.
//! - [`gradcheck`]: the finite-difference checker every backward is tested
//!   against.
//! - [`norm`]: instance normalization and per-sample group whitening
//!   (Newton–Schulz or eigendecomposition inverse square root).
//! - [`attention`]: channel and spatial attention masks.
//! - [`ams`]: the composite attention-aware block and its combination
//!   variants.
//! - [`loss`], [`metrics`]: cross-entropy, batch-hard triplet loss, and
//!   mAP/CMC retrieval evaluation.

pub mod ams;
pub mod attention;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod matrix;
pub mod metrics;
pub mod norm;
pub mod real;
pub mod tensor;

pub use crate::error::{CoreError, Result};
pub use crate::real::{Dtype, Real};
pub use crate::tensor::{Axes, Dims4, Tensor4};
