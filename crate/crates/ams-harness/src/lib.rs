//! Desk-scale domain-generalization training harness around `ams-core`:
//! synthetic multi-domain identity data, a toy bottleneck backbone with
//! block insertions, a PK-sampled training loop (Adam, warmup + cosine),
//! leave-one-domain-out retrieval evaluation, and an ablation runner.

pub mod ablate;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod optim;
pub mod rng;
pub mod runner;
pub mod sampler;
pub mod selfcheck;
pub mod train;

pub use crate::config::RunConfig;
pub use crate::error::{HarnessError, Result};
