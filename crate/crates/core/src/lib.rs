//! Set Transformer building blocks on a small reverse-mode autodiff core.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`param`], [`rng`], [`gradcheck`]: dense 2-D
//!   arithmetic, the gradient tape and its verification harness.
//! - [`blocks`], [`model`]: MAB, SAB, ISAB, PMA and baseline layers composed
//!   into encoder/decoder set models.
//! - [`tasks`]: max-value regression and amortised mixture-of-Gaussians
//!   clustering (data, likelihood, EM refinement, ARI).
//! - [`train`]: Adam, training loops and evaluation.
//! - [`harness`]: run configuration files, checkpoints, the runtime
//!   benchmark and the property-check suites.

pub mod autodiff;
pub mod blocks;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod param;
pub mod rng;
pub mod tasks;
pub mod train;
pub mod tensor;

pub use autodiff::{Activation, Gradients, PoolKind, Tape, Var, Weighting};
pub use error::{Error, Result};
pub use model::{DecoderConfig, EncoderBlock, EncoderConfig, ModelConfig, Pooling, SetModel};
pub use param::{Bound, ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use tensor::Tensor;
