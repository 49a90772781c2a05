//! Report-conditioned mixture-of-experts over a multi-scale visual feature
//! pyramid, trained with global and local image-text contrastive losses.
//!
//! Module map:
//!
//! - [`ndtensor`]: f64 tensors and the reverse-mode autodiff tape
//! - [`encoders`]: strided-convolution pyramid encoder and token text encoder
//! - [`moe`]: hard router and cross-scale attention experts
//! - [`objectives`]: global/local contrastive losses and the auxiliary head
//! - [`synthcorpus`]: deterministic synthetic multimodal corpus
//! - [`harness`]: training, zero-shot, linear probe, attention export,
//!   checkpoints and metrics

pub mod encoders;
pub mod error;
pub mod harness;
pub mod moe;
pub mod ndtensor;
pub mod objectives;
pub mod synthcorpus;

pub use error::{Error, Result};
