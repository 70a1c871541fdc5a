//! A single shared Transformer trained by mask-and-predict on unpaired text
//! and image-region batches, with detector tags as cross-modal anchor points.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors, reverse-mode autodiff, Adam, LR schedule
//! - [`encoder`]: the shared Transformer encoder
//! - [`embed`]: text / region / tag embedding with explicit parameter sharing
//! - [`model`]: parameter registry tying embedder, encoder, and loss heads
//! - [`masking`], [`losses`], [`scheduler`], [`trainer`]: pretraining
//! - [`world`], [`corpus`]: synthetic data and on-disk corpus formats
//! - [`finetune`], [`evaluate`], [`probe`]: downstream heads, metrics, and
//!   the representation-space probe
//! - [`checkpoint`]: versioned parameter container

pub mod checkpoint;
pub mod corpus;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod evaluate;
pub mod finetune;
pub mod losses;
pub mod masking;
pub mod model;
pub mod probe;
pub mod rng;
pub mod scheduler;
pub mod tensor;
pub mod trainer;
pub mod world;

pub use error::{CoreError, Result};
pub use tensor::{Scalar, Tensor};
