//! Masked-autoencoder pre-training and multi-modal motion forecasting for
//! vectorized driving scenes.
//!
//! The crate is `no_std` (with `alloc`) and carries everything that is pure
//! computation: a small reverse-mode tensor engine, agent-centric scene
//! preprocessing, the masking scheme, the embedding / transformer model,
//! the training steps, and the benchmark metrics. File formats, the CLI and
//! experiment orchestration live in the `motion-mae` companion crate.

#![no_std]

extern crate alloc;

pub mod error;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
