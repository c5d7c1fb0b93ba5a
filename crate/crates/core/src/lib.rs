//! Hybrid transformer/CNN segmentation with multi-view cooperative training.
//!
//! The crate is `no_std` (it needs `alloc`) and holds everything that is pure
//! computation:
//!
//! - [`tensor`] and [`tape`]: a dense `f64` tensor type and a reverse-mode
//!   gradient tape covering the ops the model uses.
//! - [`gradcheck`]: central finite-difference verification of tape gradients.
//! - [`nn`]: the transformer branch, the CNN branch, the GLFF/DFM fusion module
//!   and the assembled three-view model.
//! - [`coop`], [`optim`], [`trainer`]: per-view loss, closed-form entropy
//!   regularized view weights, Adam and the alternating training loop.
//! - [`metrics`]: Dice, IoU and MAE.
//!
//! File formats, datasets and the command line live in the `transhnet` crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod coop;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
