//! Hierarchical contrastive alignment between body-worn IMU streams and 2D
//! skeletal pose sequences.
//!
//! The crate is `no_std` (with `alloc`). It holds every algorithmic piece:
//! the motion-data domain model, the synthetic paired-motion generator, a small
//! differentiable layer library with hand-written backward passes, the
//! encoders, the token/local/global contrastive objective plus masked token
//! prediction, the training loop, and the downstream evaluators (retrieval,
//! synchronization, localization, action recognition).
//!
//! File formats, checkpoints and the command-line driver live in the `imupose`
//! companion crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod data;
pub mod encoders;
pub mod error;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod real;
pub mod synth;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Mat;
