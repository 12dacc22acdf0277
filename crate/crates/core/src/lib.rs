//! Residual objectness for anchor-based detection.
//!
//! A small dense detector whose objectness estimate is refined by a cascade
//! of residual subnets, together with everything needed to train and
//! evaluate it on synthetic scenes: a reverse-mode autodiff tape, anchor
//! assignment, the loss family (sigmoid CE, focal, objectness, residual
//! objectness, smooth-L1), NMS, and COCO-style average precision.
//!
//! The crate is `no_std` and needs only `alloc`. File formats, the CLI and
//! parallel experiment runners live in the `resobj` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod anchors;
pub mod data;
pub mod error;
pub mod fidelity;
pub mod grad;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub(crate) mod math;

pub use error::{Error, GradError};
pub use tensor::Tensor;
