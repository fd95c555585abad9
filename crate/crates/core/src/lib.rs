//! Shape-prior regularized regression CNN for cell-nucleus detection.
//!
//! The crate is organised along the training/inference pipeline:
//!
//! - [`tensor`] and [`ops`] – dense rank-4 tensors and the differentiable
//!   primitives (SAME convolution, ReLU, stride-1 max-pool, Hadamard product,
//!   squared norm) with hand-written backward passes.
//! - [`network`] – the six-layer regression CNN, its initialisation, forward
//!   and backward passes, plus the checkpoint format in [`checkpoint`].
//! - [`edge`] – Canny edge detection producing the binary raw edge map.
//! - [`shape_prior`] – nucleus shape templates and the shape-prior reward:
//!   threshold, window-max pool, edge masking, template correlation.
//! - [`train`] – the combined objective (fidelity minus weighted prior), its
//!   gradient, SGD with momentum and the training loop.
//! - [`data`] – soft labels, patch extraction, synthetic microscopy data and
//!   dataset I/O.
//! - [`detect`] – local-maximum detection, golden-region matching,
//!   precision/recall/F1 and threshold sweeps.
//! - [`gradcheck`] – finite-difference verification of every backward pass.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod checkpoint;
pub mod data;
pub mod detect;
pub mod edge;
mod error;
pub mod gradcheck;
pub mod network;
pub mod ops;
pub mod pgm;
pub mod shape_prior;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{GradPair, Image, Tensor};
