//! Dual-attention vision backbone.
//!
//! Spatial window attention and channel group attention on top of a small
//! dense tensor engine with reverse-mode autodiff, plus parameter/FLOP
//! accounting and a desk-scale training harness.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod attention;
pub mod autodiff;
pub mod container;
pub mod error;
pub mod kernels;
pub mod model;
pub mod par;
pub mod rng;
pub mod selftest;
pub mod tensor;
pub mod training;
pub mod verify;

pub use autodiff::{grad_check, Tape, Var};
pub use error::{DavitError, Result};
pub use rng::Rng;
pub use tensor::{DType, Scalar, Tensor};
