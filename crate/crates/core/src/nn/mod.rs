//! Minimal rank-4 tensor library with reverse-mode differentiation.
//!
//! Everything the segmentation network needs and nothing more: a
//! `(batch, channels, height, width)` [`Tensor`] over `f64`, a [`Tape`] that
//! records forward operations and replays them backwards with hand-derived
//! gradients, a finite-difference [`gradcheck`] harness that keeps those
//! gradients honest, [`optim`] update rules, and a [`checkpoint`] format.
//!
//! All arithmetic is 64-bit and sequential, so every forward and backward
//! pass is bit-reproducible. NaN or infinity appearing in any op output is a
//! contract violation and reported as an error rather than propagated.

pub mod checkpoint;
pub mod gradcheck;
pub mod init;
pub mod optim;
mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;
