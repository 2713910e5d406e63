//! Thermal-infrared small-target detection pipeline.
//!
//! The crate is organized as a stack of largely independent layers:
//!
//! - [`imgio`] — single-channel images and masks, bit-exact PGM I/O,
//!   normalization and padding primitives.
//! - [`enhance`] — fixed-weight center-surround kernel bank and the
//!   enhanced response stack that feeds the network head.
//! - [`dataprep`] — target-background separated domain-adaptation data
//!   preparation and the unpaired-translation loss evaluators.
//! - [`nn`] — minimal rank-4 tensor library with hand-derived backward
//!   passes, gradient checking, optimizers, and checkpointing.
//! - [`segnet`] — the segmentation network (residual U-Net encoder/decoder
//!   with an ASPP bridge and a per-pixel likelihood head), training and
//!   inference.
//! - [`metrics`] — confusion counts, IoU/recall/precision/F1, and the
//!   k-fold cross-validation harness.
//! - [`synthgen`] — deterministic synthetic maritime TIR scene generator
//!   for desk-scale experiments.

pub mod dataprep;
pub mod enhance;
pub mod error;
pub mod imgio;
pub mod metrics;
pub mod nn;
pub mod segnet;
pub mod synthgen;

pub use error::{Error, Result};
