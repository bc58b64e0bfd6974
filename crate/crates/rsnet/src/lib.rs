//! Relation scoring for dynamic scene graph generation in video.
//!
//! The crate is organized bottom-up:
//! - [`numerics`]: f64 tensors, a reverse-mode autodiff tape, transformer
//!   layers, gradient checking, checkpoints.
//! - [`scenegraph`]: boxes, detections, ground truth, the synthetic video
//!   generator, candidate pair handling, relation representations.
//! - [`scoring`]: spatial/temporal context encoders and the relation
//!   scoring decoder.
//! - [`model`]: the full parameter bundle and per-video forward pass.
//! - [`dsgg`]: baseline predicate classifier, context fusion, triplet
//!   scoring, and per-frame prediction assembly.
//! - [`training`]: losses, the AdamW optimizer, and the training loop.
//! - [`metrics`]: recall/precision/mean-recall evaluation.
//! - [`cli`]: configuration, manifests, and the command implementations.

pub mod cli;
pub mod dsgg;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod scenegraph;
pub mod training;
pub mod scoring;

pub use error::{Error, Result};
