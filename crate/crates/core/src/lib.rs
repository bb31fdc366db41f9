//! Core of a two-stream video object segmentation network built on a
//! trunk-collateral encoder and a saliency-guided refinement module.
//!
//! Everything in this crate is pure computation over in-memory buffers and
//! builds with `#![no_std]` plus `alloc`. File formats, PNG I/O, the training
//! driver and the command line live in the companion `smtc` crate.
//!
//! Layout:
//!
//! - [`numerics`]: dense tensors, a reverse-mode tape, finite-difference
//!   checking and AdamW.
//! - [`encoder`]: four-stage mix-transformer trunk with low-rank collateral
//!   branches on the motion path.
//! - [`isrm`]: refinement of the deepest fused feature guided by the
//!   round-one saliency map.
//! - [`decoder`]: per-level add/concat/conv/CBAM/upsample decoder and head.
//! - [`model`]: configuration, parameter accounting and two-round prediction.
//! - [`objective`]: focal + BCE + Dice loss with auxiliary round-one term.
//! - [`metrics`]: J, boundary F, MAE, max-F, E-measure, S-measure.
//! - [`synth`]: deterministic moving-shape scenes with analytic flow.
//! - [`training`]: batches, one AdamW step, gradient-free prediction.

#![no_std]

extern crate alloc;

pub mod decoder;
pub mod encoder;
pub mod error;
pub mod isrm;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod params;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Graph, Scalar, Tensor, Var};
