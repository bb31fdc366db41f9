//! File formats, training and evaluation drivers, and the command line for
//! [`smtc_core`].
//!
//! - [`image_io`]: 8-bit PNG frames, flow renderings and maps.
//! - [`dataset`]: the `<root>/<seq>/{frames,flows,masks}` layout.
//! - [`checkpoint`]: versioned binary checkpoints with atomic writes.
//! - [`config`]: strict JSON model configuration.
//! - [`train`], [`evaluate`], [`infer`]: the pipeline drivers.
//! - [`gradcheck`]: per-component finite-difference table.
//! - [`ablate`]: rank, placement, module and input sweeps.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod image_io;
pub mod infer;
pub mod train;

pub use error::{Error, Result};
