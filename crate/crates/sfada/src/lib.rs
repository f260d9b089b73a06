//! File formats, experiment orchestration and reports on top of
//! [`sfada_core`].
//!
//! * [`idx`]: IDX digit files;
//! * [`checkpoint`]: versioned binary network and GATN checkpoints;
//! * [`config`]: the JSON experiment configuration;
//! * [`experiment`]: `pretrain`, `adapt`, `ablate` and `eval`;
//! * [`report`]: CSV outputs.

pub mod checkpoint;
pub mod config;
mod error;
pub mod experiment;
pub mod idx;
pub mod report;

pub use error::{Error, Result};
pub use sfada_core as core;
