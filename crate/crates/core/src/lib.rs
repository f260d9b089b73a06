//! Source-free active domain adaptation for small image classifiers.
//!
//! A frozen network pretrained on a source domain guides a target network
//! through two mechanisms:
//!
//! * [`gatn`]: a guided attention transfer network that aligns modulated
//!   pretrained features with target features through spatial and channel
//!   attention, producing the transfer loss `L_Tr`;
//! * [`sampler`]: budgeted acquisition scoring each unlabeled sample by
//!   transferability, uncertainty and optional diversity.
//!
//! [`adapt::run_adaptation`] ties them into the round-based training loop.
//! Everything here is `no_std` with `alloc`; file formats and the command
//! line live in the companion `sfada` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod adapt;
pub mod data;
pub mod digits;
mod error;
pub mod gatn;
pub mod model;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod tape;
pub mod tensor;
pub mod train;

#[cfg(test)]
mod testing;

pub use error::{Error, Result};
pub use tensor::Tensor;
