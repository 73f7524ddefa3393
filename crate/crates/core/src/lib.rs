//! Prototype-attention de-raining: a small autodiff tensor engine, the
//! rain-streak prototype unit, its training losses, a U-shaped
//! encoder–decoder, synthetic time-lapse rain data and image metrics.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the on-disk
//! dataset layout and the command line live in the companion `rspu` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod rspu;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{Graph, Tensor, Var};
