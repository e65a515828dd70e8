//! Constrained mean-shift self-supervised learning on in-memory vector data.

pub mod classifier;
pub mod cli;
pub(crate) mod codec;
pub mod constraint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod flops;
pub mod eval;
pub mod memory;
pub mod numeric;
pub mod trainer;

pub use error::{CmsfError, Result};
