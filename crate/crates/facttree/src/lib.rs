//! Files, checkpoints and the command line around `facttree-core`.

pub mod ckpt;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod kgio;

pub use error::{Error, Result};
