//! File formats, baselines, the experiment matrix and the command-line
//! front end for physics-regularized GP traffic state estimation. The
//! numerical core lives in `prgp-core`.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod dataio;
pub mod error;
pub mod eval;

pub use error::{AppError, Result};
