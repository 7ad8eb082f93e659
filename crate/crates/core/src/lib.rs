//! Physics-regularized Gaussian processes for macroscopic traffic state
//! estimation.
//!
//! Each traffic output (flow, speed, density) is modelled by an exact GP over
//! standardized space-time inputs. During training a *shadow* GP is placed over
//! the residuals of a traffic-flow PDE (LWR, PW, ARZ, or a heat-equation
//! control) evaluated on reparameterized posterior samples at randomly drawn
//! pseudo-points; its log-density regularizes the kernel hyperparameters and
//! the physical parameters jointly through a stochastic evidence lower bound.
//!
//! The crate is `no_std` and only needs an allocator. File formats, the CLI and
//! the experiment matrix live in the `prgp` companion crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod error;
pub mod gp;
pub mod kernel;
pub mod linalg;
mod math;
pub mod metrics;
pub mod physics;
pub mod rng;
pub mod simulate;
pub mod trainer;

pub use error::{Error, Result};
