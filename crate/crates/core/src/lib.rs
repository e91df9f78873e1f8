//! Density-constrained dynamic optimal transport.

pub mod cli;
pub mod error;
pub mod gflow;
pub mod grid;
pub mod homog;
pub mod io;
pub mod kinetic;
pub mod membrane;
pub mod solver;
pub(crate) mod spectral;
pub(crate) mod transport;

pub use error::{Error, Result};
