//! Spectral laboratory for the frequency-truncated nonlinear Schrödinger equation on the torus.

pub mod cli;
pub mod config;
pub mod error;
pub mod flow;
pub mod functionals;
pub mod resonance;
pub mod sampler;
pub mod spectral;
pub mod stats;
mod tableau;
pub mod transport;

pub use error::{Error, Result};
pub use spectral::{FourierState, ModelParams};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
