//! Hamiltonian tomography of a four-level quantum system from sampled
//! population dynamics.

pub mod bayes;
pub mod control;
pub mod error;
pub mod model;
pub mod optim;
pub mod propagate;
pub mod reconstruct;
pub mod sim;
pub mod spectral;

pub use error::{Result, TomographyError};
