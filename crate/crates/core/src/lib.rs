//! Simulation of spectral-bandwidth loss in OCT and adversarial recovery of
//! axial resolution in the spatial and spectral domains.

pub mod array;
pub mod autodiff;
pub mod config;
mod bytes;
pub mod error;
pub mod io;
pub mod metrics;
pub mod models;
pub mod phantom;
pub mod pipeline;
pub mod signal;
pub mod train;

pub use array::Array2;
pub use error::{Error, Result};
