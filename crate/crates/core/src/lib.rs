//! Steepest descent on the spectral sphere, its spectral-norm baselines, and
//! the desk-scale harness used to check them.

pub mod config;
pub mod error;
pub mod granularity;
pub mod harness;
pub mod matlin;
pub mod optim;
pub mod placement;
pub mod spectral_geom;

pub use error::{Error, Result};
pub use matlin::{Matrix, SpectralTriplet};
