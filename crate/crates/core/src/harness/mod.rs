//! Desk-scale experiments: toy models, synthetic data, metric logging, width
//! sweeps and the MoE scaling-factor estimator.

pub mod data;
pub mod metrics;
pub mod models;
pub mod moe;
pub mod sweep;
pub mod train;

use crate::error::Result;
use crate::matlin::{norm2, spectral_norm, Matrix};

pub use data::{Batch, DataStream, TaskKind, ToyTask};
pub use metrics::{ModuleMetrics, StepMetrics};
pub use models::{evaluate, ActivationStat};
pub use moe::{moe_scaling_factor, MoeEstimate};
pub use sweep::{width_sweep, SweepCell, SweepReport};
pub use train::{run_training, LrSchedule, OptimSettings, RunConfig, RunReport};

/// `||x||_2 / sqrt(dim)`.
pub fn activation_rms(x: &[f64]) -> f64 {
    assert!(!x.is_empty(), "rms of an empty vector");
    norm2(x) / (x.len() as f64).sqrt()
}

/// Operator norm from RMS to RMS: `||W||_2 * sqrt(d_in / d_out)`.
pub fn rms_to_rms_gain(w: &Matrix) -> Result<f64> {
    Ok(spectral_norm(w)? * (w.cols() as f64 / w.rows() as f64).sqrt())
}
