//! Width x learning-rate grids.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::granularity::{init_registry, ArchConfig, InitOptions};
use crate::harness::data::ToyTask;
use crate::harness::train::{run_training, RunConfig};

/// Probe whose RMS series is kept for every cell.
pub const SWEEP_PROBE: &str = "ffn_pre";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub width: usize,
    pub eta: f64,
    pub final_loss: Option<f64>,
    pub diverged: bool,
    pub error: Option<String>,
    pub rms_series: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
    /// `(width, eta with the lowest final loss)`; `None` when every cell failed.
    pub best_eta: Vec<(usize, Option<f64>)>,
}

impl SweepReport {
    pub fn succeeded(&self) -> usize {
        self.cells.iter().filter(|c| c.final_loss.is_some()).count()
    }

    /// `width,eta,final_loss,diverged,init_rms,last_rms,error` with one row per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("width,eta,final_loss,diverged,init_rms,last_rms,error\n");
        for c in &self.cells {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.width,
                c.eta,
                opt(c.final_loss),
                c.diverged,
                opt(c.rms_series.first().copied()),
                opt(c.rms_series.last().copied()),
                c.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
            ));
        }
        out
    }
}

/// Trains one fresh model per `(width, eta)` cell. Cells run in parallel and
/// share seeds; a failing cell is recorded and the grid carries on.
pub fn width_sweep(
    widths: &[usize],
    etas: &[f64],
    task: &ToyTask,
    arch: &ArchConfig,
    init: &InitOptions,
    run: &RunConfig,
) -> Result<SweepReport> {
    if widths.is_empty() || etas.is_empty() {
        return Err(Error::ConfigInvalid("sweep needs at least one width and one eta".into()));
    }
    if widths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::ConfigInvalid("sweep widths must be strictly ascending".into()));
    }
    let grid: Vec<(usize, f64)> = widths.iter().flat_map(|&w| etas.iter().map(move |&e| (w, e))).collect();
    let cells: Vec<SweepCell> = grid
        .par_iter()
        .map(|&(width, eta)| {
            let mut cell = SweepCell {
                width,
                eta,
                final_loss: None,
                diverged: false,
                error: None,
                rms_series: Vec::new(),
            };
            let outcome = arch.with_width(width).and_then(|a| {
                let mut reg = init_registry(&a, init)?;
                let cfg = RunConfig {
                    optim: run.optim.with_eta(eta),
                    schedule: run.schedule,
                    output: None,
                };
                run_training(task, &a, &mut reg, &cfg)
            });
            match outcome {
                Ok(rep) => {
                    cell.rms_series = rep
                        .metrics
                        .iter()
                        .filter_map(|m| m.activations.get(SWEEP_PROBE).map(|s| s.rms))
                        .collect();
                    cell.final_loss = Some(rep.final_loss);
                }
                Err(e) => {
                    cell.diverged = matches!(e.root(), Error::DivergenceDetected { .. });
                    cell.error = Some(e.to_string());
                }
            }
            cell
        })
        .collect();
    let best_eta = widths
        .iter()
        .map(|&w| {
            let best = cells
                .iter()
                .filter(|c| c.width == w)
                .filter_map(|c| c.final_loss.map(|l| (l, c.eta)))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .map(|(_, e)| e);
            (w, best)
        })
        .collect();
    Ok(SweepReport { cells, best_eta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::granularity::{init_registry, Activation};
    use crate::harness::train::OptimSettings;

    fn arch() -> ArchConfig {
        ArchConfig::Mlp { d_in: 8, d_hidden: 16, d_out: 2, activation: Activation::Relu }
    }

    fn task() -> ToyTask {
        ToyTask { batch_size: 8, steps: 15, ..ToyTask::default() }
    }

    #[test]
    fn one_by_one_grid_matches_a_single_run() {
        let run = RunConfig::default();
        let rep = width_sweep(&[16], &[0.03], &task(), &arch(), &InitOptions::default(), &run).unwrap();
        let mut reg = init_registry(&arch(), &InitOptions::default()).unwrap();
        let cfg = RunConfig { optim: run.optim.with_eta(0.03), ..RunConfig::default() };
        let single = run_training(&task(), &arch(), &mut reg, &cfg).unwrap();
        assert_eq!(rep.cells.len(), 1);
        assert_eq!(rep.cells[0].final_loss, Some(single.final_loss));
        assert_eq!(rep.best_eta, vec![(16, Some(0.03))]);
    }

    #[test]
    fn failing_cells_do_not_abort() {
        let run = RunConfig {
            optim: OptimSettings { kind: crate::granularity::OptimizerKind::AdamW, ..OptimSettings::default() },
            ..RunConfig::default()
        };
        let t = ToyTask { steps: 200, ..task() };
        let rep = width_sweep(&[8, 16], &[1e-3, 10.0], &t, &arch(), &InitOptions::default(), &run).unwrap();
        assert_eq!(rep.cells.len(), 4);
        assert!(rep.cells.iter().filter(|c| c.eta == 10.0).all(|c| c.diverged));
        assert_eq!(rep.succeeded(), 2);
        assert_eq!(rep.to_csv().lines().count(), 5);
    }

    #[test]
    fn widths_must_ascend() {
        let run = RunConfig::default();
        assert!(width_sweep(&[16, 8], &[0.1], &task(), &arch(), &InitOptions::default(), &run).is_err());
    }
}
