//! Training loop over a module registry.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::granularity::{ArchConfig, AtomicModule, OptimizerKind, Registry};
use crate::harness::data::{DataStream, ToyTask};
use crate::harness::metrics::{MetricsSink, ModuleMetrics, StepMetrics};
use crate::harness::models::{evaluate, group_params};
use crate::matlin::{frobenius_norm, power_iteration, Matrix};
use crate::optim::{
    adamw_step, muon_step, sphere_step, AdamWConfig, LambdaRule, MuonConfig, Retraction, SsoConfig,
};
use crate::spectral_geom::{retract_dynamic, retract_hard};

/// Losses above this (or non-finite) stop the run.
pub const DIVERGENCE_LOSS: f64 = 1e6;

const METRIC_POWER_ITERS: usize = 200;
const METRIC_POWER_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSettings {
    /// Optimizer of the hidden (spectral) modules; everything else uses AdamW.
    pub kind: OptimizerKind,
    pub sso: SsoConfig,
    pub muon: MuonConfig,
    pub adamw: AdamWConfig,
}

impl OptimSettings {
    pub fn validate(&self) -> Result<()> {
        self.sso.validate()?;
        self.muon.validate()?;
        self.adamw.validate()
    }

    /// Learning rate of the hidden-module optimizer.
    pub fn eta(&self) -> f64 {
        match self.kind {
            OptimizerKind::Sso | OptimizerKind::MuonSphere => self.sso.eta,
            OptimizerKind::Muon => self.muon.eta,
            OptimizerKind::AdamW => self.adamw.eta,
        }
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        match self.kind {
            OptimizerKind::Sso | OptimizerKind::MuonSphere => self.sso.eta = eta,
            OptimizerKind::Muon => self.muon.eta = eta,
            OptimizerKind::AdamW => self.adamw.eta = eta,
        }
        self
    }
}

/// Linear warmup then optional cosine decay to `final_fraction`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub warmup_steps: usize,
    pub cosine: bool,
    pub final_fraction: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            warmup_steps: 0,
            cosine: false,
            final_fraction: 0.1,
        }
    }
}

impl LrSchedule {
    pub fn multiplier(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return (step + 1) as f64 / self.warmup_steps as f64;
        }
        if !self.cosine {
            return 1.0;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.final_fraction + (1.0 - self.final_fraction) * 0.5 * (1.0 + (PI * progress).cos())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub optim: OptimSettings,
    pub schedule: LrSchedule,
    /// Directory and file stem for the JSONL / CSV metric files.
    pub output: Option<(PathBuf, String)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub metrics: Vec<StepMetrics>,
    /// Loss on a held-out batch after the last step.
    pub final_loss: f64,
}

/// Seed offset of the held-out stream.
const EVAL_SEED_OFFSET: u64 = 0x5EED_0000;

fn diverged(loss: f64) -> bool {
    !loss.is_finite() || loss > DIVERGENCE_LOSS
}

fn top_sigma(w: &Matrix, cache: &mut Option<(Vec<f64>, Vec<f64>)>) -> Result<f64> {
    if w.as_slice().iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let warm = cache.as_ref().map(|(u, v)| (u.as_slice(), v.as_slice()));
    let p = power_iteration(w, warm, METRIC_POWER_ITERS, METRIC_POWER_TOL)?;
    let sigma = p.triplet.sigma;
    *cache = Some((p.triplet.u, p.triplet.v));
    Ok(sigma)
}

fn step_module(
    m: &mut AtomicModule,
    grad: &Matrix,
    settings: &OptimSettings,
    lr_mult: f64,
    cache: &mut Option<(Vec<f64>, Vec<f64>)>,
) -> Result<ModuleMetrics> {
    let radius = m.radius.radius();
    let mut out = ModuleMetrics {
        radius,
        ..ModuleMetrics::default()
    };
    let (applied, next) = match m.optimizer_kind {
        OptimizerKind::Sso | OptimizerKind::MuonSphere => {
            let cfg = SsoConfig {
                eta: settings.sso.eta * lr_mult,
                ..settings.sso
            };
            let rule = if m.optimizer_kind == OptimizerKind::Sso {
                LambdaRule::Solve
            } else {
                LambdaRule::Fixed(0.0)
            };
            let (next, info) = sphere_step(&m.weight, grad, &mut m.state, &cfg, &m.radius, rule)?;
            let applied = match cfg.retraction {
                Retraction::Hard => retract_hard(&m.weight, info.sigma_before, radius)?,
                Retraction::Dynamic { lambda_wd } => {
                    retract_dynamic(&m.weight, info.sigma_before, radius, lambda_wd, cfg.eta)
                }
            };
            out.sigma_before = info.sigma_before;
            out.lambda_star = info.lambda_star;
            out.solver_iters = info.solver_iters();
            out.tangency = info.tangency;
            (applied, next)
        }
        OptimizerKind::Muon => {
            let cfg = MuonConfig {
                eta: settings.muon.eta * lr_mult,
                ..settings.muon
            };
            let next = match muon_step(&m.weight, grad, &mut m.state, &cfg) {
                Ok(n) => n,
                Err(Error::ZeroMatrix) => m.weight.scale(1.0 - cfg.eta * cfg.weight_decay),
                Err(e) => return Err(e),
            };
            (m.weight.clone(), next)
        }
        OptimizerKind::AdamW => {
            let cfg = AdamWConfig {
                eta: settings.adamw.eta * lr_mult,
                ..settings.adamw
            };
            let next = adamw_step(&m.weight, grad, &mut m.state, &cfg);
            (m.weight.clone(), next)
        }
    };
    out.spectral_norm = top_sigma(&applied, cache)?;
    if !m.optimizer_kind.is_sphere() {
        out.sigma_before = out.spectral_norm;
    }
    out.frobenius_norm = frobenius_norm(&applied);
    out.update_spectral_norm = top_sigma(&next.sub(&applied), &mut None)?;
    m.weight = next;
    Ok(out)
}

/// Trains `registry` in place on `task`. Hidden modules use
/// `cfg.optim.kind`; the rest use AdamW. Metrics are written as they are
/// produced when `cfg.output` is set.
pub fn run_training(task: &ToyTask, arch: &ArchConfig, registry: &mut Registry, cfg: &RunConfig) -> Result<RunReport> {
    cfg.optim.validate()?;
    for m in registry.modules.iter_mut().filter(|m| m.is_spectral()) {
        if m.optimizer_kind != cfg.optim.kind {
            m.optimizer_kind = cfg.optim.kind;
            m.state.reset_moments();
        }
    }
    let mut stream = DataStream::new(task, arch)?;
    let mut sink = match &cfg.output {
        Some((dir, name)) => Some(MetricsSink::create(dir, name)?),
        None => None,
    };
    let mut caches: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; registry.modules.len()];
    let mut metrics = Vec::with_capacity(task.steps);

    for step in 0..task.steps {
        let batch = stream.next_batch();
        let eval = evaluate(arch, &group_params(registry), &batch)?;
        if diverged(eval.loss) {
            log::warn!("divergence at step {step}: loss {}", eval.loss);
            return Err(Error::DivergenceDetected { step, loss: eval.loss });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; registry.modules.len()];
        for (group, g) in registry.groups.iter().zip(&eval.grads) {
            for (idx, part) in registry.split_group_grad(group, g)? {
                grads[idx] = Some(part);
            }
        }
        let lr_mult = cfg.schedule.multiplier(step, task.steps);
        let results: Vec<Result<ModuleMetrics>> = registry
            .modules
            .par_iter_mut()
            .zip(grads.into_par_iter())
            .zip(caches.par_iter_mut())
            .map(|((m, g), cache)| {
                let g = g.expect("every module belongs to a group");
                let name = m.name.clone();
                step_module(m, &g, &cfg.optim, lr_mult, cache).map_err(|e| e.in_module(&name))
            })
            .collect();
        let mut per_module = BTreeMap::new();
        for (m, r) in registry.modules.iter().zip(results) {
            per_module.insert(m.name.clone(), r?);
        }
        let record = StepMetrics {
            step,
            loss: eval.loss,
            per_module,
            activations: eval.probes,
        };
        if let Some(s) = sink.as_mut() {
            s.write(&record)?;
        }
        metrics.push(record);
    }

    let held_out = ToyTask {
        seed: task.seed.wrapping_add(EVAL_SEED_OFFSET),
        batch_size: task.batch_size * 4,
        ..task.clone()
    };
    let batch = DataStream::new(&held_out, arch)?.next_batch();
    let final_loss = evaluate(arch, &group_params(registry), &batch)?.loss;
    if diverged(final_loss) {
        return Err(Error::DivergenceDetected {
            step: task.steps,
            loss: final_loss,
        });
    }
    Ok(RunReport { metrics, final_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::granularity::{init_registry, Activation, InitOptions};
    use crate::harness::data::TaskKind;

    fn mlp() -> ArchConfig {
        ArchConfig::Mlp { d_in: 8, d_hidden: 16, d_out: 2, activation: Activation::Relu }
    }

    fn task(steps: usize) -> ToyTask {
        ToyTask { batch_size: 16, steps, ..ToyTask::default() }
    }

    fn run(kind: OptimizerKind, eta: f64, steps: usize) -> Result<RunReport> {
        let mut reg = init_registry(&mlp(), &InitOptions::default())?;
        let cfg = RunConfig {
            optim: OptimSettings { kind, ..OptimSettings::default() }.with_eta(eta),
            ..RunConfig::default()
        };
        run_training(&task(steps), &mlp(), &mut reg, &cfg)
    }

    #[test]
    fn schedule_shapes() {
        let s = LrSchedule { warmup_steps: 4, cosine: true, final_fraction: 0.1 };
        assert_eq!(s.multiplier(0, 104), 0.25);
        assert_eq!(s.multiplier(4, 104), 1.0);
        assert!((s.multiplier(104, 104) - 0.1).abs() < 1e-12);
        assert_eq!(LrSchedule::default().multiplier(50, 100), 1.0);
    }

    #[test]
    fn sso_keeps_spectral_norms_at_radius() {
        let rep = run(OptimizerKind::Sso, 0.02, 40).unwrap();
        for m in &rep.metrics {
            for (name, mm) in &m.per_module {
                assert!((mm.spectral_norm - mm.radius).abs() <= 1e-5 * mm.radius, "{name} step {}", m.step);
                assert!(mm.tangency.abs() <= 5e-4);
            }
        }
        assert!(rep.final_loss < rep.metrics[0].loss);
    }

    #[test]
    fn every_optimizer_reduces_loss() {
        for kind in [OptimizerKind::MuonSphere, OptimizerKind::Muon, OptimizerKind::AdamW] {
            let eta = if kind == OptimizerKind::AdamW { 3e-3 } else { 0.02 };
            let rep = run(kind, eta, 60).unwrap();
            assert!(rep.final_loss < rep.metrics[0].loss, "{kind:?}");
        }
    }

    #[test]
    fn adamw_spectral_norms_move() {
        let rep = run(OptimizerKind::AdamW, 3e-3, 30).unwrap();
        let series: Vec<f64> = rep.metrics.iter().map(|m| m.per_module["layer0"].spectral_norm).collect();
        let mean = series.iter().sum::<f64>() / series.len() as f64;
        let var = series.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / series.len() as f64;
        assert!(var > 0.0);
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let err = run(OptimizerKind::AdamW, 10.0, 200).unwrap_err();
        assert!(matches!(err, Error::DivergenceDetected { .. }), "{err}");
    }

    #[test]
    fn metric_files_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a", "b"] {
            let mut reg = init_registry(&mlp(), &InitOptions::default()).unwrap();
            let cfg = RunConfig {
                output: Some((dir.path().to_path_buf(), name.to_string())),
                ..RunConfig::default()
            };
            run_training(&task(10), &mlp(), &mut reg, &cfg).unwrap();
        }
        for ext in ["jsonl", "csv"] {
            let a = std::fs::read(dir.path().join(format!("a.{ext}"))).unwrap();
            let b = std::fs::read(dir.path().join(format!("b.{ext}"))).unwrap();
            assert_eq!(a, b);
            assert!(!a.is_empty());
        }
    }

    #[test]
    fn transformer_trains_on_text() {
        let arch = ArchConfig::Transformer {
            d_model: 16,
            n_heads: 2,
            head_dim: 8,
            d_ff: 32,
            seq_len: 16,
            split_qkv: true,
            split_gate_up: true,
        };
        let mut reg = init_registry(&arch, &InitOptions::default()).unwrap();
        let t = ToyTask { data: TaskKind::CharLm { corpus: None }, batch_size: 8, steps: 30, seed: 1 };
        let cfg = RunConfig {
            optim: OptimSettings { adamw: AdamWConfig { eta: 1e-2, ..AdamWConfig::default() }, ..OptimSettings::default() },
            ..RunConfig::default()
        };
        let rep = run_training(&t, &arch, &mut reg, &cfg).unwrap();
        assert!(rep.final_loss < rep.metrics[0].loss);
        let m = &rep.metrics[29];
        assert!(m.activations.contains_key("attn_out") && m.activations.contains_key("ffn_hidden"));
        assert!(m.per_module.contains_key("layer0.attn.v.head1"));
    }
}
