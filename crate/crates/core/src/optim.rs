//! Per-module update rules: the spectral sphere step with its Lagrange
//! multiplier solver, plus the Muon, MuonSphere and AdamW baselines.
//!
//! Every step function takes one weight and the state it owns. Nothing here
//! touches another module's state, so distinct modules can be stepped in
//! parallel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matlin::{frobenius_norm, msign_with, power_iteration, Matrix, MsignSchedule, PowerIterConfig, PowerIteration};
use crate::spectral_geom::{lr_scaler, retract_dynamic, retract_hard, tangent_projector, RadiusSpec, ScalerKind};

/// Momentum plus the cached top singular vectors of the weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub momentum: Matrix,
    pub cached_u: Option<Vec<f64>>,
    pub cached_v: Option<Vec<f64>>,
    pub step_count: u64,
    /// Second moment, only populated by AdamW.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_moment: Option<Matrix>,
}

impl OptimizerState {
    pub fn new(rows: usize, cols: usize) -> Self {
        OptimizerState {
            momentum: Matrix::zeros(rows, cols),
            cached_u: None,
            cached_v: None,
            step_count: 0,
            second_moment: None,
        }
    }

    /// Clears moments and the step count; the singular-vector cache belongs
    /// to the weight and is kept.
    pub fn reset_moments(&mut self) {
        let (r, c) = self.momentum.shape();
        self.momentum = Matrix::zeros(r, c);
        self.step_count = 0;
        self.second_moment = None;
    }

    fn check_shape(&self, w: &Matrix, g: &Matrix) -> Result<()> {
        if w.shape() != g.shape() || self.momentum.shape() != w.shape() {
            return Err(Error::ShapeMismatch(format!(
                "weight {:?}, gradient {:?}, momentum {:?}",
                w.shape(),
                g.shape(),
                self.momentum.shape()
            )));
        }
        Ok(())
    }

    /// EMA update of the momentum; returns the direction fed to msign.
    fn update_momentum(&mut self, g: &Matrix, beta: f64, nesterov: bool) -> Matrix {
        self.momentum.scale_in_place(beta);
        self.momentum.axpy(1.0 - beta, g);
        if nesterov {
            let mut d = self.momentum.scale(beta);
            d.axpy(1.0 - beta, g);
            d
        } else {
            self.momentum.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retraction {
    #[default]
    Hard,
    Dynamic { lambda_wd: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsoConfig {
    pub eta: f64,
    pub beta: f64,
    pub nesterov: bool,
    pub msign_iters: usize,
    pub msign_schedule: MsignSchedule,
    pub solver_tol: f64,
    pub solver_max_iters: usize,
    pub retraction: Retraction,
    pub radius_c: f64,
    /// Update scale; the sphere radius always uses `c * sqrt(d_out / d_in)`.
    pub scaler: ScalerKind,
    pub power: PowerIterConfig,
}

impl Default for SsoConfig {
    fn default() -> Self {
        SsoConfig {
            eta: 0.02,
            beta: 0.9,
            nesterov: true,
            msign_iters: 8,
            msign_schedule: MsignSchedule::PolarExpress,
            solver_tol: 2e-4,
            solver_max_iters: 20,
            retraction: Retraction::Hard,
            radius_c: 2.0,
            scaler: ScalerKind::SpectralMup,
            power: PowerIterConfig::default(),
        }
    }
}

impl SsoConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.eta > 0.0
            && self.eta.is_finite()
            && (0.0..1.0).contains(&self.beta)
            && self.msign_iters > 0
            && self.solver_tol > 0.0
            && self.solver_max_iters > 0
            && self.radius_c > 0.0
            && self.power.tol > 0.0
            && self.power.cold_max_iters > 0
            && self.power.warm_max_iters > 0
            && match self.retraction {
                Retraction::Hard => true,
                Retraction::Dynamic { lambda_wd } => lambda_wd >= 0.0,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(format!("sphere optimizer settings out of range: {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MuonConfig {
    pub eta: f64,
    pub beta: f64,
    pub nesterov: bool,
    pub msign_iters: usize,
    pub msign_schedule: MsignSchedule,
    pub weight_decay: f64,
    pub scaler: ScalerKind,
}

impl Default for MuonConfig {
    fn default() -> Self {
        MuonConfig {
            eta: 0.02,
            beta: 0.9,
            nesterov: true,
            msign_iters: 8,
            msign_schedule: MsignSchedule::PolarExpress,
            weight_decay: 0.1,
            scaler: ScalerKind::SpectralMup,
        }
    }
}

impl MuonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta > 0.0 && (0.0..1.0).contains(&self.beta) && self.msign_iters > 0 && self.weight_decay >= 0.0 {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(format!("muon settings out of range: {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            eta: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
        {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(format!("adamw settings out of range: {self:?}")))
        }
    }
}

// ---------------------------------------------------------------------------
// Lagrange multiplier
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub lambda_star: f64,
    /// `|h(lambda_star)|`.
    pub residual: f64,
    pub bracket_steps: usize,
    pub bisect_steps: usize,
    /// The root sits on a discontinuity of `h` (or `G + lambda Theta` vanished).
    pub degenerate: bool,
    /// The evaluation budget ran out before the residual met the tolerance.
    pub exhausted: bool,
}

impl SolveReport {
    pub fn iterations(&self) -> usize {
        self.bracket_steps + self.bisect_steps
    }
}

/// `h(lambda) = <Theta, msign(M_hat + lambda Theta)>`.
pub fn h_eval(m_hat: &Matrix, theta: &Matrix, lambda: f64, msign_iters: usize) -> Result<f64> {
    h_eval_with(m_hat, theta, lambda, msign_iters, MsignSchedule::default()).map(|(h, _)| h)
}

/// Returns `h(lambda)` together with the msign it was computed from.
pub fn h_eval_with(
    m_hat: &Matrix,
    theta: &Matrix,
    lambda: f64,
    msign_iters: usize,
    schedule: MsignSchedule,
) -> Result<(f64, Matrix)> {
    if m_hat.shape() != theta.shape() {
        return Err(Error::ShapeMismatch(format!(
            "momentum {:?} vs projector {:?}",
            m_hat.shape(),
            theta.shape()
        )));
    }
    let mut x = m_hat.clone();
    x.axpy(lambda, theta);
    let scale = frobenius_norm(m_hat).max(lambda.abs() * frobenius_norm(theta));
    if frobenius_norm(&x) <= 1e-12 * scale {
        return Err(Error::ZeroOperand(lambda));
    }
    let phi = msign_with(&x, msign_iters, schedule)?;
    Ok((theta.inner(&phi), phi))
}

struct Probe {
    lambda: f64,
    h: f64,
    phi: Matrix,
    zero_operand: bool,
}

fn probe(m_hat: &Matrix, theta: &Matrix, lambda: f64, cfg: &SsoConfig) -> Result<Probe> {
    match h_eval_with(m_hat, theta, lambda, cfg.msign_iters, cfg.msign_schedule) {
        Ok((h, phi)) => Ok(Probe { lambda, h, phi, zero_operand: false }),
        // msign(0) = 0, so h is exactly zero there.
        Err(Error::ZeroOperand(_)) => Ok(Probe {
            lambda,
            h: 0.0,
            phi: Matrix::zeros(m_hat.rows(), m_hat.cols()),
            zero_operand: true,
        }),
        Err(e) => Err(e),
    }
}

/// Root of the monotone `h` by geometric bracketing from zero followed by
/// bisection.
pub fn solve_lambda(m_hat: &Matrix, theta: &Matrix, cfg: &SsoConfig) -> Result<SolveReport> {
    solve_lambda_direction(m_hat, theta, cfg).map(|(r, _)| r)
}

/// As [`solve_lambda`], also returning `Phi = msign(M_hat + lambda* Theta)`.
pub fn solve_lambda_direction(m_hat: &Matrix, theta: &Matrix, cfg: &SsoConfig) -> Result<(SolveReport, Matrix)> {
    let tol = cfg.solver_tol;
    let budget = cfg.solver_max_iters;
    let finish = |p: Probe, bracket_steps, bisect_steps, degenerate: bool, exhausted| {
        (
            SolveReport {
                lambda_star: p.lambda,
                residual: p.h.abs(),
                bracket_steps,
                bisect_steps,
                degenerate: degenerate || p.zero_operand,
                exhausted,
            },
            p.phi,
        )
    };

    let origin = probe(m_hat, theta, 0.0, cfg)?;
    if origin.h.abs() <= tol {
        return Ok(finish(origin, 0, 0, false, false));
    }

    let fro = frobenius_norm(m_hat);
    let k = m_hat.rows().min(m_hat.cols()) as f64;
    // 2 * (sqrt(k) ||M||_F) >= 2 ||M||_*, which contains every root.
    let bound = 2.0 * k.sqrt() * fro;
    let dir = -origin.h.signum();
    let mut width = 0.1 * fro;
    let mut bracket_steps = 0;
    let mut inner = origin;
    let outer = loop {
        if bracket_steps == budget {
            return Ok(finish(inner, bracket_steps, 0, false, true));
        }
        let lambda = dir * width.min(bound);
        let p = probe(m_hat, theta, lambda, cfg)?;
        bracket_steps += 1;
        if p.h.abs() <= tol {
            return Ok(finish(p, bracket_steps, 0, false, false));
        }
        if p.h.signum() != inner.h.signum() {
            break p;
        }
        if width >= bound {
            // No sign change inside the localization interval; only possible
            // when msign is too inexact to resolve h.
            let best = if p.h.abs() < inner.h.abs() { p } else { inner };
            return Ok(finish(best, bracket_steps, 0, false, true));
        }
        inner = p;
        width *= 2.0;
    };

    let (mut lo, mut hi) = if inner.h < 0.0 { (inner, outer) } else { (outer, inner) };
    let mut bisect_steps = 0;
    loop {
        if (hi.lambda - lo.lambda).abs() < 1e-12 {
            let mid = 0.5 * (lo.lambda + hi.lambda);
            let p = probe(m_hat, theta, mid, cfg)?;
            return Ok(finish(p, bracket_steps, bisect_steps, true, false));
        }
        if bracket_steps + bisect_steps >= budget {
            let best = if lo.h.abs() <= hi.h.abs() { lo } else { hi };
            let exhausted = best.h.abs() > tol;
            return Ok(finish(best, bracket_steps, bisect_steps, false, exhausted));
        }
        let mid = 0.5 * (lo.lambda + hi.lambda);
        let p = probe(m_hat, theta, mid, cfg)?;
        bisect_steps += 1;
        if p.h.abs() <= tol {
            return Ok(finish(p, bracket_steps, bisect_steps, false, false));
        }
        if p.h < 0.0 {
            lo = p;
        } else {
            hi = p;
        }
    }
}

// ---------------------------------------------------------------------------
// Sphere steps
// ---------------------------------------------------------------------------

/// How the multiplier is chosen in [`sphere_step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaRule {
    Solve,
    Fixed(f64),
}

/// What one sphere step did to one module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphereStepInfo {
    /// Top singular value of the incoming weight, before retraction.
    pub sigma_before: f64,
    pub power_iters: usize,
    pub power_converged: bool,
    pub lambda_star: f64,
    pub solve: Option<SolveReport>,
    /// `<Theta, Phi>`.
    pub tangency: f64,
    /// `eta * update scale`; `||Delta W||_2 = step_size * ||Phi||_2`.
    pub step_size: f64,
    /// Zero momentum (nothing to descend along) or a vanishing msign operand.
    pub degenerate: bool,
}

impl SphereStepInfo {
    pub fn solver_iters(&self) -> usize {
        self.solve.map_or(0, |s| s.iterations())
    }
}

fn top_triplet(w: &Matrix, state: &OptimizerState, cfg: &PowerIterConfig) -> Result<PowerIteration> {
    match (&state.cached_u, &state.cached_v) {
        (Some(u), Some(v)) => {
            let warm = power_iteration(w, Some((u, v)), cfg.warm_max_iters, cfg.tol)?;
            if warm.converged {
                return Ok(warm);
            }
            let t = &warm.triplet;
            let more = power_iteration(w, Some((&t.u, &t.v)), cfg.fallback_max_iters, cfg.tol)?;
            Ok(PowerIteration {
                iterations: warm.iterations + more.iterations,
                ..more
            })
        }
        _ => power_iteration(w, None, cfg.cold_max_iters, cfg.tol),
    }
}

/// Shared body of the sphere optimizers: momentum, power iteration,
/// retraction (applied before the update), multiplier, `W - eta s Phi`.
pub fn sphere_step(
    w: &Matrix,
    g: &Matrix,
    state: &mut OptimizerState,
    cfg: &SsoConfig,
    radius: &RadiusSpec,
    rule: LambdaRule,
) -> Result<(Matrix, SphereStepInfo)> {
    state.check_shape(w, g)?;
    if (radius.d_out, radius.d_in) != w.shape() {
        return Err(Error::ShapeMismatch(format!(
            "radius spec {}x{} for weight {:?}",
            radius.d_out,
            radius.d_in,
            w.shape()
        )));
    }
    let dir = state.update_momentum(g, cfg.beta, cfg.nesterov);
    state.step_count += 1;

    let pi = top_triplet(w, state, &cfg.power)?;
    let theta = tangent_projector(&pi.triplet);
    let sigma = pi.triplet.sigma;
    let r = radius.radius();
    let retracted = match cfg.retraction {
        Retraction::Hard => retract_hard(w, sigma, r)?,
        Retraction::Dynamic { lambda_wd } => retract_dynamic(w, sigma, r, lambda_wd, cfg.eta),
    };
    state.cached_u = Some(pi.triplet.u.clone());
    state.cached_v = Some(pi.triplet.v.clone());

    let step_size = cfg.eta * radius.c * lr_scaler(cfg.scaler, radius.d_out, radius.d_in);
    let mut info = SphereStepInfo {
        sigma_before: sigma,
        power_iters: pi.iterations,
        power_converged: pi.converged,
        lambda_star: 0.0,
        solve: None,
        tangency: 0.0,
        step_size,
        degenerate: false,
    };

    let fro = frobenius_norm(&dir);
    if fro == 0.0 {
        info.degenerate = true;
        return Ok((retracted, info));
    }
    let m_hat = dir.scale(1.0 / fro);

    let phi = match rule {
        LambdaRule::Solve => {
            let (report, phi) = solve_lambda_direction(&m_hat, &theta, cfg)?;
            info.lambda_star = report.lambda_star;
            info.degenerate = report.degenerate;
            info.solve = Some(report);
            phi
        }
        LambdaRule::Fixed(lambda) => {
            match h_eval_with(&m_hat, &theta, lambda, cfg.msign_iters, cfg.msign_schedule) {
                Ok((_, phi)) => {
                    info.lambda_star = lambda;
                    phi
                }
                Err(Error::ZeroOperand(_)) => {
                    info.degenerate = true;
                    Matrix::zeros(w.rows(), w.cols())
                }
                Err(e) => return Err(e),
            }
        }
    };
    info.tangency = theta.inner(&phi);
    let mut next = retracted;
    next.axpy(-step_size, &phi);
    Ok((next, info))
}

/// Steepest descent on the spectral sphere.
pub fn sso_step(
    w: &Matrix,
    g: &Matrix,
    state: &mut OptimizerState,
    cfg: &SsoConfig,
    radius: &RadiusSpec,
) -> Result<(Matrix, SphereStepInfo)> {
    sphere_step(w, g, state, cfg, radius, LambdaRule::Solve)
}

/// Retract onto the sphere, then take a plain msign step (`lambda = 0`).
pub fn muon_sphere_step(
    w: &Matrix,
    g: &Matrix,
    state: &mut OptimizerState,
    cfg: &SsoConfig,
    radius: &RadiusSpec,
) -> Result<(Matrix, SphereStepInfo)> {
    sphere_step(w, g, state, cfg, radius, LambdaRule::Fixed(0.0))
}

/// `W <- (1 - eta wd) W - eta s msign(M)`, no constraint on `W`.
pub fn muon_step(w: &Matrix, g: &Matrix, state: &mut OptimizerState, cfg: &MuonConfig) -> Result<Matrix> {
    state.check_shape(w, g)?;
    let dir = state.update_momentum(g, cfg.beta, cfg.nesterov);
    state.step_count += 1;
    let phi = msign_with(&dir, cfg.msign_iters, cfg.msign_schedule)?;
    let scale = lr_scaler(cfg.scaler, w.rows(), w.cols());
    let mut next = w.scale(1.0 - cfg.eta * cfg.weight_decay);
    next.axpy(-cfg.eta * scale, &phi);
    Ok(next)
}

/// Adam with decoupled weight decay and bias correction.
pub fn adamw_step(w: &Matrix, g: &Matrix, state: &mut OptimizerState, cfg: &AdamWConfig) -> Matrix {
    state.check_shape(w, g).expect("adamw shapes");
    state.step_count += 1;
    let t = state.step_count as i32;
    let v = state
        .second_moment
        .get_or_insert_with(|| Matrix::zeros(w.rows(), w.cols()));
    let m = &mut state.momentum;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.eta * cfg.weight_decay;
    let mut next = w.clone();
    let out = next.as_mut_slice();
    let (ms, vs) = (m.as_mut_slice(), v.as_mut_slice());
    for (i, &gi) in g.as_slice().iter().enumerate() {
        ms[i] = cfg.beta1 * ms[i] + (1.0 - cfg.beta1) * gi;
        vs[i] = cfg.beta2 * vs[i] + (1.0 - cfg.beta2) * gi * gi;
        let mh = ms[i] / bc1;
        let vh = vs[i] / bc2;
        out[i] = out[i] * decay - cfg.eta * mh / (vh.sqrt() + cfg.eps);
    }
    next
}
