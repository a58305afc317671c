//! Geometry of the spectral sphere `{W : ||W||_2 = R}`: radii, learning-rate
//! scalers, initialization on the sphere, the tangent projector and the two
//! retraction maps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matlin::{power_iteration, Matrix, SpectralTriplet};

/// Target radius `R = c * sqrt(d_out / d_in)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiusSpec {
    pub c: f64,
    pub d_out: usize,
    pub d_in: usize,
}

impl RadiusSpec {
    pub fn new(c: f64, d_out: usize, d_in: usize) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) || d_out == 0 || d_in == 0 {
            return Err(Error::ConfigInvalid(format!(
                "radius needs c > 0 and positive dims, got c={c}, {d_out}x{d_in}"
            )));
        }
        Ok(RadiusSpec { c, d_out, d_in })
    }

    pub fn radius(&self) -> f64 {
        self.c * (self.d_out as f64 / self.d_in as f64).sqrt()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalerKind {
    #[default]
    SpectralMup,
    AlignAdamRms,
    SpectralKaiming,
}

/// Per-module update scale.
pub fn lr_scaler(kind: ScalerKind, d_out: usize, d_in: usize) -> f64 {
    let (o, i) = (d_out as f64, d_in as f64);
    match kind {
        ScalerKind::SpectralMup => (o / i).sqrt(),
        ScalerKind::AlignAdamRms => 0.2 * o.max(i).sqrt(),
        ScalerKind::SpectralKaiming => (o / i).max(1.0).sqrt(),
    }
}

/// Default pre-projection Gaussian std.
pub const INIT_STD: f64 = 0.02;

const INIT_RESAMPLES: u64 = 8;

/// Gaussian draw projected onto the sphere of the given radius. Deterministic
/// in `seed`; a degenerate draw is resampled with `seed + 1`.
pub fn spectral_init(
    d_out: usize,
    d_in: usize,
    radius: &RadiusSpec,
    sigma_gauss: f64,
    seed: u64,
) -> Result<Matrix> {
    spectral_init_with_triplet(d_out, d_in, radius, sigma_gauss, seed).map(|(w, _)| w)
}

/// [`spectral_init`] that also returns the top singular triplet of the
/// result, ready to warm-start the first power iteration.
pub fn spectral_init_with_triplet(
    d_out: usize,
    d_in: usize,
    radius: &RadiusSpec,
    sigma_gauss: f64,
    seed: u64,
) -> Result<(Matrix, SpectralTriplet)> {
    if !(sigma_gauss > 0.0 && sigma_gauss.is_finite()) {
        return Err(Error::ConfigInvalid(format!(
            "init std must be positive, got {sigma_gauss}"
        )));
    }
    let r = radius.radius();
    let mut last = 0.0;
    for attempt in 0..INIT_RESAMPLES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt));
        let w = Matrix::random_normal(d_out, d_in, sigma_gauss, &mut rng);
        let triplet = match power_iteration(&w, None, 3000, 1e-9) {
            Ok(p) => p.triplet,
            Err(Error::ZeroMatrix) => SpectralTriplet {
                sigma: 0.0,
                u: Vec::new(),
                v: Vec::new(),
            },
            Err(e) => return Err(e),
        };
        let sigma = triplet.sigma;
        if sigma >= 1e-12 {
            return Ok((w.scale(r / sigma), SpectralTriplet { sigma: r, ..triplet }));
        }
        log::warn!("degenerate init draw (sigma={sigma:e}) for seed {}, resampling", seed + attempt);
        last = sigma;
    }
    Err(Error::DegenerateDraw(last))
}

/// `Theta = u v^T`, the gradient of `||W||_2` at the matrix the triplet came from.
pub fn tangent_projector(t: &SpectralTriplet) -> Matrix {
    Matrix::outer(&t.u, &t.v)
}

/// Exact projection `W * R / sigma`.
pub fn retract_hard(w: &Matrix, sigma: f64, radius: f64) -> Result<Matrix> {
    if !(sigma > 0.0) {
        return Err(Error::NonPositiveSigma(sigma));
    }
    if sigma == radius {
        return Ok(w.clone());
    }
    Ok(w.scale(radius / sigma))
}

/// Soft radial correction `(1 + lambda_wd * eta * sign(R - sigma)) W`.
/// `sign(0) = 0`, so a matrix already on the sphere is returned unchanged.
pub fn retract_dynamic(w: &Matrix, sigma: f64, radius: f64, lambda_wd: f64, eta: f64) -> Matrix {
    let diff = radius - sigma;
    let sign = if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    };
    if sign == 0.0 {
        return w.clone();
    }
    w.scale(1.0 + lambda_wd * eta * sign)
}
