//! Monte Carlo estimate of the shared-expert scaling factor of an MoE layer
//! with sigmoid routing and renormalized top-k scores.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub trials: usize,
}

pub const MIN_TRIALS: usize = 1000;

/// Mean of `sqrt(n_shared) / ||g||_2` where `g` is the top-`k_routed` of
/// `n_total - n_shared` sigmoid scores of standard-normal logits, divided by
/// their sum.
pub fn moe_scaling_factor(n_total: usize, k_routed: usize, n_shared: usize, trials: usize, seed: u64) -> Result<MoeEstimate> {
    if n_shared >= n_total {
        return Err(Error::ConfigInvalid(format!("n_shared {n_shared} must be below n_total {n_total}")));
    }
    let routed = n_total - n_shared;
    if k_routed == 0 || k_routed >= routed {
        return Err(Error::ConfigInvalid(format!(
            "k_routed must be in 1..{routed}, got {k_routed}"
        )));
    }
    if trials < MIN_TRIALS {
        return Err(Error::ConfigInvalid(format!("need at least {MIN_TRIALS} trials, got {trials}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shared = (n_shared as f64).sqrt();
    let mut scores = vec![0.0f64; routed];
    let (mut sum, mut sumsq) = (0.0, 0.0);
    for _ in 0..trials {
        for s in scores.iter_mut() {
            let logit: f64 = StandardNormal.sample(&mut rng);
            *s = 1.0 / (1.0 + (-logit).exp());
        }
        scores.sort_unstable_by(|a, b| b.total_cmp(a));
        let top = &scores[..k_routed];
        let total: f64 = top.iter().sum();
        let magnitude = top.iter().map(|g| (g / total).powi(2)).sum::<f64>().sqrt();
        let f = shared / magnitude;
        sum += f;
        sumsq += f * f;
    }
    let n = trials as f64;
    let mean = sum / n;
    let var = ((sumsq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(MoeEstimate {
        mean,
        std_error: (var / n).sqrt(),
        trials,
    })
}
