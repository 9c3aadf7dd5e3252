use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MergeError, Result};
use crate::nn::{per_sample_grad_squares, predict_probs, Matrix, Objective, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FisherConfig {
    /// Rows of the unlabeled batch used (all rows when larger).
    pub num_samples: usize,
    pub floor: f64,
    /// Seed for the labels sampled from the model's own predictive
    /// distribution.
    pub seed: u64,
}

impl Default for FisherConfig {
    fn default() -> Self {
        FisherConfig {
            num_samples: 1600,
            floor: 1e-6,
            seed: 0,
        }
    }
}

/// Draws one label from each row of `probs`.
fn sample_labels(probs: &Matrix, rng: &mut impl Rng) -> Vec<usize> {
    (0..probs.rows)
        .map(|r| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let row = probs.row(r);
            for (c, p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    return c;
                }
            }
            row.len() - 1
        })
        .collect()
}

/// Diagonal empirical Fisher with model-sampled labels.
///
/// Per-parameter mean of `(∂ ln q(ŷ|x) / ∂θ)²` with `ŷ ~ q(·|x)`. The result
/// is rescaled to mean 1 (skipped when it is identically zero) and then
/// floored, so every entry is at least `cfg.floor`.
pub fn estimate_diag_fisher(
    theta: &ParamSet,
    inputs: &Matrix,
    cfg: &FisherConfig,
) -> Result<ParamSet> {
    if !(cfg.floor > 0.0) {
        return Err(MergeError::InvalidConfig("fisher floor must be > 0".into()));
    }
    let n = cfg.num_samples.min(inputs.rows);
    if n == 0 {
        return Err(MergeError::Empty("fisher estimation batch"));
    }
    let x = inputs.slice_rows(0, n);
    let probs = predict_probs(theta, &x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let labels = sample_labels(&probs, &mut rng);
    let sq = per_sample_grad_squares(theta, &x, Objective::CrossEntropy(&labels))?;
    let fisher = sq.scale(1.0 / n as f64);
    let mean = fisher.flatten().iter().sum::<f64>() / fisher.num_params() as f64;
    let normalised = if mean > 0.0 {
        fisher.scale(1.0 / mean)
    } else {
        fisher
    };
    Ok(normalised.map(|v| v.max(cfg.floor)))
}

/// `(Σ_t F_t ⊙ θ_t) ⊘ (Σ_t F_t)`.
pub fn fisher_merge(thetas: &[ParamSet], fishers: &[ParamSet]) -> Result<ParamSet> {
    let first = thetas
        .first()
        .ok_or(MergeError::Empty("fisher_merge needs models"))?;
    if fishers.len() != thetas.len() {
        return Err(MergeError::Dimension(format!(
            "{} fisher sets for {} models",
            fishers.len(),
            thetas.len()
        )));
    }
    let mut num = first.zeros_like();
    let mut den = first.zeros_like();
    for (theta, f) in thetas.iter().zip(fishers) {
        num.axpy(1.0, &theta.zip_with(f, |a, b| a * b)?)?;
        den.axpy(1.0, f)?;
    }
    num.zip_with(&den, |a, b| a / b)
}
