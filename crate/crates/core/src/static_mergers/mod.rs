//! Data-free and closed-form data-dependent merging baselines.

mod fisher;
mod regmean;
mod ties;

pub use fisher::{estimate_diag_fisher, fisher_merge, FisherConfig};
pub use regmean::{collect_gram_stats, regmean_merge, GramStats, RegMeanConfig};
pub use ties::{ties_merge, TiesConfig};

use crate::error::{MergeError, Result};
use crate::nn::ParamSet;
use crate::task_vectors::TaskVector;

/// Default task-arithmetic scale for eight-task pools.
pub const TASK_ARITHMETIC_SCALE: f64 = 0.2;

/// Element-wise mean of the models.
pub fn simple_average(thetas: &[ParamSet]) -> Result<ParamSet> {
    let first = thetas
        .first()
        .ok_or(MergeError::Empty("simple_average needs at least one model"))?;
    let mut acc = first.zeros_like();
    for t in thetas {
        acc.axpy(1.0, t)?;
    }
    Ok(acc.scale(1.0 / thetas.len() as f64))
}

/// `θ₀ + scale · Σ_t τ_t`.
pub fn task_arithmetic(theta_0: &ParamSet, taus: &[TaskVector], scale: f64) -> Result<ParamSet> {
    let mut out = theta_0.clone();
    for tau in taus {
        out.axpy(scale, &tau.deltas)?;
    }
    Ok(out)
}
