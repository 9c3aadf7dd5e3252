use serde::{Deserialize, Serialize};

use crate::error::{MergeError, Result};
use crate::nn::ParamSet;
use crate::task_vectors::TaskVector;

/// Trim / elect-sign / disjoint-mean settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiesConfig {
    /// Fraction of largest-magnitude entries kept in each task vector.
    pub keep_fraction: f64,
    pub scale: f64,
}

impl Default for TiesConfig {
    fn default() -> Self {
        TiesConfig {
            keep_fraction: 0.20,
            scale: 0.4,
        }
    }
}

impl TiesConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(MergeError::InvalidConfig(format!(
                "keep_fraction {} not in (0, 1]",
                self.keep_fraction
            )));
        }
        Ok(())
    }

    /// Number of entries kept out of `n`.
    pub fn kept(&self, n: usize) -> usize {
        let k = (self.keep_fraction * n as f64 - 1e-9).ceil() as usize;
        k.clamp(1, n.max(1))
    }
}

/// Indices of the `k` largest magnitudes; equal magnitudes keep the lower
/// flat index.
pub(crate) fn top_k_mask(v: &[f64], k: usize) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| {
        v[b].abs()
            .partial_cmp(&v[a].abs())
            .expect("finite task vector")
            .then(a.cmp(&b))
    });
    let mut mask = vec![false; v.len()];
    for &i in idx.iter().take(k) {
        mask[i] = true;
    }
    mask
}

pub fn ties_merge(theta_0: &ParamSet, taus: &[TaskVector], cfg: &TiesConfig) -> Result<ParamSet> {
    cfg.validate()?;
    if taus.is_empty() {
        return Err(MergeError::Empty("ties_merge needs task vectors"));
    }
    let n = theta_0.num_params();
    let mut trimmed = Vec::with_capacity(taus.len());
    for tau in taus {
        theta_0.check_shape(&tau.deltas, "ties_merge")?;
        let flat = tau.deltas.flatten();
        let mask = top_k_mask(&flat, cfg.kept(n));
        trimmed.push(
            flat.iter()
                .zip(mask)
                .map(|(v, keep)| if keep { *v } else { 0.0 })
                .collect::<Vec<f64>>(),
        );
    }
    let mut merged = vec![0.0; n];
    for (i, m) in merged.iter_mut().enumerate() {
        let total: f64 = trimmed.iter().map(|t| t[i]).sum();
        if total == 0.0 {
            continue;
        }
        let (mut sum, mut count) = (0.0, 0usize);
        for t in &trimmed {
            let v = t[i];
            if v != 0.0 && (v > 0.0) == (total > 0.0) {
                sum += v;
                count += 1;
            }
        }
        if count > 0 {
            *m = sum / count as f64;
        }
    }
    let mut out = theta_0.clone();
    out.axpy(cfg.scale, &theta_0.unflatten(&merged)?)?;
    Ok(out)
}
