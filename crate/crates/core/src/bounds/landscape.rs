//! Loss surfaces around a merged solution along two unit task-vector
//! directions.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MergeError, Result};
use crate::exec::Execution;
use crate::nn::{mean_loss, Batch, Matrix, Objective, ParamSet};
use crate::task_vectors::TaskVector;

/// Inclusive evenly spaced axis `min:max:steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub steps: usize,
}

impl Axis {
    pub fn new(min: f64, max: f64, steps: usize) -> Result<Self> {
        if steps == 0 || !min.is_finite() || !max.is_finite() || max < min {
            return Err(MergeError::InvalidConfig(format!(
                "axis {min}:{max}:{steps} is empty or reversed"
            )));
        }
        Ok(Axis { min, max, steps })
    }

    /// The single point `0`.
    pub fn origin() -> Self {
        Axis {
            min: 0.0,
            max: 0.0,
            steps: 1,
        }
    }

    pub fn values(&self) -> Vec<f64> {
        if self.steps == 1 {
            return vec![self.min];
        }
        let k = (self.steps - 1) as f64;
        (0..self.steps)
            .map(|i| {
                let i = i as f64;
                (self.min * (k - i) + self.max * i) / k
            })
            .collect()
    }
}

impl FromStr for Axis {
    type Err = MergeError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || MergeError::InvalidConfig(format!("axis `{s}` is not min:max:steps"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let min = parts[0].trim().parse().map_err(|_| bad())?;
        let max = parts[1].trim().parse().map_err(|_| bad())?;
        let steps = parts[2].trim().parse().map_err(|_| bad())?;
        Axis::new(min, max, steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub a: Axis,
    pub b: Axis,
}

impl FromStr for Grid {
    type Err = MergeError;

    /// `a0:a1:n,b0:b1:m`, or a single axis for a 1-D slice.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(',') {
            Some((a, b)) => Ok(Grid {
                a: a.parse()?,
                b: b.parse()?,
            }),
            None => Ok(Grid {
                a: s.parse()?,
                b: Axis::origin(),
            }),
        }
    }
}

/// The direction scaled to unit norm; a zero vector stays zero.
pub fn unit_direction(tv: &TaskVector) -> ParamSet {
    let n = tv.norm();
    if n > 0.0 {
        tv.deltas.scale(1.0 / n)
    } else {
        tv.deltas.clone()
    }
}

/// Mean cross-entropy over the batches, each batch weighted equally.
pub fn direct_loss(theta: &ParamSet, batches: &[Batch]) -> Result<f64> {
    if batches.is_empty() {
        return Err(MergeError::Empty("evaluation batches"));
    }
    let mut total = 0.0;
    for b in batches {
        total += mean_loss(
            theta,
            &b.inputs,
            Objective::CrossEntropy(b.labels_or_err()?),
        )?;
    }
    Ok(total / batches.len() as f64)
}

/// `out[i][j] = loss(θ_c + a_i·â + b_j·b̂)` with unit directions `â`, `b̂`.
pub fn landscape_scan(
    center: &ParamSet,
    dir_a: &TaskVector,
    dir_b: &TaskVector,
    grid: &Grid,
    batches: &[Batch],
    exec: Execution,
) -> Result<Matrix> {
    center.check_shape(&dir_a.deltas, "landscape direction a")?;
    center.check_shape(&dir_b.deltas, "landscape direction b")?;
    let ua = unit_direction(dir_a);
    let ub = unit_direction(dir_b);
    let av = grid.a.values();
    let bv = grid.b.values();
    let cols = bv.len();
    let cells = exec.try_map(av.len() * cols, |c| {
        let (i, j) = (c / cols, c % cols);
        let mut theta = center.clone();
        theta.axpy(av[i], &ua)?;
        theta.axpy(bv[j], &ub)?;
        direct_loss(&theta, batches)
    })?;
    Matrix::new(av.len(), cols, cells)
}

/// Header `a,b=<b_0>,…`; one row per `a` value.
pub fn landscape_csv(grid: &Grid, losses: &Matrix) -> String {
    let mut out = String::from("a");
    for b in grid.b.values() {
        out.push_str(&format!(",b={b}"));
    }
    out.push('\n');
    for (i, a) in grid.a.values().iter().enumerate() {
        out.push_str(&a.to_string());
        for v in losses.row(i) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}
