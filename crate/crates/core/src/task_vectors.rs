//! Task-vector algebra and the layer-wise merged parameterisation
//! `θ_λ^l = θ₀^l + Σ_t λ_t^l τ_t^l`, one coefficient per parameter group.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, MergeError, Result};
use crate::nn::ParamSet;

/// `τ = θ_t − θ₀`, shaped exactly like the pretrained parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskVector {
    pub deltas: ParamSet,
}

impl TaskVector {
    pub fn norm(&self) -> f64 {
        self.deltas.norm_sq().sqrt()
    }

    /// `θ₀ + τ`.
    pub fn apply_to(&self, theta_0: &ParamSet) -> Result<ParamSet> {
        theta_0.add(&self.deltas)
    }
}

pub fn compute_task_vector(theta_0: &ParamSet, theta_t: &ParamSet) -> Result<TaskVector> {
    Ok(TaskVector {
        deltas: theta_t.sub(theta_0)?,
    })
}

pub fn compute_task_vectors(theta_0: &ParamSet, thetas: &[ParamSet]) -> Result<Vec<TaskVector>> {
    thetas
        .iter()
        .map(|t| compute_task_vector(theta_0, t))
        .collect()
}

/// `T × L` coefficient matrix (task-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeCoefficients {
    pub tasks: usize,
    pub groups: usize,
    pub values: Vec<Vec<f64>>,
}

impl MergeCoefficients {
    pub fn filled(tasks: usize, groups: usize, v: f64) -> Self {
        MergeCoefficients {
            tasks,
            groups,
            values: vec![vec![v; groups]; tasks],
        }
    }

    pub fn zeros(tasks: usize, groups: usize) -> Self {
        Self::filled(tasks, groups, 0.0)
    }

    pub fn new(values: Vec<Vec<f64>>) -> Result<Self> {
        let tasks = values.len();
        let groups = values.first().map_or(0, Vec::len);
        let c = MergeCoefficients {
            tasks,
            groups,
            values,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.tasks || self.values.iter().any(|r| r.len() != self.groups) {
            return Err(dim_err(format!(
                "coefficient matrix is not {}x{}",
                self.tasks, self.groups
            )));
        }
        if self.values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(MergeError::NonFinite("merge coefficients"));
        }
        Ok(())
    }

    pub fn get(&self, t: usize, g: usize) -> f64 {
        self.values[t][g]
    }

    pub fn flat(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    pub fn from_flat(tasks: usize, groups: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != tasks * groups {
            return Err(dim_err("flat coefficient length"));
        }
        Ok(MergeCoefficients {
            tasks,
            groups,
            values: flat.chunks(groups.max(1)).map(<[f64]>::to_vec).collect(),
        })
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &MergeCoefficients, b: f64) -> Result<Self> {
        if self.tasks != other.tasks || self.groups != other.groups {
            return Err(dim_err("coefficient shapes differ"));
        }
        let flat: Vec<f64> = self
            .flat()
            .iter()
            .zip(other.flat())
            .map(|(x, y)| a * x + b * y)
            .collect();
        Self::from_flat(self.tasks, self.groups, &flat)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: MergeCoefficients = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// What a merged model was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub base_digest: String,
    pub task_digests: Vec<String>,
    pub coefficients: MergeCoefficients,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedModel {
    pub params: ParamSet,
    pub provenance: Provenance,
}

impl MergedModel {
    /// Rebuilds the parameters from the provenance inputs and checks that
    /// they are bit-identical to the stored ones.
    pub fn verify(&self, theta_0: &ParamSet, taus: &[TaskVector]) -> Result<bool> {
        if theta_0.digest() != self.provenance.base_digest {
            return Ok(false);
        }
        let digests: Vec<String> = taus.iter().map(|t| t.deltas.digest()).collect();
        if digests != self.provenance.task_digests {
            return Ok(false);
        }
        let again = construct_merged(theta_0, taus, &self.provenance.coefficients)?;
        Ok(again.params == self.params)
    }
}

fn check_inputs(
    theta_0: &ParamSet,
    taus: &[TaskVector],
    tasks: usize,
    groups: usize,
) -> Result<()> {
    if taus.len() != tasks {
        return Err(dim_err(format!(
            "{} task vectors for {} coefficient rows",
            taus.len(),
            tasks
        )));
    }
    if groups != theta_0.num_groups() {
        return Err(dim_err(format!(
            "{} coefficient columns for {} parameter groups",
            groups,
            theta_0.num_groups()
        )));
    }
    for tau in taus {
        theta_0.check_shape(&tau.deltas, "task vector")?;
    }
    Ok(())
}

/// Parameters of `θ_λ` without provenance bookkeeping.
pub fn merged_params(
    theta_0: &ParamSet,
    taus: &[TaskVector],
    lam: &MergeCoefficients,
) -> Result<ParamSet> {
    lam.validate()?;
    check_inputs(theta_0, taus, lam.tasks, lam.groups)?;
    let mut out = theta_0.clone();
    for g in 0..out.num_groups() {
        let dst = out.group_mut(g);
        for (t, tau) in taus.iter().enumerate() {
            let c = lam.values[t][g];
            crate::nn::matrix::axpy(dst, c, tau.deltas.group(g));
        }
    }
    Ok(out)
}

pub fn construct_merged(
    theta_0: &ParamSet,
    taus: &[TaskVector],
    lam: &MergeCoefficients,
) -> Result<MergedModel> {
    let params = merged_params(theta_0, taus, lam)?;
    Ok(MergedModel {
        params,
        provenance: Provenance {
            base_digest: theta_0.digest(),
            task_digests: taus.iter().map(|t| t.deltas.digest()).collect(),
            coefficients: lam.clone(),
        },
    })
}

/// Chain rule through the merged parameterisation: entry `(t, l)` is
/// `⟨∂loss/∂θ^l, τ_t^l⟩`.
pub fn grad_wrt_lambda(taus: &[TaskVector], loss_grad: &ParamSet) -> Result<MergeCoefficients> {
    let groups = loss_grad.num_groups();
    let mut values = Vec::with_capacity(taus.len());
    for tau in taus {
        loss_grad.check_shape(&tau.deltas, "grad_wrt_lambda")?;
        values.push(
            (0..groups)
                .map(|g| crate::nn::matrix::dot(loss_grad.group(g), tau.deltas.group(g)))
                .collect(),
        );
    }
    Ok(MergeCoefficients {
        tasks: taus.len(),
        groups,
        values,
    })
}

/// How free optimisation variables map onto the coefficient matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tying {
    /// One free coefficient per (task, group).
    #[default]
    Layerwise,
    /// One free coefficient per task, shared by all of its groups.
    TieLayers,
}

impl Tying {
    pub fn num_free(self, tasks: usize, groups: usize) -> usize {
        match self {
            Tying::Layerwise => tasks * groups,
            Tying::TieLayers => tasks,
        }
    }

    pub fn expand(self, free: &[f64], tasks: usize, groups: usize) -> Result<MergeCoefficients> {
        match self {
            Tying::Layerwise => MergeCoefficients::from_flat(tasks, groups, free),
            Tying::TieLayers => {
                if free.len() != tasks {
                    return Err(dim_err("tied coefficient length"));
                }
                Ok(MergeCoefficients {
                    tasks,
                    groups,
                    values: free.iter().map(|&v| vec![v; groups]).collect(),
                })
            }
        }
    }

    /// Pulls a coefficient-matrix gradient back onto the free variables.
    pub fn reduce(self, grad: &MergeCoefficients) -> Vec<f64> {
        match self {
            Tying::Layerwise => grad.flat(),
            Tying::TieLayers => grad.values.iter().map(|r| r.iter().sum()).collect(),
        }
    }
}
