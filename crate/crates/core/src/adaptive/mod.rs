//! Coefficient-learning mergers.
//!
//! Both learn the layer-wise coefficients `λ` of the merged model from a
//! few unlabeled calibration inputs per task. AdaMerging minimises the
//! merged model's prediction entropy with Adam. SAMerging distils every
//! fine-tuned teacher into the merged student,
//! `L_KD(λ) = Σ_t α_t 𝔼_{x∈B_t} KL(p_t(·|x) ‖ q_λ(·|x))`, and takes each Adam
//! step with the gradient evaluated at the sharpness-aware perturbation
//! `λ + ρ g/‖g‖`.

mod optim;

pub use optim::{adam_step, sam_ascent, AdamConfig, AdamState, SamConfig, SAM_GRAD_GUARD};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{dim_err, MergeError, Result};
use crate::exec::Execution;
use crate::nn::{predict_probs, weighted_loss_and_grad, Matrix, Objective, ParamSet, SIMPLEX_TOL};
use crate::task_vectors::{grad_wrt_lambda, merged_params, MergeCoefficients, TaskVector, Tying};

/// What the coefficients are fitted against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeObjective {
    /// Multi-teacher distillation, `Σ_t α_t 𝔼 KL(p_t ‖ q_λ)`.
    Kl,
    /// `Σ_t α_t 𝔼 H(q_λ)`.
    Entropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Adam(AdamConfig),
    Sam(SamConfig),
}

impl Optimizer {
    fn base(&self) -> AdamConfig {
        match self {
            Optimizer::Adam(c) => *c,
            Optimizer::Sam(s) => s.base,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub objective: MergeObjective,
    pub optimizer: Optimizer,
    /// Number of optimisation steps.
    pub epochs: usize,
    pub lam_init: f64,
    /// Rows per task in each step's minibatch, cycling through the
    /// calibration inputs when they exceed it.
    pub batch_size: usize,
    #[serde(default)]
    pub tying: Tying,
    /// Weight `ω` of the `ω ‖λ‖²` penalty.
    #[serde(default)]
    pub l2_penalty: f64,
}

impl FitConfig {
    pub fn samerging() -> Self {
        FitConfig {
            objective: MergeObjective::Kl,
            optimizer: Optimizer::Sam(SamConfig::default()),
            epochs: 2000,
            lam_init: 0.0,
            batch_size: 16,
            tying: Tying::Layerwise,
            l2_penalty: 0.0,
        }
    }

    pub fn adamerging() -> Self {
        FitConfig {
            objective: MergeObjective::Entropy,
            optimizer: Optimizer::Adam(AdamConfig::plain()),
            lam_init: 0.3,
            ..Self::samerging()
        }
    }

    /// The Adam settings underneath either optimizer.
    pub fn optimizer_base(&self) -> AdamConfig {
        self.optimizer.base()
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(MergeError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !self.lam_init.is_finite() || !(self.l2_penalty >= 0.0) {
            return Err(MergeError::InvalidConfig("lam_init / l2_penalty".into()));
        }
        match &self.optimizer {
            Optimizer::Adam(c) => c.validate(),
            Optimizer::Sam(s) => s.validate(),
        }
    }
}

/// Rows assembled for one evaluation: stacked inputs, matching teacher
/// probabilities and per-row weights `α_t / n_t`.
#[derive(Debug, Clone)]
struct Assembled {
    inputs: Matrix,
    teacher: Vec<f64>,
    weights: Vec<f64>,
}

/// Calibration data and teachers for one merge.
#[derive(Debug, Clone)]
pub struct MergeProblem<'a> {
    theta_0: &'a ParamSet,
    taus: &'a [TaskVector],
    inputs: Vec<Matrix>,
    teacher_probs: Option<Vec<Vec<f64>>>,
    alpha: Vec<f64>,
    full: Assembled,
    exec: Execution,
}

fn check_simplex(alpha: &[f64], tasks: usize) -> Result<()> {
    if alpha.len() != tasks {
        return Err(dim_err(format!(
            "alpha has {} entries for {tasks} tasks",
            alpha.len()
        )));
    }
    let sum: f64 = alpha.iter().sum();
    if alpha.iter().any(|a| !(*a >= 0.0)) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(MergeError::InvalidDistribution(format!(
            "alpha {alpha:?} not on the simplex"
        )));
    }
    Ok(())
}

impl<'a> MergeProblem<'a> {
    /// `teachers` may be omitted when only the entropy objective is used.
    pub fn new(
        theta_0: &'a ParamSet,
        taus: &'a [TaskVector],
        teachers: Option<&[ParamSet]>,
        calib: &[Matrix],
        alpha: Option<&[f64]>,
        exec: Execution,
    ) -> Result<Self> {
        let tasks = taus.len();
        if tasks == 0 {
            return Err(MergeError::Empty("merge problem needs task vectors"));
        }
        if calib.len() != tasks {
            return Err(dim_err(format!(
                "{} calibration batches for {tasks} tasks",
                calib.len()
            )));
        }
        if calib.iter().any(|c| c.rows == 0) {
            return Err(MergeError::Empty("calibration batch"));
        }
        for tau in taus {
            theta_0.check_shape(&tau.deltas, "task vector")?;
        }
        let alpha = match alpha {
            Some(a) => a.to_vec(),
            None => vec![1.0 / tasks as f64; tasks],
        };
        check_simplex(&alpha, tasks)?;
        let teacher_probs = match teachers {
            None => None,
            Some(ts) => {
                if ts.len() != tasks {
                    return Err(dim_err(format!("{} teachers for {tasks} tasks", ts.len())));
                }
                let probs = ts
                    .iter()
                    .zip(calib)
                    .map(|(t, x)| {
                        theta_0.check_shape(t, "teacher")?;
                        Ok(predict_probs(t, x)?.data)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(probs)
            }
        };
        let mut problem = MergeProblem {
            theta_0,
            taus,
            inputs: calib.to_vec(),
            teacher_probs,
            alpha,
            full: Assembled {
                inputs: Matrix::zeros(0, 0),
                teacher: Vec::new(),
                weights: Vec::new(),
            },
            exec,
        };
        let rows: Vec<Vec<usize>> = problem
            .inputs
            .iter()
            .map(|x| (0..x.rows).collect())
            .collect();
        problem.full = problem.assemble(&rows)?;
        Ok(problem)
    }

    pub fn tasks(&self) -> usize {
        self.taus.len()
    }

    pub fn groups(&self) -> usize {
        self.theta_0.num_groups()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    fn assemble(&self, rows: &[Vec<usize>]) -> Result<Assembled> {
        let parts: Vec<Matrix> = self
            .inputs
            .iter()
            .zip(rows)
            .map(|(x, r)| x.select_rows(r))
            .collect();
        let inputs = Matrix::vstack(&parts.iter().collect::<Vec<_>>())?;
        let mut teacher = Vec::new();
        if let Some(tp) = &self.teacher_probs {
            let k = self.theta_0.output_dim();
            for (p, r) in tp.iter().zip(rows) {
                for &i in r {
                    teacher.extend_from_slice(&p[i * k..(i + 1) * k]);
                }
            }
        }
        let mut weights = Vec::with_capacity(inputs.rows);
        for (a, r) in self.alpha.iter().zip(rows) {
            weights.extend(std::iter::repeat_n(a / r.len() as f64, r.len()));
        }
        Ok(Assembled {
            inputs,
            teacher,
            weights,
        })
    }

    /// Per-task minibatch for optimisation step `step`.
    fn minibatch(&self, step: usize, batch_size: usize) -> Result<Option<Assembled>> {
        if self.inputs.iter().all(|x| x.rows <= batch_size) {
            return Ok(None);
        }
        let rows: Vec<Vec<usize>> = self
            .inputs
            .iter()
            .map(|x| {
                let b = batch_size.min(x.rows);
                (0..b).map(|i| (step * b + i) % x.rows).collect()
            })
            .collect();
        self.assemble(&rows).map(Some)
    }

    fn evaluate(
        &self,
        lam: &MergeCoefficients,
        objective: MergeObjective,
        rows: &Assembled,
    ) -> Result<(f64, MergeCoefficients)> {
        let theta = merged_params(self.theta_0, self.taus, lam)?;
        let obj = match objective {
            MergeObjective::Kl => {
                if self.teacher_probs.is_none() {
                    return Err(MergeError::InvalidConfig(
                        "distillation objective needs teacher models".into(),
                    ));
                }
                Objective::KlToTeacher(&rows.teacher)
            }
            MergeObjective::Entropy => Objective::Entropy,
        };
        let (loss, grad) =
            weighted_loss_and_grad(&theta, &rows.inputs, obj, &rows.weights, self.exec)?;
        Ok((loss, grad_wrt_lambda(self.taus, &grad)?))
    }

    /// Objective over the full calibration set.
    pub fn objective(&self, lam: &MergeCoefficients, objective: MergeObjective) -> Result<f64> {
        Ok(self.evaluate(lam, objective, &self.full)?.0)
    }

    /// Objective and `∇_λ` over the full calibration set.
    pub fn objective_and_grad(
        &self,
        lam: &MergeCoefficients,
        objective: MergeObjective,
    ) -> Result<(f64, MergeCoefficients)> {
        self.evaluate(lam, objective, &self.full)
    }
}

/// `Σ_t α_t 𝔼_{x∈B_t} KL(p_t(·|x) ‖ q_λ(·|x))`; `α` defaults to uniform.
pub fn kd_loss(
    lam: &MergeCoefficients,
    theta_0: &ParamSet,
    taus: &[TaskVector],
    teachers: &[ParamSet],
    batches: &[Matrix],
    alpha: Option<&[f64]>,
) -> Result<f64> {
    MergeProblem::new(
        theta_0,
        taus,
        Some(teachers),
        batches,
        alpha,
        Execution::default(),
    )?
    .objective(lam, MergeObjective::Kl)
}

/// `Σ_t α_t 𝔼_{x∈B_t} H(q_λ(·|x))`.
pub fn entropy_loss(
    lam: &MergeCoefficients,
    theta_0: &ParamSet,
    taus: &[TaskVector],
    batches: &[Matrix],
    alpha: Option<&[f64]>,
) -> Result<f64> {
    MergeProblem::new(theta_0, taus, None, batches, alpha, Execution::default())?
        .objective(lam, MergeObjective::Entropy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Objective at the pre-step coefficients on the step's minibatch.
    pub objective: f64,
    /// Norm of the unperturbed gradient.
    pub grad_norm: f64,
    /// Digest of the coefficients after the step.
    pub lambda_digest: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,objective,grad_norm,lambda_digest\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch, r.objective, r.grad_norm, r.lambda_digest
            ));
        }
        s
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_csv().as_bytes()))
    }

    pub fn last_objective(&self) -> Option<f64> {
        self.records.last().map(|r| r.objective)
    }
}

fn digest_floats(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Generic coefficient fit covering both mergers and their ablations.
pub fn fit(problem: &MergeProblem, cfg: &FitConfig) -> Result<(MergeCoefficients, TrainLog)> {
    cfg.validate()?;
    let (tasks, groups) = (problem.tasks(), problem.groups());
    let mut x = vec![cfg.lam_init; cfg.tying.num_free(tasks, groups)];
    let mut state = AdamState::new(cfg.optimizer.base(), x.len());
    let mut log = TrainLog::default();
    let free_grad = |x: &[f64], rows: &Assembled| -> Result<(f64, Vec<f64>)> {
        let lam = cfg.tying.expand(x, tasks, groups)?;
        let (mut loss, mut g) = problem.evaluate(&lam, cfg.objective, rows)?;
        if cfg.l2_penalty > 0.0 {
            loss += cfg.l2_penalty * lam.norm().powi(2);
            let pen = MergeCoefficients::zeros(tasks, groups);
            g = g.combine(1.0, &lam.combine(2.0 * cfg.l2_penalty, &pen, 0.0)?, 1.0)?;
        }
        Ok((loss, cfg.tying.reduce(&g)))
    };
    for step in 0..cfg.epochs {
        let mb = problem.minibatch(step, cfg.batch_size)?;
        let rows = mb.as_ref().unwrap_or(&problem.full);
        let (loss, g) = free_grad(&x, rows)?;
        let update = match cfg.optimizer {
            Optimizer::Adam(_) => g.clone(),
            Optimizer::Sam(sam) => {
                let eps = sam_ascent(&g, sam.rho);
                let perturbed: Vec<f64> = x.iter().zip(&eps).map(|(a, e)| a + e).collect();
                free_grad(&perturbed, rows)?.1
            }
        };
        adam_step(&mut state, &mut x, &update)?;
        log.records.push(EpochRecord {
            epoch: step + 1,
            objective: loss,
            grad_norm: norm(&g),
            lambda_digest: digest_floats(&x),
        });
    }
    Ok((cfg.tying.expand(&x, tasks, groups)?, log))
}

/// SAMerging: distillation objective, SAM over Adam.
pub fn samerging_fit(
    problem: &MergeProblem,
    sam: SamConfig,
    epochs: usize,
    lam_init: f64,
) -> Result<(MergeCoefficients, TrainLog)> {
    fit(
        problem,
        &FitConfig {
            optimizer: Optimizer::Sam(sam),
            epochs,
            lam_init,
            ..FitConfig::samerging()
        },
    )
}

/// AdaMerging: entropy objective, plain Adam.
pub fn adamerging_fit(
    problem: &MergeProblem,
    adam: AdamConfig,
    epochs: usize,
    lam_init: f64,
) -> Result<(MergeCoefficients, TrainLog)> {
    fit(
        problem,
        &FitConfig {
            optimizer: Optimizer::Adam(adam),
            epochs,
            lam_init,
            ..FitConfig::adamerging()
        },
    )
}
