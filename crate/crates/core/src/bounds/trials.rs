//! Randomised sweeps over generated instances, one derived seed per trial.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    decomposition_check, excess_risk_check, merged_bound_rhs, per_task_bound_rhs, pinsker_check,
    BoundReport, FiniteTask, FiniteTaskDataset, GaussianPosterior, LinearSample, LinearTaskModel,
};
use crate::error::{MergeError, Result};
use crate::exec::{derive_seed, Execution};
use crate::nn::{Matrix, ProbDist};

/// Which inequality a sweep exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckKind {
    Decomposition,
    Pertask,
    Merged,
    Excess,
    Pinsker,
}

impl CheckKind {
    pub const ALL: [CheckKind; 5] = [
        CheckKind::Decomposition,
        CheckKind::Pertask,
        CheckKind::Merged,
        CheckKind::Excess,
        CheckKind::Pinsker,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CheckKind::Decomposition => "decomposition",
            CheckKind::Pertask => "pertask",
            CheckKind::Merged => "merged",
            CheckKind::Excess => "excess",
            CheckKind::Pinsker => "pinsker",
        }
    }

    /// Whether the inequality holds with probability `1 − δ` only.
    pub fn is_probabilistic(self) -> bool {
        matches!(self, CheckKind::Pertask | CheckKind::Merged)
    }

    pub fn default_trials(self) -> usize {
        match self {
            CheckKind::Decomposition => 20,
            CheckKind::Pertask => 100,
            CheckKind::Merged => 50,
            CheckKind::Excess => 1000,
            CheckKind::Pinsker => 100_000,
        }
    }
}

impl fmt::Display for CheckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CheckKind {
    type Err = MergeError;

    fn from_str(s: &str) -> Result<Self> {
        CheckKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| MergeError::InvalidConfig(format!("unknown bound check `{s}`")))
    }
}

/// Instance sizes and constants for the linear-model sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundLabConfig {
    pub dim: usize,
    pub n_train: usize,
    pub n_population: usize,
    pub mc_samples: usize,
    pub sigma2: f64,
    pub prior_sigma2: f64,
    pub eta: f64,
    pub delta: f64,
    pub radius: f64,
    pub noise: f64,
    pub ridge: f64,
    pub decomposition_tasks: usize,
    pub merged_tasks: usize,
}

impl Default for BoundLabConfig {
    fn default() -> Self {
        BoundLabConfig {
            dim: 5,
            n_train: 200,
            n_population: 1000,
            mc_samples: 10_000,
            sigma2: 0.01,
            prior_sigma2: 1.0,
            eta: 0.5,
            delta: 0.05,
            radius: 2.0,
            noise: 0.1,
            ridge: 1e-3,
            decomposition_tasks: 3,
            merged_tasks: 2,
        }
    }
}

/// One CSV row of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub se: f64,
}

impl From<(usize, &BoundReport)> for TrialRow {
    fn from((trial, r): (usize, &BoundReport)) -> Self {
        TrialRow {
            trial,
            lhs: r.lhs,
            rhs: r.rhs,
            slack: r.slack,
            se: r.se,
        }
    }
}

/// Residuals below this count as an exact identity.
pub const DECOMPOSITION_TOL: f64 = 1e-10;

/// Floating-point allowance for the deterministic inequalities.
pub const INEQUALITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub check: CheckKind,
    pub trials: usize,
    pub violations: usize,
    pub violation_rate: f64,
    pub max_abs_slack: f64,
    pub min_slack: f64,
    pub mean_se: f64,
    pub passed: bool,
}

fn violated(kind: CheckKind, r: &TrialRow) -> bool {
    match kind {
        CheckKind::Decomposition => !(r.slack.abs() < DECOMPOSITION_TOL),
        CheckKind::Excess | CheckKind::Pinsker => !(r.lhs <= r.rhs + INEQUALITY_TOL),
        CheckKind::Pertask | CheckKind::Merged => !(r.lhs <= r.rhs),
    }
}

/// Deterministic checks pass with zero violations; probabilistic ones
/// when the violation rate stays within `delta`.
pub fn summarize(kind: CheckKind, rows: &[TrialRow], delta: f64) -> TrialSummary {
    let violations = rows.iter().filter(|r| violated(kind, r)).count();
    let n = rows.len().max(1) as f64;
    let rate = violations as f64 / n;
    TrialSummary {
        check: kind,
        trials: rows.len(),
        violations,
        violation_rate: rate,
        max_abs_slack: rows.iter().map(|r| r.slack.abs()).fold(0.0, f64::max),
        min_slack: rows.iter().map(|r| r.slack).fold(f64::INFINITY, f64::min),
        mean_se: rows.iter().map(|r| r.se).sum::<f64>() / n,
        passed: !rows.is_empty()
            && if kind.is_probabilistic() {
                rate <= delta
            } else {
                violations == 0
            },
    }
}

pub fn trials_csv(rows: &[TrialRow]) -> String {
    let mut out = String::from("#schema_version=1\ntrial,lhs,rhs,slack,se\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.trial, r.lhs, r.rhs, r.slack, r.se
        ));
    }
    out
}

fn gaussian_vec(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn scaled_to(v: Vec<f64>, norm: f64) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x * norm / n).collect()
}

/// Uniform point of the unit ball.
fn ball_point(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    let r = rng.random::<f64>().powf(1.0 / d as f64);
    scaled_to(gaussian_vec(d, rng), r)
}

fn task_sample(truth: &[f64], n: usize, noise: f64, rng: &mut impl Rng) -> LinearSample {
    let d = truth.len();
    let mut feats = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x = ball_point(d, rng);
        let z: f64 = rng.sample(StandardNormal);
        let s: f64 = x.iter().zip(truth).map(|(a, b)| a * b).sum();
        ys.push((s + noise * z).clamp(-1.0, 1.0));
        feats.extend(x);
    }
    LinearSample::new(Matrix::new(n, d, feats).expect("shape"), ys).expect("non-empty")
}

/// Ridge estimate `(K̂ + λI)⁻¹ (1/n) Σ y_i φ_i`.
fn ridge_fit(s: &LinearSample, lambda: f64) -> Result<Vec<f64>> {
    let d = s.dim();
    let k = s.kernel();
    let mut a = DMatrix::from_row_slice(d, d, &k.data);
    for i in 0..d {
        a[(i, i)] += lambda;
    }
    let n = s.len() as f64;
    let mut b = DVector::zeros(d);
    for i in 0..s.len() {
        for (j, f) in s.features.row(i).iter().enumerate() {
            b[j] += s.targets[i] * f / n;
        }
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| MergeError::Degenerate("ridge system is not positive definite".into()))?;
    Ok(chol.solve(&b).iter().copied().collect())
}

/// Training sets, held-out populations and fitted posteriors for `tasks`
/// related linear tasks.
struct LinearInstance {
    model: LinearTaskModel,
    prior: GaussianPosterior,
    samples: Vec<LinearSample>,
    populations: Vec<LinearSample>,
    posteriors: Vec<GaussianPosterior>,
}

fn linear_instance(
    cfg: &BoundLabConfig,
    tasks: usize,
    rng: &mut impl Rng,
) -> Result<LinearInstance> {
    let d = cfg.dim;
    let shared = scaled_to(gaussian_vec(d, rng), rng.random_range(0.2..0.6));
    let mut samples = Vec::with_capacity(tasks);
    let mut populations = Vec::with_capacity(tasks);
    let mut posteriors = Vec::with_capacity(tasks);
    for _ in 0..tasks {
        let shift = scaled_to(gaussian_vec(d, rng), rng.random_range(0.0..0.3));
        let truth: Vec<f64> = shared.iter().zip(&shift).map(|(a, b)| a + b).collect();
        let s = task_sample(&truth, cfg.n_train, cfg.noise, rng);
        let p = task_sample(&truth, cfg.n_population, cfg.noise, rng);
        posteriors.push(GaussianPosterior::new(
            ridge_fit(&s, cfg.ridge)?,
            cfg.sigma2,
        )?);
        samples.push(s);
        populations.push(p);
    }
    Ok(LinearInstance {
        model: LinearTaskModel::new(vec![0.0; d], cfg.radius)?,
        prior: GaussianPosterior::new(vec![0.0; d], cfg.prior_sigma2)?,
        samples,
        populations,
        posteriors,
    })
}

fn random_simplex(k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Random label distribution: occasionally one-hot, otherwise a softmax
/// of scaled Gaussian logits floored away from zero.
fn random_dist(k: usize, allow_one_hot: bool, rng: &mut impl Rng) -> ProbDist {
    if allow_one_hot && rng.random::<f64>() < 0.15 {
        return ProbDist::one_hot(k, rng.random_range(0..k)).expect("label in range");
    }
    let scale = rng.random_range(0.0..3.0);
    let w: Vec<f64> = (0..k)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            (scale * z).exp() + 1e-6
        })
        .collect();
    ProbDist::from_weights(&w).expect("positive weights")
}

fn mix(a: &ProbDist, b: &ProbDist, w: f64) -> ProbDist {
    let v: Vec<f64> = a
        .probs()
        .iter()
        .zip(b.probs())
        .map(|(x, y)| (1.0 - w) * x + w * y)
        .collect();
    ProbDist::from_weights(&v).expect("convex combination")
}

fn excess_instance(rng: &mut impl Rng) -> Result<BoundReport> {
    let k = rng.random_range(2..=5);
    let tasks = rng.random_range(1..=3);
    let mut ds = FiniteTaskDataset {
        tasks: Vec::with_capacity(tasks),
        alpha: random_simplex(tasks, rng),
    };
    let mut teachers = Vec::with_capacity(tasks);
    let mut student = Vec::with_capacity(tasks);
    for _ in 0..tasks {
        let inputs = rng.random_range(1..=8);
        let cond: Vec<ProbDist> = (0..inputs).map(|_| random_dist(k, true, rng)).collect();
        let teach: Vec<ProbDist> = cond
            .iter()
            .map(|y| {
                let w = rng.random::<f64>();
                mix(y, &random_dist(k, false, rng), w)
            })
            .collect();
        let stud: Vec<ProbDist> = teach
            .iter()
            .map(|p| {
                let w = rng.random_range(0.01..1.0);
                mix(p, &random_dist(k, false, rng), w)
            })
            .collect();
        ds.tasks.push(FiniteTask {
            input_weights: random_dist(inputs, false, rng),
            conditionals: cond,
        });
        teachers.push(teach);
        student.push(stud);
    }
    excess_risk_check(&ds, &teachers, &student)
}

fn run_one(kind: CheckKind, cfg: &BoundLabConfig, seed: u64) -> Result<TrialRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let report = match kind {
        CheckKind::Pinsker => {
            let k = rng.random_range(2..=6);
            let p = random_dist(k, true, &mut rng);
            let q = random_dist(k, false, &mut rng);
            let (tv, bound) = pinsker_check(&p, &q)?;
            return Ok(TrialRow {
                trial: 0,
                lhs: tv,
                rhs: bound,
                slack: bound - tv,
                se: 0.0,
            });
        }
        CheckKind::Excess => excess_instance(&mut rng)?,
        CheckKind::Decomposition => {
            let t = cfg.decomposition_tasks;
            let inst = linear_instance(cfg, t, &mut rng)?;
            let alpha = random_simplex(t, &mut rng);
            let beta = random_simplex(t, &mut rng);
            decomposition_check(
                &inst.model,
                &inst.posteriors,
                &inst.populations,
                &alpha,
                &beta,
                cfg.mc_samples,
                rng.random(),
            )?
        }
        CheckKind::Pertask => {
            let inst = linear_instance(cfg, 1, &mut rng)?;
            per_task_bound_rhs(
                &inst.model,
                &inst.posteriors[0],
                &inst.prior,
                &inst.samples[0],
                &inst.populations[0],
                cfg.eta,
                cfg.delta,
            )?
        }
        CheckKind::Merged => {
            let t = cfg.merged_tasks;
            let inst = linear_instance(cfg, t, &mut rng)?;
            let alpha = vec![1.0 / t as f64; t];
            let beta = random_simplex(t, &mut rng);
            merged_bound_rhs(
                &inst.model,
                &inst.posteriors,
                &inst.prior,
                &inst.samples,
                &inst.populations,
                &vec![cfg.eta; t],
                &vec![cfg.delta / t as f64; t],
                &alpha,
                &beta,
            )?
        }
    };
    Ok(TrialRow::from((0, &report)))
}

/// Runs `trials` independent instances; trial `i` uses
/// `derive_seed(seed, i)`.
pub fn run_trials(
    kind: CheckKind,
    trials: usize,
    seed: u64,
    cfg: &BoundLabConfig,
    exec: Execution,
) -> Result<Vec<TrialRow>> {
    exec.try_map(trials, |i| {
        run_one(kind, cfg, derive_seed(seed, i as u64)).map(|mut r| {
            r.trial = i;
            r
        })
    })
}
