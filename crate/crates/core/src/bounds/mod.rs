//! Numerical checks of the generalisation and excess-risk theory.
//!
//! Exactly-linear models with isotropic Gaussian posteriors live in
//! [`linear`]; finite-dataset excess-risk and Pinsker checks, the flatness
//! proxy and the report type live here.

pub mod landscape;
pub mod linear;
pub mod trials;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, MergeError, Result};
use crate::nn::{self, prob::kl_raw, Matrix, Objective, ParamSet, ProbDist, SIMPLEX_TOL};

pub use landscape::{direct_loss, landscape_csv, landscape_scan, unit_direction, Axis, Grid};
pub use linear::{
    decomposition_check, heterogeneity, merged_bound_rhs, per_task_bound_rhs, Heterogeneity,
    LinearSample, LinearTaskModel,
};
pub use trials::{
    run_trials, summarize, trials_csv, BoundLabConfig, CheckKind, TrialRow, TrialSummary,
};

/// `N(mean, sigma2 · I)`. A zero variance denotes a point mass, which is
/// accepted for risk evaluation but not for KL terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub sigma2: f64,
}

impl GaussianPosterior {
    pub fn new(mean: Vec<f64>, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(MergeError::InvalidConfig(format!(
                "posterior variance must be positive, got {sigma2}"
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(MergeError::NonFinite("posterior mean"));
        }
        Ok(GaussianPosterior { mean, sigma2 })
    }

    pub fn point_mass(mean: Vec<f64>) -> Self {
        GaussianPosterior { mean, sigma2: 0.0 }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let s = self.sigma2.sqrt();
        self.mean
            .iter()
            .map(|m| {
                let z: f64 = rng.sample(StandardNormal);
                m + s * z
            })
            .collect()
    }

    /// Log density at `theta`.
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        let d = self.dim() as f64;
        let sq: f64 = theta
            .iter()
            .zip(&self.mean)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        -0.5 * (d * (2.0 * std::f64::consts::PI * self.sigma2).ln() + sq / self.sigma2)
    }
}

/// Closed-form `KL(q ‖ p)` between isotropic Gaussians.
pub fn gaussian_kl(q: &GaussianPosterior, p: &GaussianPosterior) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(dim_err(format!(
            "gaussian_kl over {} vs {} dims",
            q.dim(),
            p.dim()
        )));
    }
    if !(q.sigma2 > 0.0 && p.sigma2 > 0.0) {
        return Err(MergeError::InvalidConfig(
            "KL needs strictly positive variances".into(),
        ));
    }
    let d = q.dim() as f64;
    let sq: f64 = q
        .mean
        .iter()
        .zip(&p.mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let r = q.sigma2 / p.sigma2;
    Ok((0.5 * (d * r + sq / p.sigma2 - d - d * r.ln())).max(0.0))
}

/// A named scalar inside a [`BoundReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub name: String,
    pub value: f64,
}

fn term(name: impl Into<String>, value: f64) -> Term {
    Term {
        name: name.into(),
        value,
    }
}

/// One evaluated inequality. `rhs` is the ordered sum of `components`;
/// `details` holds the raw ingredients (losses, KL, kernels traces).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub check: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub se: f64,
    pub components: Vec<Term>,
    pub details: Vec<Term>,
    pub sample_counts: Vec<(String, usize)>,
}

impl BoundReport {
    fn assemble(
        check: &str,
        lhs: f64,
        se: f64,
        components: Vec<Term>,
        details: Vec<Term>,
        sample_counts: Vec<(String, usize)>,
    ) -> BoundReport {
        let rhs = components.iter().map(|t| t.value).sum::<f64>();
        BoundReport {
            check: check.to_string(),
            lhs,
            rhs,
            slack: rhs - lhs,
            se,
            components,
            details,
            sample_counts,
        }
    }

    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        self.components
            .iter()
            .find(|t| t.name == name)
            .map(|t| t.value)
    }

    pub fn detail(&self, name: &str) -> Option<f64> {
        self.details
            .iter()
            .find(|t| t.name == name)
            .map(|t| t.value)
    }

    /// Sum of the components whose name ends with `suffix`.
    pub fn component_sum(&self, suffix: &str) -> f64 {
        self.components
            .iter()
            .filter(|t| t.name.ends_with(suffix))
            .map(|t| t.value)
            .sum()
    }
}

/// `Ĝ_S(θ) = (1/n) Σ_i ‖∇_θ ℓ_i‖²` for any per-row objective.
pub fn flatness_proxy(theta: &ParamSet, x: &Matrix, obj: Objective) -> Result<f64> {
    if x.rows == 0 {
        return Err(MergeError::Empty("flatness batch"));
    }
    let norms = nn::per_sample_grad_sq_norms(theta, x, obj)?;
    Ok(norms.iter().sum::<f64>() / x.rows as f64)
}

pub(crate) fn check_simplex(w: &[f64], what: &str) -> Result<()> {
    let s: f64 = w.iter().sum();
    if w.is_empty() || w.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(MergeError::InvalidDistribution(format!(
            "{what} must lie in the simplex, got {w:?}"
        )));
    }
    Ok(())
}

/// `(TV(p, q), √(KL(p ‖ q)/2))`.
pub fn pinsker_check(p: &ProbDist, q: &ProbDist) -> Result<(f64, f64)> {
    let tv = nn::total_variation(p, q)?;
    let kl = nn::kl_div(p, q)?;
    Ok((tv, (kl / 2.0).sqrt()))
}

/// One task of a [`FiniteTaskDataset`]: a distribution over a finite list
/// of inputs and the true label conditional at each of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteTask {
    pub input_weights: ProbDist,
    pub conditionals: Vec<ProbDist>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteTaskDataset {
    pub tasks: Vec<FiniteTask>,
    pub alpha: Vec<f64>,
}

impl FiniteTaskDataset {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(MergeError::Empty("finite dataset tasks"));
        }
        if self.alpha.len() != self.tasks.len() {
            return Err(dim_err("alpha length != task count"));
        }
        check_simplex(&self.alpha, "alpha")?;
        let classes = self.tasks[0].conditionals.first().map_or(0, ProbDist::len);
        for t in &self.tasks {
            if t.conditionals.len() != t.input_weights.len() || t.conditionals.is_empty() {
                return Err(dim_err("input weights vs conditionals"));
            }
            if t.conditionals.iter().any(|c| c.len() != classes) {
                return Err(dim_err("label spaces differ between conditionals"));
            }
        }
        Ok(())
    }
}

fn check_like(dataset: &FiniteTaskDataset, dists: &[Vec<ProbDist>], what: &str) -> Result<()> {
    if dists.len() != dataset.tasks.len() {
        return Err(dim_err(format!("{what}: one entry per task expected")));
    }
    for (t, d) in dataset.tasks.iter().zip(dists) {
        if d.len() != t.conditionals.len() {
            return Err(dim_err(format!(
                "{what}: one distribution per input expected"
            )));
        }
        if d.iter()
            .zip(&t.conditionals)
            .any(|(a, b)| a.len() != b.len())
        {
            return Err(dim_err(format!("{what}: label space mismatch")));
        }
    }
    Ok(())
}

/// Student excess 0-1 risk against the Bayes classifier of every task,
/// bounded through the distillation gap and the teacher misfit.
///
/// The student's prediction is `argmax q(·|x)` with ties going to the
/// lowest class index. `teachers[t][i]` and `student[t][i]` are the
/// distributions at the `i`-th input of task `t`.
pub fn excess_risk_check(
    dataset: &FiniteTaskDataset,
    teachers: &[Vec<ProbDist>],
    student: &[Vec<ProbDist>],
) -> Result<BoundReport> {
    dataset.validate()?;
    check_like(dataset, teachers, "teachers")?;
    check_like(dataset, student, "student")?;
    let mut excess = 0.0;
    let mut risk = 0.0;
    let mut bayes = 0.0;
    let mut kl_student = 0.0;
    let mut kl_teacher = 0.0;
    for (t, task) in dataset.tasks.iter().enumerate() {
        let a = dataset.alpha[t];
        for (i, w) in task.input_weights.probs().iter().enumerate() {
            let y = task.conditionals[i].probs();
            let p = teachers[t][i].probs();
            let q = student[t][i].probs();
            let h = nn::argmax(q);
            let best = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let aw = a * w;
            excess += aw * (best - y[h]);
            risk += aw * (1.0 - y[h]);
            bayes += aw * (1.0 - best);
            kl_student += aw * kl_raw(p, q);
            kl_teacher += aw * kl_raw(y, p);
        }
    }
    let inputs: usize = dataset.tasks.iter().map(|t| t.conditionals.len()).sum();
    Ok(BoundReport::assemble(
        "excess",
        excess,
        0.0,
        vec![
            term("distillation", (2.0 * kl_student).sqrt()),
            term("teacher_misfit", (2.0 * kl_teacher).sqrt()),
        ],
        vec![
            term("student_risk", risk),
            term("bayes_risk", bayes),
            term("kl_teacher_student", kl_student),
            term("kl_truth_teacher", kl_teacher),
        ],
        vec![("inputs".into(), inputs)],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pd(v: &[f64]) -> ProbDist {
        ProbDist::new(v.to_vec()).unwrap()
    }

    fn single(y: &[f64], p: &[f64], q: &[f64]) -> BoundReport {
        let ds = FiniteTaskDataset {
            tasks: vec![FiniteTask {
                input_weights: pd(&[1.0]),
                conditionals: vec![pd(y)],
            }],
            alpha: vec![1.0],
        };
        excess_risk_check(&ds, &[vec![pd(p)]], &[vec![pd(q)]]).unwrap()
    }

    #[test]
    fn kl_of_identical_gaussians_is_zero() {
        let q = GaussianPosterior::new(vec![0.3, -1.0], 0.7).unwrap();
        assert_eq!(gaussian_kl(&q, &q).unwrap(), 0.0);
    }

    #[test]
    fn kl_with_equal_variances() {
        let q = GaussianPosterior::new(vec![1.0, 2.0], 0.5).unwrap();
        let p = GaussianPosterior::new(vec![0.0, 0.0], 0.5).unwrap();
        assert_abs_diff_eq!(
            gaussian_kl(&q, &p).unwrap(),
            5.0 / (2.0 * 0.5),
            epsilon = 1e-12
        );
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let q = GaussianPosterior::new(vec![0.4, -0.2, 0.1], 0.3).unwrap();
        let p = GaussianPosterior::new(vec![0.0, 0.1, 0.5], 0.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20_000;
        let vals: Vec<f64> = (0..n)
            .map(|_| {
                let th = q.sample(&mut rng);
                q.log_density(&th) - p.log_density(&th)
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        let exact = gaussian_kl(&q, &p).unwrap();
        assert!(
            (mean - exact).abs() < 3.0 * se,
            "{mean} vs {exact} (se {se})"
        );
    }

    #[test]
    fn kl_rejects_dimension_mismatch_and_point_masses() {
        let q = GaussianPosterior::new(vec![0.0], 1.0).unwrap();
        let p = GaussianPosterior::new(vec![0.0, 0.0], 1.0).unwrap();
        assert!(matches!(gaussian_kl(&q, &p), Err(MergeError::Dimension(_))));
        let pm = GaussianPosterior::point_mass(vec![0.0]);
        assert!(gaussian_kl(&pm, &q).is_err());
        assert!(GaussianPosterior::new(vec![0.0], 0.0).is_err());
    }

    #[test]
    fn pinsker_examples() {
        assert_eq!(
            pinsker_check(&pd(&[0.3, 0.7]), &pd(&[0.3, 0.7])).unwrap(),
            (0.0, 0.0)
        );
        let (tv, b) = pinsker_check(&pd(&[1.0, 0.0]), &pd(&[0.5, 0.5])).unwrap();
        assert_abs_diff_eq!(tv, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(b, (2f64.ln() / 2.0).sqrt(), epsilon = 1e-12);
        assert!(tv <= b);
    }

    #[test]
    fn excess_is_zero_when_everything_agrees() {
        let r = single(&[0.2, 0.8], &[0.2, 0.8], &[0.2, 0.8]);
        assert_eq!(r.lhs, 0.0);
        assert_eq!(r.rhs, 0.0);
        assert!(r.holds());
    }

    #[test]
    fn excess_hand_example_with_tie() {
        let r = single(&[1.0, 0.0], &[1.0, 0.0], &[0.5, 0.5]);
        assert_eq!(r.lhs, 0.0);
        assert_abs_diff_eq!(r.rhs, (2.0 * 2f64.ln()).sqrt(), epsilon = 1e-12);
        let flipped = single(&[0.0, 1.0], &[0.0, 1.0], &[0.5, 0.5]);
        assert_eq!(flipped.lhs, 1.0);
        assert!(flipped.holds());
    }

    #[test]
    fn excess_rejects_bad_alpha() {
        let ds = FiniteTaskDataset {
            tasks: vec![FiniteTask {
                input_weights: pd(&[1.0]),
                conditionals: vec![pd(&[0.5, 0.5])],
            }],
            alpha: vec![0.7],
        };
        let d = vec![vec![pd(&[0.5, 0.5])]];
        assert!(matches!(
            excess_risk_check(&ds, &d, &d),
            Err(MergeError::InvalidDistribution(_))
        ));
    }

    #[test]
    fn flatness_of_scalar_square_loss() {
        use crate::nn::{Activation, Layer};
        let net = ParamSet::new(vec![Layer {
            w: Matrix::new(1, 1, vec![1.0]).unwrap(),
            b: vec![0.0],
            act: Activation::Identity,
        }])
        .unwrap();
        let x = Matrix::new(1, 1, vec![1.0]).unwrap();
        let targets = [0.0];
        // The bias gradient also equals 2θx − 2y, so ‖∇‖² is twice the weight part.
        let g = flatness_proxy(
            &net,
            &x,
            Objective::SquaredError {
                targets: &targets,
                scale: 1.0,
            },
        )
        .unwrap();
        assert_abs_diff_eq!(g, 8.0, epsilon = 1e-12);
        let empty = Matrix::zeros(0, 1);
        assert!(flatness_proxy(&net, &empty, Objective::Entropy).is_err());
    }
}
