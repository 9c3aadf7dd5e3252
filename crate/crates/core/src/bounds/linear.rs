//! Exactly-linear scalar-score models `s(θ; x) = φ(x)ᵀθ` with the bounded
//! quadratic loss `ℓ(s, y) = (s − y)² / B`, where `B = (R + 1)²` for
//! scores in `[−R, R]` and targets in `[−1, 1]`. The loss is `2/B`-smooth
//! in the score, and every expectation over an isotropic Gaussian posterior
//! has a closed form through the kernel `K = E[φφᵀ]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_simplex, gaussian_kl, term, BoundReport, GaussianPosterior};
use crate::error::{dim_err, MergeError, Result};
use crate::exec::derive_seed;
use crate::nn::{matrix::dot, Activation, Matrix, ParamSet};

/// Features `φ(x_i)` stacked as rows together with real targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSample {
    pub features: Matrix,
    pub targets: Vec<f64>,
}

impl LinearSample {
    pub fn new(features: Matrix, targets: Vec<f64>) -> Result<Self> {
        if features.rows != targets.len() {
            return Err(dim_err("feature rows != target count"));
        }
        if features.rows == 0 {
            return Err(MergeError::Empty("linear sample"));
        }
        Ok(LinearSample { features, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols
    }

    /// `K = (1/n) Σ φ_i φ_iᵀ`.
    pub fn kernel(&self) -> Matrix {
        let mut k = self.features.matmul_tn(&self.features).expect("square");
        let n = self.len() as f64;
        k.data.iter_mut().for_each(|v| *v /= n);
        k
    }

    fn residuals(&self, theta: &[f64]) -> impl Iterator<Item = (f64, f64)> + '_ {
        let theta = theta.to_vec();
        (0..self.len()).map(move |i| {
            let phi = self.features.row(i);
            (dot(phi, &theta) - self.targets[i], dot(phi, phi))
        })
    }
}

/// Second-moment summary of a sample: `mean (φᵀθ − y)² = θᵀKθ − 2bᵀθ + c`.
#[derive(Debug, Clone)]
struct Moments {
    k: Matrix,
    b: Vec<f64>,
    c: f64,
}

impl Moments {
    fn of(s: &LinearSample) -> Moments {
        let n = s.len() as f64;
        let mut b = vec![0.0; s.dim()];
        for i in 0..s.len() {
            for (bj, f) in b.iter_mut().zip(s.features.row(i)) {
                *bj += s.targets[i] * f / n;
            }
        }
        Moments {
            k: s.kernel(),
            b,
            c: s.targets.iter().map(|y| y * y).sum::<f64>() / n,
        }
    }

    fn mean_sq_residual(&self, theta: &[f64]) -> f64 {
        let kt = quad_vec(&self.k, theta);
        dot(theta, &kt) - 2.0 * dot(&self.b, theta) + self.c
    }
}

fn quad_vec(k: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..k.rows).map(|r| dot(k.row(r), v)).collect()
}

fn quad_form(k: &Matrix, v: &[f64]) -> f64 {
    dot(v, &quad_vec(k, v))
}

fn kernel_mix(ks: &[Matrix], w: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(ks[0].rows, ks[0].cols);
    for (k, wi) in ks.iter().zip(w) {
        for (o, v) in out.data.iter_mut().zip(&k.data) {
            *o += wi * v;
        }
    }
    out
}

/// Linear predictor with a declared score radius `R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearTaskModel {
    pub dim: usize,
    pub radius: f64,
    pub theta_0: Vec<f64>,
}

impl LinearTaskModel {
    pub fn new(theta_0: Vec<f64>, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(MergeError::InvalidConfig(
                "score radius must be positive".into(),
            ));
        }
        Ok(LinearTaskModel {
            dim: theta_0.len(),
            radius,
            theta_0,
        })
    }

    /// Accepts a single identity layer with one output; its features are
    /// `[x, 1]` and its parameter vector is `[w, b]`.
    pub fn from_network(net: &ParamSet, radius: f64) -> Result<Self> {
        match net.layers.as_slice() {
            [l] if l.act == Activation::Identity && l.w.rows == 1 => {
                let mut theta = l.w.row(0).to_vec();
                theta.push(l.b[0]);
                LinearTaskModel::new(theta, radius)
            }
            _ => Err(MergeError::UnsupportedModel(format!(
                "score is not affine in the parameters ({} layers, output dim {})",
                net.layers.len(),
                net.output_dim()
            ))),
        }
    }

    pub fn features_of(inputs: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(inputs.rows, inputs.cols + 1);
        for r in 0..inputs.rows {
            let row = out.row_mut(r);
            row[..inputs.cols].copy_from_slice(inputs.row(r));
            row[inputs.cols] = 1.0;
        }
        out
    }

    /// `B = (R + 1)²`, the loss normaliser.
    pub fn scale(&self) -> f64 {
        (self.radius + 1.0).powi(2)
    }

    /// `γ = 2/B`.
    pub fn gamma(&self) -> f64 {
        2.0 / self.scale()
    }

    fn check(&self, s: &LinearSample) -> Result<()> {
        if s.dim() != self.dim {
            return Err(dim_err(format!(
                "features have {} dims, model {}",
                s.dim(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Per-row loss at a point.
    pub fn row_losses(&self, theta: &[f64], s: &LinearSample) -> Vec<f64> {
        let b = self.scale();
        s.residuals(theta).map(|(r, _)| r * r / b).collect()
    }

    /// Empirical loss at a point.
    pub fn loss(&self, theta: &[f64], s: &LinearSample) -> f64 {
        self.row_losses(theta, s).iter().sum::<f64>() / s.len() as f64
    }

    /// Per-row expected loss under `Q`: `((φᵀμ − y)² + σ²‖φ‖²) / B`.
    pub fn posterior_row_losses(&self, q: &GaussianPosterior, s: &LinearSample) -> Vec<f64> {
        let b = self.scale();
        s.residuals(&q.mean)
            .map(|(r, f)| (r * r + q.sigma2 * f) / b)
            .collect()
    }

    pub fn posterior_loss(&self, q: &GaussianPosterior, s: &LinearSample) -> f64 {
        self.posterior_row_losses(q, s).iter().sum::<f64>() / s.len() as f64
    }

    /// `G(θ) = mean ‖∇_θ ℓ‖² = mean (2(φᵀθ − y)/B)² ‖φ‖²`.
    pub fn flatness(&self, theta: &[f64], s: &LinearSample) -> f64 {
        let b = self.scale();
        s.residuals(theta)
            .map(|(r, f)| 4.0 * r * r * f / (b * b))
            .sum::<f64>()
            / s.len() as f64
    }

    /// `G(Q) = E_{θ∼Q} G(θ)`, exact for isotropic Gaussians.
    pub fn posterior_flatness(&self, q: &GaussianPosterior, s: &LinearSample) -> f64 {
        let b = self.scale();
        s.residuals(&q.mean)
            .map(|(r, f)| 4.0 * f * (r * r + q.sigma2 * f) / (b * b))
            .sum::<f64>()
            / s.len() as f64
    }
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta < 2.0) {
        return Err(MergeError::InvalidConfig(format!(
            "eta must lie in (0, 2), got {eta}"
        )));
    }
    Ok(())
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(MergeError::InvalidConfig(format!(
            "delta must lie in (0, 1], got {delta}"
        )));
    }
    Ok(())
}

/// Single-task PAC-Bayes bound on `L_D(Q)`.
///
/// `sample` is the training set `S` the posterior was fitted on;
/// `population` is a large held-out sample standing in for `D`.
pub fn per_task_bound_rhs(
    model: &LinearTaskModel,
    posterior: &GaussianPosterior,
    prior: &GaussianPosterior,
    sample: &LinearSample,
    population: &LinearSample,
    eta: f64,
    delta: f64,
) -> Result<BoundReport> {
    check_eta(eta)?;
    check_delta(delta)?;
    model.check(sample)?;
    model.check(population)?;
    let n = sample.len() as f64;
    let emp = model.posterior_loss(posterior, sample);
    let kl = gaussian_kl(posterior, prior)?;
    let g = model.posterior_flatness(posterior, population);
    let scale = 1.0 / (1.0 - eta / 2.0);
    let (lhs, se) = mean_and_se(&model.posterior_row_losses(posterior, population));
    Ok(BoundReport::assemble(
        "pertask",
        lhs,
        se,
        vec![
            term("empirical", scale * emp),
            term("complexity", scale * (kl + (1.0 / delta).ln()) / (eta * n)),
            term("flatness", eta / (2.0 - eta) * posterior.sigma2 * g),
        ],
        vec![
            term("empirical_loss", emp),
            term("kl", kl),
            term("flatness_proxy", g),
        ],
        vec![
            ("train".into(), sample.len()),
            ("population".into(), population.len()),
        ],
    ))
}

/// Bound on `L_α(θ_merge)` for `θ_merge = Σ β_j μ_j`.
#[allow(clippy::too_many_arguments)]
pub fn merged_bound_rhs(
    model: &LinearTaskModel,
    posteriors: &[GaussianPosterior],
    prior: &GaussianPosterior,
    samples: &[LinearSample],
    populations: &[LinearSample],
    etas: &[f64],
    deltas: &[f64],
    alpha: &[f64],
    beta: &[f64],
) -> Result<BoundReport> {
    let t = posteriors.len();
    if t == 0 {
        return Err(MergeError::Empty("posteriors"));
    }
    for (len, what) in [
        (samples.len(), "samples"),
        (populations.len(), "populations"),
        (etas.len(), "etas"),
        (deltas.len(), "deltas"),
        (alpha.len(), "alpha"),
        (beta.len(), "beta"),
    ] {
        if len != t {
            return Err(dim_err(format!("{what}: expected {t} entries, got {len}")));
        }
    }
    check_simplex(alpha, "alpha")?;
    check_simplex(beta, "beta")?;
    for ((e, d), q) in etas.iter().zip(deltas).zip(posteriors) {
        check_eta(*e)?;
        check_delta(*d)?;
        if q.dim() != model.dim {
            return Err(dim_err("posterior dimension != model dimension"));
        }
    }
    for s in samples.iter().chain(populations) {
        model.check(s)?;
    }
    let gamma = model.gamma();
    let d = model.dim;
    let kernels: Vec<Matrix> = populations.iter().map(LinearSample::kernel).collect();
    let k_alpha = kernel_mix(&kernels, alpha);
    let k_beta = kernel_mix(&kernels, beta);

    let mut merge = vec![0.0; d];
    for (q, b) in posteriors.iter().zip(beta) {
        for (m, v) in merge.iter_mut().zip(&q.mean) {
            *m += b * v;
        }
    }

    let mut components = Vec::new();
    let mut details = Vec::new();
    for j in 0..t {
        let q = &posteriors[j];
        let scale = 1.0 / (1.0 - etas[j] / 2.0);
        let emp = model.loss(&q.mean, &samples[j]);
        let tr = q.sigma2 * kernels[j].trace();
        let tr_sq = q.sigma2 * kernels[j].frobenius_sq();
        let kl = gaussian_kl(q, prior)?;
        let g = model.flatness(&q.mean, &populations[j]);
        let n = samples[j].len() as f64;
        let b = beta[j];
        components.push(term(format!("task{j}.empirical"), b * scale * emp));
        components.push(term(format!("task{j}.trace"), b * scale * gamma / 2.0 * tr));
        components.push(term(
            format!("task{j}.complexity"),
            b * scale * (kl + (1.0 / deltas[j]).ln()) / (etas[j] * n),
        ));
        components.push(term(
            format!("task{j}.flatness"),
            b * etas[j] / (2.0 - etas[j]) * q.sigma2 * (g.sqrt() + gamma * tr_sq.sqrt()).powi(2),
        ));
        details.push(term(format!("task{j}.empirical_loss"), emp));
        details.push(term(format!("task{j}.kl"), kl));
        details.push(term(format!("task{j}.flatness_proxy"), g));
    }

    let pop_losses: Vec<Vec<f64>> = populations
        .iter()
        .map(|p| model.row_losses(&merge, p))
        .collect();
    let risks: Vec<f64> = pop_losses
        .iter()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .collect();
    let gap: f64 = (0..t).map(|i| (alpha[i] - beta[i]) * risks[i]).sum();
    let g_merge: f64 = (0..t)
        .map(|i| (alpha[i] + beta[i]) * model.flatness(&merge, &populations[i]))
        .sum();
    let deltas_j: Vec<Vec<f64>> = posteriors
        .iter()
        .map(|q| q.mean.iter().zip(&merge).map(|(a, b)| a - b).collect())
        .collect();
    let dispersion: f64 = (0..t)
        .map(|j| beta[j] * dot(&deltas_j[j], &deltas_j[j]))
        .sum();
    let k_sum = kernel_mix(&[k_alpha.clone(), k_beta], &[1.0, 1.0]);
    let quadratic: f64 = (0..t)
        .map(|j| beta[j] * quad_form(&k_sum, &deltas_j[j]))
        .sum();
    let trace_alpha: f64 = (0..t)
        .map(|j| beta[j] * posteriors[j].sigma2 * k_alpha.trace())
        .sum();
    components.push(term("mixture_gap", gap));
    components.push(term(
        "gradient_dispersion",
        (2.0 * g_merge).sqrt() * dispersion.sqrt(),
    ));
    components.push(term("quadratic", gamma / 2.0 * quadratic));
    components.push(term("trace_alpha", gamma / 2.0 * trace_alpha));
    details.push(term("dispersion", dispersion));
    details.push(term("merged_flatness", g_merge));

    let lhs: f64 = (0..t).map(|i| alpha[i] * risks[i]).sum();
    let se = (0..t)
        .map(|i| {
            let (_, s) = mean_and_se(&pop_losses[i]);
            (alpha[i] * s).powi(2)
        })
        .sum::<f64>()
        .sqrt();
    let mut counts: Vec<(String, usize)> = Vec::new();
    for j in 0..t {
        counts.push((format!("task{j}.train"), samples[j].len()));
        counts.push((format!("task{j}.population"), populations[j].len()));
    }
    Ok(BoundReport::assemble(
        "merged", lhs, se, components, details, counts,
    ))
}

/// Cross-task heterogeneity estimate with its Monte-Carlo error.
#[derive(Debug, Clone, PartialEq)]
pub struct Heterogeneity {
    pub value: f64,
    pub se: f64,
    /// `risks[i][j] ≈ L_{D_i}(Q_j)`.
    pub risks: Vec<Vec<f64>>,
}

fn check_mixture(
    model: &LinearTaskModel,
    posteriors: &[GaussianPosterior],
    datasets: &[LinearSample],
    alpha: &[f64],
    beta: &[f64],
) -> Result<()> {
    let t = posteriors.len();
    if t == 0 {
        return Err(MergeError::Empty("posteriors"));
    }
    if datasets.len() != t || alpha.len() != t || beta.len() != t {
        return Err(dim_err("posteriors, datasets, alpha and beta must align"));
    }
    check_simplex(alpha, "alpha")?;
    check_simplex(beta, "beta")?;
    for d in datasets {
        model.check(d)?;
    }
    if posteriors.iter().any(|q| q.dim() != model.dim) {
        return Err(dim_err("posterior dimension != model dimension"));
    }
    Ok(())
}

/// Per-draw risks `r[j][m][i] = L_{D_i}(θ_j^{(m)})`, drawing `θ_j^{(m)} ∼ Q_j`
/// from an independent stream per posterior. Point masses use one draw.
fn draw_risks(
    model: &LinearTaskModel,
    posteriors: &[GaussianPosterior],
    datasets: &[LinearSample],
    mc_samples: usize,
    seed: u64,
) -> Vec<Vec<Vec<f64>>> {
    let moments: Vec<Moments> = datasets.iter().map(Moments::of).collect();
    let b = model.scale();
    posteriors
        .iter()
        .enumerate()
        .map(|(j, q)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, j as u64));
            let m = if q.sigma2 == 0.0 {
                1
            } else {
                mc_samples.max(1)
            };
            (0..m)
                .map(|_| {
                    let th = if q.sigma2 == 0.0 {
                        q.mean.clone()
                    } else {
                        q.sample(&mut rng)
                    };
                    moments
                        .iter()
                        .map(|mo| mo.mean_sq_residual(&th) / b)
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn heterogeneity_from(draws: &[Vec<Vec<f64>>], alpha: &[f64], beta: &[f64]) -> Heterogeneity {
    let t = alpha.len();
    let mut risks = vec![vec![0.0; t]; t];
    let mut value = 0.0;
    let mut var = 0.0;
    for (j, dj) in draws.iter().enumerate() {
        let m = dj.len() as f64;
        for i in 0..t {
            risks[i][j] = dj.iter().map(|r| r[i]).sum::<f64>() / m;
        }
        let h: Vec<f64> = dj
            .iter()
            .map(|r| (0..t).map(|i| alpha[i] * (r[i] - r[j])).sum())
            .collect();
        let (mean, se) = mean_and_se(&h);
        value += beta[j] * mean;
        var += (beta[j] * se).powi(2);
    }
    Heterogeneity {
        value,
        se: var.sqrt(),
        risks,
    }
}

/// `H = Σ_i Σ_j α_i β_j (L_{D_i}(Q_j) − L_{D_j}(Q_j))`.
pub fn heterogeneity(
    model: &LinearTaskModel,
    posteriors: &[GaussianPosterior],
    datasets: &[LinearSample],
    alpha: &[f64],
    beta: &[f64],
    mc_samples: usize,
    seed: u64,
) -> Result<Heterogeneity> {
    check_mixture(model, posteriors, datasets, alpha, beta)?;
    let draws = draw_risks(model, posteriors, datasets, mc_samples, seed);
    Ok(heterogeneity_from(&draws, alpha, beta))
}

/// Compares `L_α(Σ_j β_j Q_j)` with `Σ_j β_j L_{D_j}(Q_j) + H`, both
/// evaluated on one shared set of posterior draws. `lhs` is the mixture
/// risk, `rhs` the decomposition, and `slack` the signed residual.
pub fn decomposition_check(
    model: &LinearTaskModel,
    posteriors: &[GaussianPosterior],
    datasets: &[LinearSample],
    alpha: &[f64],
    beta: &[f64],
    mc_samples: usize,
    seed: u64,
) -> Result<BoundReport> {
    check_mixture(model, posteriors, datasets, alpha, beta)?;
    let draws = draw_risks(model, posteriors, datasets, mc_samples, seed);
    let h = heterogeneity_from(&draws, alpha, beta);
    let t = alpha.len();
    let mut mixture = 0.0;
    for (i, a) in alpha.iter().enumerate() {
        for (j, b) in beta.iter().enumerate() {
            mixture += a * b * h.risks[i][j];
        }
    }
    let own: f64 = (0..t).map(|j| beta[j] * h.risks[j][j]).sum();
    let draws_used: usize = draws.iter().map(Vec::len).sum();
    Ok(BoundReport::assemble(
        "decomposition",
        mixture,
        h.se,
        vec![term("own_task_risk", own), term("heterogeneity", h.value)],
        vec![term("mixture_risk", mixture)],
        vec![
            ("posterior_draws".into(), draws_used),
            (
                "data_points".into(),
                datasets.iter().map(LinearSample::len).sum(),
            ),
        ],
    ))
}
