//! Shared instance generators, finite-difference gradient checks and
//! literal re-implementations of the static mergers.

#![allow(dead_code)]

use mergelab::adaptive::{MergeObjective, MergeProblem};
use mergelab::nn::{
    backward_params, forward, layer_inputs, mean_loss, mlp_specs, Activation, Matrix, Objective,
    ParamSet,
};
use mergelab::static_mergers::{
    collect_gram_stats, estimate_diag_fisher, fisher_merge, regmean_merge, ties_merge,
    FisherConfig, TiesConfig,
};
use mergelab::task_vectors::{compute_task_vectors, MergeCoefficients, TaskVector};
use mergelab::Execution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const H: f64 = 1e-5;

pub fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| StandardNormal.sample(rng))
            .collect(),
    )
    .unwrap()
}

pub fn random_net(rng: &mut ChaCha8Rng) -> ParamSet {
    random_net_with(
        rng,
        &[Activation::Tanh, Activation::Relu, Activation::Identity],
    )
}

pub fn random_net_with(rng: &mut ChaCha8Rng, acts: &[Activation]) -> ParamSet {
    let depth = rng.random_range(1..=3);
    let mut dims = vec![rng.random_range(1..=5)];
    for _ in 0..depth {
        dims.push(rng.random_range(2..=5));
    }
    let mut net = ParamSet::init(
        &mlp_specs(&dims, acts[rng.random_range(0..acts.len())]),
        rng,
    );
    // Nonzero biases keep ReLU pre-activations off the kink at exactly 0.
    for layer in &mut net.layers {
        layer
            .b
            .iter_mut()
            .for_each(|b| *b = rng.random_range(-0.5..0.5));
    }
    net
}

/// `tasks` perturbations of `theta_0`.
pub fn perturbed(
    theta_0: &ParamSet,
    tasks: usize,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<ParamSet> {
    let specs = theta_0.specs();
    (0..tasks)
        .map(|_| {
            theta_0
                .add(&ParamSet::init(&specs, rng).scale(scale))
                .unwrap()
        })
        .collect()
}

pub fn teacher_probs(rows: usize, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut p = Vec::with_capacity(rows * k);
    for _ in 0..rows {
        let w: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.05).collect();
        let s: f64 = w.iter().sum();
        p.extend(w.iter().map(|v| v / s));
    }
    p
}

/// Relative error with a floor on the denominator so exact zeros compare.
pub fn rel_err(a: f64, b: f64) -> f64 {
    nan_as_inf((a - b).abs() / a.abs().max(b.abs()).max(1e-4))
}

/// `f64::max` drops NaN, which would hide a broken comparison.
fn nan_as_inf(e: f64) -> f64 {
    if e.is_nan() {
        f64::INFINITY
    } else {
        e
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| nan_as_inf((x - y).abs()))
        .fold(0.0, f64::max)
}

/// Worst relative error of `∇θ` against central differences, cycling
/// through the four per-sample objectives.
pub fn param_grad_worst(instances: u64, seed_base: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for inst in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_base + inst);
        let net = random_net(&mut rng);
        let rows = rng.random_range(1..=6);
        let x = gaussian(rows, net.input_dim(), &mut rng);
        let k = net.output_dim();
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..k)).collect();
        let teacher = teacher_probs(rows, k, &mut rng);
        let targets: Vec<f64> = (0..rows * k)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let obj = match inst % 4 {
            0 => Objective::CrossEntropy(&labels),
            1 => Objective::KlToTeacher(&teacher),
            2 => Objective::Entropy,
            _ => Objective::SquaredError {
                targets: &targets,
                scale: 0.5,
            },
        };
        let (_, grad) = backward_params(&net, &x, obj).unwrap();
        let flat = net.flatten();
        let g = grad.flatten();
        for i in 0..flat.len() {
            let mut p = flat.clone();
            p[i] += H;
            let up = mean_loss(&net.unflatten(&p).unwrap(), &x, obj).unwrap();
            p[i] -= 2.0 * H;
            let down = mean_loss(&net.unflatten(&p).unwrap(), &x, obj).unwrap();
            worst = worst.max(rel_err(g[i], (up - down) / (2.0 * H)));
        }
    }
    worst
}

/// Worst relative error of `∇λ` of the KL and entropy merge objectives
/// against central differences.
pub fn coef_grad_worst(instances: u64, seed_base: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for inst in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_base + inst);
        let theta_0 = random_net(&mut rng);
        let tasks = rng.random_range(1..=3);
        let teachers = perturbed(&theta_0, tasks, 0.5, &mut rng);
        let taus = compute_task_vectors(&theta_0, &teachers).unwrap();
        let calib: Vec<Matrix> = (0..tasks)
            .map(|_| {
                let r = rng.random_range(1..=5);
                gaussian(r, theta_0.input_dim(), &mut rng)
            })
            .collect();
        let problem = MergeProblem::new(
            &theta_0,
            &taus,
            Some(&teachers),
            &calib,
            None,
            Execution::Sequential,
        )
        .unwrap();
        let groups = theta_0.num_groups();
        let lam_flat: Vec<f64> = (0..tasks * groups)
            .map(|_| rng.random_range(-0.5..1.0))
            .collect();
        let lam = MergeCoefficients::from_flat(tasks, groups, &lam_flat).unwrap();
        let objective = if inst % 2 == 0 {
            MergeObjective::Kl
        } else {
            MergeObjective::Entropy
        };
        let (_, g) = problem.objective_and_grad(&lam, objective).unwrap();
        let g = g.flat();
        let at = |p: &[f64]| {
            problem
                .objective(
                    &MergeCoefficients::from_flat(tasks, groups, p).unwrap(),
                    objective,
                )
                .unwrap()
        };
        for i in 0..lam_flat.len() {
            let mut p = lam_flat.clone();
            p[i] += H;
            let up = at(&p);
            p[i] -= 2.0 * H;
            let down = at(&p);
            worst = worst.max(rel_err(g[i], (up - down) / (2.0 * H)));
        }
    }
    worst
}

fn literal_kept(frac: f64, n: usize) -> usize {
    let x = frac * n as f64;
    let k = if (x - x.round()).abs() < 1e-9 {
        x.round()
    } else {
        x.ceil()
    };
    (k as usize).max(1).min(n)
}

/// TIES written out step by step: rank each entry by counting entries
/// that beat it, zero those outside the top `k`, elect the sign of the
/// column sum and average the agreeing survivors.
pub fn ties_literal(theta_0: &ParamSet, taus: &[TaskVector], cfg: &TiesConfig) -> Vec<f64> {
    let n = theta_0.num_params();
    let k = literal_kept(cfg.keep_fraction, n);
    let mut trimmed: Vec<Vec<f64>> = Vec::new();
    for tau in taus {
        let v = tau.deltas.flatten();
        let mut t = vec![0.0; n];
        for i in 0..n {
            let mut better = 0;
            for j in 0..n {
                if v[j].abs() > v[i].abs() || (v[j].abs() == v[i].abs() && j < i) {
                    better += 1;
                }
            }
            if better < k {
                t[i] = v[i];
            }
        }
        trimmed.push(t);
    }
    let base = theta_0.flatten();
    let mut out = base.clone();
    for i in 0..n {
        let mut total = 0.0;
        for t in &trimmed {
            total += t[i];
        }
        let mut sum = 0.0;
        let mut count = 0.0;
        for t in &trimmed {
            let agrees = (total > 0.0 && t[i] > 0.0) || (total < 0.0 && t[i] < 0.0);
            if agrees {
                sum += t[i];
                count += 1.0;
            }
        }
        if count > 0.0 {
            out[i] = base[i] + cfg.scale * sum / count;
        }
    }
    out
}

pub fn ties_oracle_worst(instances: u64, seed_base: u64) -> f64 {
    let fracs = [0.1, 0.2, 0.3, 0.5, 0.75, 1.0];
    let mut worst: f64 = 0.0;
    for inst in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_base + inst);
        let theta_0 = random_net(&mut rng);
        let tasks = rng.random_range(1..=4);
        let thetas = perturbed(&theta_0, tasks, 1.0, &mut rng);
        let mut taus = compute_task_vectors(&theta_0, &thetas).unwrap();
        // Occasional exact ties in magnitude exercise the index tie-break.
        if inst % 5 == 0 {
            for tau in &mut taus {
                tau.deltas = tau.deltas.map(|v| (v * 4.0).round() / 4.0);
            }
        }
        let cfg = TiesConfig {
            keep_fraction: fracs[rng.random_range(0..fracs.len())],
            scale: rng.random_range(0.1..1.5),
        };
        let got = ties_merge(&theta_0, &taus, &cfg).unwrap().flatten();
        worst = worst.max(max_abs_diff(&got, &ties_literal(&theta_0, &taus, &cfg)));
    }
    worst
}

fn sample_cdf(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (c, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    probs.len() - 1
}

fn softmax_row(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Diagonal Fisher from one single-row backward pass per sample.
pub fn fisher_literal(theta: &ParamSet, x: &Matrix, cfg: &FisherConfig) -> Vec<f64> {
    let n = cfg.num_samples.min(x.rows);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut acc = vec![0.0; theta.num_params()];
    for r in 0..n {
        let xr = x.slice_rows(r, r + 1);
        let logits = forward(theta, &xr).unwrap();
        let probs = softmax_row(logits.row(0));
        let u: f64 = rng.random();
        let label = [sample_cdf(&probs, u)];
        let (_, g) = backward_params(theta, &xr, Objective::CrossEntropy(&label)).unwrap();
        for (a, v) in acc.iter_mut().zip(g.flatten()) {
            *a += v * v / n as f64;
        }
    }
    let mean = acc.iter().sum::<f64>() / acc.len() as f64;
    acc.iter()
        .map(|v| if mean > 0.0 { v / mean } else { *v })
        .map(|v| v.max(cfg.floor))
        .collect()
}

pub fn fisher_oracle_worst(instances: u64, seed_base: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for inst in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_base + inst);
        let theta_0 = random_net(&mut rng);
        let tasks = rng.random_range(1..=4);
        let thetas = perturbed(&theta_0, tasks, 0.5, &mut rng);
        let cfg = FisherConfig {
            num_samples: rng.random_range(1..=12),
            floor: 1e-6,
            seed: rng.random(),
        };
        let mut fishers = Vec::new();
        let mut literal = Vec::new();
        for th in &thetas {
            let rows = rng.random_range(1..=10);
            let x = gaussian(rows, theta_0.input_dim(), &mut rng);
            let f = estimate_diag_fisher(th, &x, &cfg).unwrap();
            let want = fisher_literal(th, &x, &cfg);
            worst = worst.max(max_abs_diff(&f.flatten(), &want));
            fishers.push(f);
            literal.push(want);
        }
        let got = fisher_merge(&thetas, &fishers).unwrap().flatten();
        let flat: Vec<Vec<f64>> = thetas.iter().map(|t| t.flatten()).collect();
        let want: Vec<f64> = (0..got.len())
            .map(|i| {
                let mut num = 0.0;
                let mut den = 0.0;
                for t in 0..thetas.len() {
                    num += literal[t][i] * flat[t][i];
                    den += literal[t][i];
                }
                num / den
            })
            .collect();
        worst = worst.max(max_abs_diff(&got, &want));
    }
    worst
}

/// Gaussian elimination with partial pivoting on `A X = B`; `B` has
/// `m` columns stored row-major.
pub fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| a[i][c].abs().partial_cmp(&a[j][c].abs()).unwrap())
            .unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            for k in 0..b[r].len() {
                b[r][k] -= f * b[c][k];
            }
        }
    }
    let m = b.first().map_or(0, |r| r.len());
    let mut x = vec![vec![0.0; m]; n];
    for r in (0..n).rev() {
        for k in 0..m {
            let mut s = b[r][k];
            for j in r + 1..n {
                s -= a[r][j] * x[j][k];
            }
            x[r][k] = s / a[r][r];
        }
    }
    x
}

/// RegMean from the normal equations, with Grams accumulated entry by
/// entry from the inputs each layer sees.
pub fn regmean_literal(thetas: &[ParamSet], inputs: &[Matrix], rho_off: f64) -> ParamSet {
    let mut out = thetas[0].clone();
    let acts: Vec<Vec<Matrix>> = thetas
        .iter()
        .zip(inputs)
        .map(|(th, x)| layer_inputs(th, x).unwrap())
        .collect();
    for l in 0..out.layers.len() {
        let (o, d) = (out.layers[l].w.rows, out.layers[l].w.cols);
        let mut a = vec![vec![0.0; d]; d];
        let mut b = vec![vec![0.0; o]; d];
        for (t, th) in thetas.iter().enumerate() {
            let x = &acts[t][l];
            let mut g = vec![vec![0.0; d]; d];
            for i in 0..d {
                for j in 0..d {
                    let mut s = 0.0;
                    for r in 0..x.rows {
                        s += x.get(r, i) * x.get(r, j);
                    }
                    g[i][j] = if i == j { s } else { rho_off * s };
                }
            }
            let w = &th.layers[l].w;
            for i in 0..d {
                for j in 0..d {
                    a[i][j] += g[i][j];
                    for k in 0..o {
                        b[i][k] += g[i][j] * w.get(k, j);
                    }
                }
            }
        }
        let x = solve_linear(a, b);
        for k in 0..o {
            for i in 0..d {
                out.layers[l].w.set(k, i, x[i][k]);
            }
        }
        for k in 0..o {
            out.layers[l].b[k] =
                thetas.iter().map(|t| t.layers[l].b[k]).sum::<f64>() / thetas.len() as f64;
        }
    }
    out
}

pub fn regmean_oracle_worst(instances: u64, seed_base: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for inst in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_base + inst);
        // A dead ReLU unit would leave the normal equations singular.
        let theta_0 = random_net_with(&mut rng, &[Activation::Tanh, Activation::Identity]);
        let tasks = rng.random_range(1..=4);
        let thetas = perturbed(&theta_0, tasks, 0.5, &mut rng);
        let rho_off = rng.random_range(0.1..=1.0);
        let widest = theta_0.layers.iter().map(|l| l.w.cols).max().unwrap();
        let inputs: Vec<Matrix> = thetas
            .iter()
            .map(|_| {
                let rows = widest + rng.random_range(3..=8);
                gaussian(rows, theta_0.input_dim(), &mut rng)
            })
            .collect();
        let grams: Vec<_> = thetas
            .iter()
            .zip(&inputs)
            .map(|(t, x)| collect_gram_stats(t, x).unwrap())
            .collect();
        let got = regmean_merge(&thetas, &grams, rho_off).unwrap().flatten();
        let want = regmean_literal(&thetas, &inputs, rho_off).flatten();
        let scale = want.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        worst = worst.max(max_abs_diff(&got, &want) / scale);
    }
    worst
}
