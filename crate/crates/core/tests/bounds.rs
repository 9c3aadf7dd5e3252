mod common;

use mergelab::bounds::{
    decomposition_check, flatness_proxy, gaussian_kl, heterogeneity, merged_bound_rhs,
    per_task_bound_rhs, pinsker_check, GaussianPosterior, LinearSample, LinearTaskModel,
};
use mergelab::nn::{softmax, Objective};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn linear_sample(n: usize, theta: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> LinearSample {
    let d = theta.len();
    let x = common::gaussian(n, d, rng);
    let targets = (0..n)
        .map(|r| {
            let s: f64 = x.row(r).iter().zip(theta).map(|(a, b)| a * b).sum();
            s + noise * rng.random_range(-1.0..1.0)
        })
        .collect();
    LinearSample::new(x, targets).unwrap()
}

#[test]
fn flatness_is_invariant_to_a_shared_logit_shift() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = common::random_net(&mut rng);
        let rows = rng.random_range(1..=8);
        let x = common::gaussian(rows, net.input_dim(), &mut rng);
        let k = net.output_dim();
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..k)).collect();
        let before = flatness_proxy(&net, &x, Objective::CrossEntropy(&labels)).unwrap();
        let shift = rng.random_range(-3.0..3.0);
        net.layers
            .last_mut()
            .unwrap()
            .b
            .iter_mut()
            .for_each(|b| *b += shift);
        let after = flatness_proxy(&net, &x, Objective::CrossEntropy(&labels)).unwrap();
        assert!(
            (before - after).abs() <= 1e-9 * before.max(1.0),
            "{before} vs {after}"
        );
    }
}

#[test]
fn merged_bound_with_one_task_has_no_mixture_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let truth = vec![0.3, -0.2, 0.1];
    let model = LinearTaskModel::new(vec![0.0; 3], 2.0).unwrap();
    let s = linear_sample(100, &truth, 0.1, &mut rng);
    let pop = linear_sample(500, &truth, 0.1, &mut rng);
    let q = GaussianPosterior::new(truth.clone(), 0.01).unwrap();
    let prior = GaussianPosterior::new(vec![0.0; 3], 1.0).unwrap();
    let merged = merged_bound_rhs(
        &model,
        std::slice::from_ref(&q),
        &prior,
        std::slice::from_ref(&s),
        std::slice::from_ref(&pop),
        &[0.5],
        &[0.05],
        &[1.0],
        &[1.0],
    )
    .unwrap();
    assert_eq!(merged.component("mixture_gap"), Some(0.0));
    assert!(merged.component("gradient_dispersion").unwrap().abs() < 1e-12);
    let single = per_task_bound_rhs(&model, &q, &prior, &s, &pop, 0.5, 0.05).unwrap();
    assert!(single.holds() && merged.holds());
    let rhs_sum: f64 = merged.components.iter().map(|t| t.value).sum();
    assert!((rhs_sum - merged.rhs).abs() < 1e-12);
}

#[test]
fn identical_tasks_have_zero_heterogeneity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let truth = vec![0.5, 0.1];
    let model = LinearTaskModel::new(vec![0.0; 2], 2.0).unwrap();
    let s = linear_sample(60, &truth, 0.2, &mut rng);
    let q = GaussianPosterior::new(vec![0.4, 0.0], 0.02).unwrap();
    let posteriors = vec![q.clone(), q.clone(), q];
    let data = vec![s.clone(), s.clone(), s];
    let h = heterogeneity(
        &model,
        &posteriors,
        &data,
        &[0.2, 0.3, 0.5],
        &[0.6, 0.2, 0.2],
        200,
        9,
    )
    .unwrap();
    assert!(h.value.abs() < 1e-15, "{}", h.value);
    let prior = GaussianPosterior::new(vec![0.0; 2], 1.0).unwrap();
    let m = merged_bound_rhs(
        &model,
        &posteriors[..2],
        &prior,
        &data[..2],
        &data[..2],
        &[0.5, 0.5],
        &[0.05, 0.05],
        &[0.4, 0.6],
        &[0.4, 0.6],
    )
    .unwrap();
    assert!(m.component("gradient_dispersion").unwrap().abs() < 1e-12);
}

#[test]
fn decomposition_residual_on_random_instances() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let t = rng.random_range(2..=4);
        let d = rng.random_range(1..=5);
        let model = LinearTaskModel::new(vec![0.0; d], 2.0).unwrap();
        let mut posteriors = Vec::new();
        let mut data = Vec::new();
        for _ in 0..t {
            let truth: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
            data.push(linear_sample(
                rng.random_range(5..40),
                &truth,
                0.1,
                &mut rng,
            ));
            posteriors.push(GaussianPosterior::new(truth, rng.random_range(0.001..0.05)).unwrap());
        }
        let w = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..t).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
        };
        let (alpha, beta) = (w(&mut rng), w(&mut rng));
        let r = decomposition_check(&model, &posteriors, &data, &alpha, &beta, 500, seed).unwrap();
        assert!(r.slack.abs() < 1e-10, "residual {}", r.slack);
    }
}

fn dist(v: &[f64]) -> mergelab::nn::ProbDist {
    softmax(v)
}

proptest! {
    #[test]
    fn gaussian_kl_is_nonnegative_and_zero_on_the_diagonal(
        m1 in prop::collection::vec(-3.0f64..3.0, 1..6),
        s1 in 0.01f64..4.0,
        s2 in 0.01f64..4.0,
        shift in -2.0f64..2.0,
    ) {
        let q = GaussianPosterior::new(m1.clone(), s1).unwrap();
        let p = GaussianPosterior::new(m1.iter().map(|v| v + shift).collect(), s2).unwrap();
        prop_assert!(gaussian_kl(&q, &p).unwrap() >= -1e-12);
        prop_assert!(gaussian_kl(&q, &q).unwrap().abs() < 1e-12);
    }

    #[test]
    fn pinsker_holds_for_random_distributions(
        a in prop::collection::vec(-5.0f64..5.0, 2..8),
        seed in 0u64..10_000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f64> = a.iter().map(|_| rng.random_range(-5.0..5.0)).collect();
        let (tv, bound) = pinsker_check(&dist(&a), &dist(&b)).unwrap();
        prop_assert!(tv <= bound + 1e-12);
    }
}
