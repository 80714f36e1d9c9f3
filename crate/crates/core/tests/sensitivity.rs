mod common;

use common::allocation::{assigned_omega, enumerate, report};
use common::mlp::{gaussian, norm, Mlp, N_PARAMS};
use common::{random_model, tiny_config, Params};
use mixquant::sensitivity::{allocate_bits, allocate_dp, hutchinson_trace, hvp, probe_windows, Probe, ProbeLoss};
use mixquant::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[test]
fn mlp_gradient_matches_finite_differences() {
    let mlp = Mlp::new(0);
    let theta = gaussian(&mut ChaCha8Rng::seed_from_u64(1), N_PARAMS);
    let g = mlp.grad(&theta);
    for i in 0..N_PARAMS {
        let (mut p, mut m) = (theta.clone(), theta.clone());
        p[i] += 1e-6;
        m[i] -= 1e-6;
        let fd = (mlp.loss(&p) - mlp.loss(&m)) / 2e-6;
        assert!((fd - g[i]).abs() < 1e-7, "coordinate {i}: {fd} vs {}", g[i]);
    }
}

#[test]
fn hvp_matches_dense_hessian_on_random_probes() {
    let mlp = Mlp::new(2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let theta = gaussian(&mut rng, N_PARAMS);
    let dense = mlp.hessian(&theta);
    let mut grad = |t: &[f64]| Ok(mlp.grad(t));
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let v = gaussian(&mut rng, N_PARAMS);
        let exact: Vec<f64> = dense.iter().map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        let approx = hvp(&mut grad, &theta, &v).unwrap();
        let diff: Vec<f64> = approx.iter().zip(&exact).map(|(a, b)| a - b).collect();
        worst = worst.max(norm(&diff) / norm(&exact));
    }
    assert!(worst < 1e-3, "worst relative error {worst:.2e}");
}

#[test]
fn hvp_is_symmetric() {
    let mlp = Mlp::new(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let theta = gaussian(&mut rng, N_PARAMS);
    let mut grad = |t: &[f64]| Ok(mlp.grad(t));
    for _ in 0..20 {
        let (u, v) = (gaussian(&mut rng, N_PARAMS), gaussian(&mut rng, N_PARAMS));
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let uhv = dot(&u, &hvp(&mut grad, &theta, &v).unwrap());
        let vhu = dot(&v, &hvp(&mut grad, &theta, &u).unwrap());
        assert!((uhv - vhu).abs() <= 1e-3 * uhv.abs().max(vhu.abs()), "{uhv} vs {vhu}");
    }
}

#[test]
fn hvp_rejects_a_zero_direction() {
    let mut grad = |t: &[f64]| Ok(t.to_vec());
    assert!(matches!(hvp(&mut grad, &[1.0, 2.0], &[0.0, 0.0]), Err(Error::Degenerate(_))));
}

#[test]
fn language_model_curvature_matches_reference_second_differences() {
    let model = random_model(tiny_config(5, 1, false), 6);
    let stream: Vec<usize> = (0..20).map(|i| (i * 7 + 2) % 5).collect();
    let windows = probe_windows(&stream, model.config.max_len, 16);
    let theta: Vec<f64> = model.flatten().into_iter().map(f64::from).collect();
    let reference = |t: &[f64]| common::mean_nll(&Params::from_flat(model.config, t), &windows);
    let mut loss = ProbeLoss::new(model.clone(), windows.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let v = gaussian(&mut rng, theta.len());
        let hv = hvp(&mut loss, &theta, &v).unwrap();
        let vhv: f64 = v.iter().zip(&hv).map(|(a, b)| a * b).sum();
        let h = 1e-3;
        let shifted = |s: f64| -> Vec<f64> { theta.iter().zip(&v).map(|(t, d)| t + s * h * d).collect() };
        let exact = (reference(&shifted(1.0)) - 2.0 * reference(&theta) + reference(&shifted(-1.0))) / (h * h);
        assert!((vhv - exact).abs() < 1e-2 * exact.abs().max(1.0), "{vhv} vs {exact}");
    }
}

fn diagonal_quadratic(theta: &[f64]) -> mixquant::Result<Vec<f64>> {
    Ok(theta.iter().enumerate().map(|(i, t)| (i + 1) as f64 * t).collect())
}

#[test]
fn rademacher_probes_are_exact_on_diagonal_quadratics() {
    let mut grad = diagonal_quadratic;
    let est = hutchinson_trace(&mut grad, &[0.5, -0.25, 1.0], &[0..3], 7, Probe::Rademacher, 0).unwrap();
    assert_eq!(est.trace, 6.0);
    assert_eq!(est.std_error, 0.0);
}

#[test]
fn gaussian_probes_are_within_three_sigma() {
    // Var(zᵀAz) = 2·Σd² = 28, so 3σ of the mean of 10⁴ samples is 0.159.
    let mut grad = diagonal_quadratic;
    let est = hutchinson_trace(&mut grad, &[0.1, 0.2, 0.3], &[0..3], 10_000, Probe::Gaussian, 1).unwrap();
    assert!((est.trace - 6.0).abs() <= 0.16, "{}", est.trace);
}

#[test]
fn probes_stay_inside_the_cluster() {
    // Coordinates 1 and 3 of diag(1, 2, 3, 4) trace to 2 + 4.
    let mut grad = |t: &[f64]| -> mixquant::Result<Vec<f64>> {
        Ok(t.iter().enumerate().map(|(i, x)| (i + 1) as f64 * x).collect())
    };
    let est = hutchinson_trace(&mut grad, &[0.0; 4], &[1..2, 3..4], 5, Probe::Rademacher, 2).unwrap();
    assert_eq!(est.trace, 6.0);
}

#[test]
fn random_symmetric_traces_fall_within_three_standard_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut hits = 0;
    for trial in 0..100 {
        let b = DMatrix::<f64>::from_fn(20, 20, |_, _| rng.sample(StandardNormal));
        let a = (&b + b.transpose()) * 0.5;
        let theta = gaussian(&mut rng, 20);
        let mut grad = |t: &[f64]| -> mixquant::Result<Vec<f64>> {
            Ok((&a * DVector::from_column_slice(t)).iter().copied().collect())
        };
        let est = hutchinson_trace(&mut grad, &theta, &[0..20], 200, Probe::Gaussian, trial).unwrap();
        if (est.trace - a.trace()).abs() <= 3.0 * est.std_error {
            hits += 1;
        }
    }
    assert!(hits >= 95, "{hits}/100 within 3 standard errors");
}

#[test]
fn worked_example() {
    let bits = [1, 2, 4];
    let table = vec![(10, vec![1.0, 0.4, 0.1]), (10, vec![0.5, 0.15, 0.05])];
    let a = allocate_bits(&report(&table, &bits), 2.5).unwrap();
    let chosen: Vec<u32> = a.clusters.iter().map(|c| c.bits).collect();
    assert_eq!(chosen, vec![2, 2]);
    assert!((a.total_omega.unwrap() - 0.55).abs() < 1e-12);
    let loose = allocate_bits(&report(&table, &bits), 8.0).unwrap();
    assert!(loose.clusters.iter().all(|c| c.bits == 4));
    let tight = allocate_bits(&report(&table, &bits), 1.0).unwrap();
    assert!(tight.clusters.iter().all(|c| c.bits == 1));
    assert!(matches!(allocate_bits(&report(&table, &bits), 0.5), Err(Error::Infeasible(_))));
}

fn instance() -> impl Strategy<Value = (Vec<(usize, Vec<f64>)>, f64)> {
    (
        prop::collection::vec((1usize..50, prop::collection::vec(0.0f64..1.0, 4)), 1..=6),
        1.0f64..8.0,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn allocation_equals_enumeration((table, budget) in instance()) {
        let bits = [1, 2, 4, 8];
        let r = report(&table, &bits);
        let best = enumerate(&table, &bits, budget).unwrap();
        for a in [allocate_bits(&r, budget).unwrap(), allocate_dp(&r, budget).unwrap()] {
            prop_assert!(a.average_bits() <= budget + 1e-9);
            prop_assert_eq!(a.clusters.len(), table.len());
            let omega = assigned_omega(&table, &bits, &a);
            prop_assert!((omega - best).abs() <= 1e-12 * best.max(1.0), "{} vs {}", omega, best);
        }
    }

    #[test]
    fn looser_budgets_never_raise_sensitivity((table, budget) in instance(), extra in 0.0f64..3.0) {
        let bits = [1, 2, 4, 8];
        let r = report(&table, &bits);
        let tight = allocate_bits(&r, budget).unwrap().total_omega.unwrap();
        let loose = allocate_bits(&r, budget + extra).unwrap().total_omega.unwrap();
        prop_assert!(loose <= tight);
    }
}
