mod common;

use moundcount::estimator::{fit_ridge, ridge_gradient, ridge_loss, RidgeModel, RidgeOptions};
use moundcount::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn opts(lambda: f64) -> RidgeOptions {
    RidgeOptions {
        lambda,
        ..Default::default()
    }
}

fn instance(rng: &mut ChaCha8Rng, n: usize, m: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
    let y = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
    (x, y)
}

#[test]
fn hand_examples() {
    let x = vec![vec![1.0], vec![2.0]];
    let y = [1.0, 2.0];
    assert!((fit_ridge(&x, &y, opts(0.0)).unwrap().weights[0] - 1.0).abs() < 1e-12);
    assert!((fit_ridge(&x, &y, opts(1.0)).unwrap().weights[0] - 5.0 / 6.0).abs() < 1e-12);
}

#[test]
fn singular_without_shrinkage() {
    let x = vec![vec![1.0, 2.0], vec![2.0, 4.0]];
    assert!(matches!(fit_ridge(&x, &[1.0, 2.0], opts(0.0)), Err(Error::Singular)));
    assert!(fit_ridge(&x, &[1.0, 2.0], opts(0.5)).is_ok());
}

#[test]
fn matches_conjugate_gradient_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let (n, m) = (rng.random_range(1..=50), rng.random_range(1..=8));
        let (x, y) = instance(&mut rng, n, m);
        for lambda in [0.1, 1.0, 10.0, 100.0] {
            let w = fit_ridge(&x, &y, opts(lambda)).unwrap().weights;
            let oracle = common::ridge_cg(&x, &y, lambda);
            assert!(common::rel_diff(&w, &oracle) < 1e-8, "n={n} m={m} lambda={lambda}");
        }
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..30 {
        let (x, y) = instance(&mut rng, 20, 4);
        let w: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g = ridge_gradient(&w, &x, &y, 10.0);
        for j in 0..4 {
            let h = 1e-5;
            let (mut up, mut dn) = (w.clone(), w.clone());
            up[j] += h;
            dn[j] -= h;
            let fd = (ridge_loss(&up, &x, &y, 10.0) - ridge_loss(&dn, &x, &y, 10.0)) / (2.0 * h);
            assert!((fd - g[j]).abs() <= 1e-6 * g[j].abs().max(1.0), "{fd} vs {}", g[j]);
        }
        let at_opt = ridge_gradient(&fit_ridge(&x, &y, opts(10.0)).unwrap().weights, &x, &y, 10.0);
        assert!(common::norm(&at_opt) < 1e-8);
    }
}

#[test]
fn perturbations_never_decrease_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..10 {
        let (x, y) = instance(&mut rng, 30, 5);
        let w = fit_ridge(&x, &y, opts(10.0)).unwrap().weights;
        let base = ridge_loss(&w, &x, &y, 10.0);
        for _ in 0..100 {
            let d: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = 1e-3 / common::norm(&d);
            let p: Vec<f64> = w.iter().zip(&d).map(|(a, b)| a + s * b).collect();
            assert!(ridge_loss(&p, &x, &y, 10.0) >= base);
        }
    }
}

#[test]
fn shrinkage_is_monotone_and_vanishes() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..10 {
        let (x, y) = instance(&mut rng, 25, 4);
        let norms: Vec<f64> = [1e-3, 0.1, 1.0, 10.0, 100.0, 1e4]
            .iter()
            .map(|&l| common::norm(&fit_ridge(&x, &y, opts(l)).unwrap().weights))
            .collect();
        assert!(norms.windows(2).all(|p| p[0] >= p[1]), "{norms:?}");
        let huge = common::norm(&fit_ridge(&x, &y, opts(1e12)).unwrap().weights);
        assert!(huge < 1e-6 * norms[0]);
    }
}

#[test]
fn model_file_round_trips_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (x, y) = instance(&mut rng, 18, 4);
    let dir = tempfile::tempdir().unwrap();
    for (intercept, standardize) in [(false, false), (true, false), (true, true), (false, true)] {
        let model = fit_ridge(&x, &y, RidgeOptions { lambda: 10.0, intercept, standardize }).unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let back = RidgeModel::load(&path).unwrap();
        assert_eq!(back, model);
        for row in &x {
            assert_eq!(back.predict_raw(row).unwrap().to_bits(), model.predict_raw(row).unwrap().to_bits());
        }
    }
}

#[test]
fn standardized_fit_predicts_like_plain_fit_without_shrinkage() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let (x, y) = instance(&mut rng, 30, 3);
    let plain = fit_ridge(&x, &y, RidgeOptions { lambda: 0.0, intercept: true, standardize: false }).unwrap();
    let scaled = fit_ridge(&x, &y, RidgeOptions { lambda: 0.0, intercept: true, standardize: true }).unwrap();
    for row in &x {
        let (a, b) = (plain.predict_raw(row).unwrap(), scaled.predict_raw(row).unwrap());
        assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }
}
