mod common;

use common::{cofactor_inverse, mat_vec, TestRng};
use onestep_core::linalg::{
    solve_symmetric, solve_with_ridge_ladder, spectral_norm, Definiteness, Matrix,
};
use proptest::prelude::*;

fn random_spd(rng: &mut TestRng, n: usize) -> Matrix {
    let b: Vec<f64> = (0..n * n).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let b = Matrix::from_row_major(n, b).unwrap();
    let mut a = b.transpose().mul(&b);
    for i in 0..n {
        a[(i, i)] += 0.5;
    }
    a.symmetrize_from_upper();
    a
}

/// Power iteration on AᵀA.
fn power_iteration_norm(a: &Matrix) -> f64 {
    let g = a.transpose().mul(a);
    let n = a.dim();
    let mut v = vec![1.0; n];
    let mut lambda = 0.0;
    for _ in 0..10_000 {
        let w = g.mul_vec(&v);
        let norm = w.norm2();
        if norm == 0.0 {
            return 0.0;
        }
        let next: Vec<f64> = w.iter().map(|x| x / norm).collect();
        let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        v = next;
        lambda = norm;
        if delta < 1e-15 {
            break;
        }
    }
    lambda.sqrt()
}

#[test]
fn spd_solve_matches_cofactor_inverse() {
    let mut rng = TestRng::new(11);
    for _ in 0..50 {
        let a = random_spd(&mut rng, 4);
        let b: Vec<f64> = (0..4).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let x = solve_symmetric(&a, &b, 0.0, Definiteness::Positive).unwrap();
        let oracle = mat_vec(&cofactor_inverse(&a), &b);
        for (xi, oi) in x.iter().zip(&oracle) {
            assert!((xi - oi).abs() <= 1e-10 * (1.0 + oi.abs()));
        }
        let resid = a.mul_vec(&x).sub(&b).norm2();
        assert!(resid <= 1e-10);
    }
}

#[test]
fn spectral_norm_matches_power_iteration() {
    let mut rng = TestRng::new(5);
    for _ in 0..50 {
        let data: Vec<f64> = (0..9).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let a = Matrix::from_row_major(3, data).unwrap();
        let s = spectral_norm(&a).unwrap();
        let oracle = power_iteration_norm(&a);
        assert!((s - oracle).abs() <= 1e-6 * oracle, "{s} vs {oracle}");
    }
}

fn matrix_strategy(n: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-10.0f64..10.0, n * n)
        .prop_map(move |v| Matrix::from_row_major(n, v).unwrap())
}

proptest! {
    #[test]
    fn solve_residual_small_for_well_conditioned(
        seed in any::<u64>(),
        n in 1usize..6,
        negate in any::<bool>(),
    ) {
        let mut rng = TestRng::new(seed);
        let mut a = random_spd(&mut rng, n);
        let expected = if negate {
            a = a.scaled(-1.0);
            Definiteness::Negative
        } else {
            Definiteness::Positive
        };
        let b: Vec<f64> = (0..n).map(|_| rng.uniform(-5.0, 5.0)).collect();
        let x = solve_with_ridge_ladder(&a, &b, expected).unwrap();
        let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(a.mul_vec(&x).sub(&b).norm2() <= 1e-8 * (1.0 + bnorm));
    }

    #[test]
    fn spectral_norm_is_absolutely_homogeneous(a in matrix_strategy(3), c in -50.0f64..50.0) {
        let s = spectral_norm(&a).unwrap();
        let sc = spectral_norm(&a.scaled(c)).unwrap();
        prop_assert!((sc - c.abs() * s).abs() <= 1e-10 * (1.0 + c.abs() * s));
    }

    #[test]
    fn spectral_norm_between_frobenius_bounds(a in matrix_strategy(4)) {
        let s = spectral_norm(&a).unwrap();
        let f = a.frobenius();
        prop_assert!(s <= f * (1.0 + 1e-12));
        prop_assert!(f <= 2.0 * s * (1.0 + 1e-12));
    }
}
