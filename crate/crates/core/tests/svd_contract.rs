mod common;

use common::rng;
use hrank::rank::{numerical_rank, svd, Matrix, TolerancePolicy};
use proptest::prelude::*;
use rand::Rng;

fn gram_residual(m: &Matrix) -> f64 {
    let p = m.cols();
    let mut worst: f64 = 0.0;
    for a in 0..p {
        for b in 0..p {
            let d: f64 = (0..m.rows()).map(|r| m.get(r, a) * m.get(r, b)).sum();
            worst = worst.max((d - if a == b { 1.0 } else { 0.0 }).abs());
        }
    }
    worst
}

#[test]
fn residuals_on_random_matrices() {
    let mut r = rng(99);
    for _ in 0..200 {
        let (rows, cols) = (r.random_range(1..=32), r.random_range(1..=32));
        let a = Matrix::new(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let s = svd(&a).unwrap();
        assert!(s.reconstruct().max_abs_diff(&a) < 1e-9);
        assert!(gram_residual(&s.u) < 1e-9);
        assert!(gram_residual(&s.v) < 1e-9);
        assert!(s.singular_values.windows(2).all(|w| w[0] >= w[1]));
        assert!(s.singular_values.iter().all(|&x| x >= 0.0));
    }
}

#[test]
fn planted_rank_two_is_recovered() {
    let mut r = rng(5);
    let (m, n) = (10, 7);
    let gs = |r: &mut rand_chacha::ChaCha8Rng, len: usize, k: usize| -> Vec<Vec<f64>> {
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < k {
            let mut v: Vec<f64> = (0..len).map(|_| r.random_range(-1.0..1.0)).collect();
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
        basis
    };
    let u = gs(&mut r, m, 2);
    let v = gs(&mut r, n, 2);
    let sig = [4.5, 1.25];
    let a = Matrix::from_fn(m, n, |i, j| sig[0] * u[0][i] * v[0][j] + sig[1] * u[1][i] * v[1][j]);
    let s = svd(&a).unwrap();
    assert!((s.singular_values[0] - 4.5).abs() < 1e-9);
    assert!((s.singular_values[1] - 1.25).abs() < 1e-9);
    let tau = TolerancePolicy::default().threshold(m, n, s.singular_values[0]);
    assert!(s.singular_values[2..].iter().all(|&x| x < tau));
    assert_eq!(numerical_rank(&a, TolerancePolicy::default()).unwrap(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn truncation_sets_the_rank(seed: u64, rows in 2usize..=12, cols in 2usize..=12, keep_frac in 0.0f64..1.0) {
        let mut r = rng(seed);
        let a = Matrix::new(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let s = svd(&a).unwrap();
        let full = numerical_rank(&a, TolerancePolicy::default()).unwrap();
        let keep = ((full as f64) * keep_frac) as usize;
        prop_assume!(keep < full);
        let t = s.truncated(keep);
        prop_assert_eq!(numerical_rank(&t, TolerancePolicy::default()).unwrap(), keep);
    }
}
