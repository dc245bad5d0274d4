//! Dense-kernel checks against independent oracles: a naive triple-loop
//! product, factor reconstruction, solve residuals, and the explicit
//! Hadamard matrix.

use loaq_core::hadamard::fwht;
use loaq_core::linalg::{reverse_cholesky, spd_solve};
use loaq_core::matrix::DenseMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn random_matrix(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> DenseMatrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    DenseMatrix::from_vec(rows, cols, data).unwrap()
}

fn random_spd(rng: &mut ChaCha12Rng, n: usize) -> DenseMatrix {
    let a = random_matrix(rng, n + 2, n);
    a.gram().add_diag(0.1)
}

/// Triple-loop reference product, independent of the library kernel.
fn naive_matmul(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for k in 0..a.cols() {
                acc += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, acc);
        }
    }
    out
}

/// Dense orthonormal Hadamard: entries `(−1)^popcount(i & j) / √n`.
fn dense_hadamard(n: usize) -> DenseMatrix {
    let norm = 1.0 / (n as f64).sqrt();
    let mut m = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let sign = if (i & j).count_ones() % 2 == 0 {
                1.0
            } else {
                -1.0
            };
            m.set(i, j, sign * norm);
        }
    }
    m
}

#[test]
fn matmul_matches_naive_triple_loop() {
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    for _ in 0..20 {
        let a = random_matrix(&mut rng, 7, 5);
        let b = random_matrix(&mut rng, 5, 3);
        let fast = a.matmul(&b).unwrap();
        let slow = naive_matmul(&a, &b);
        assert!(fast.max_abs_diff(&slow) < 1e-12);
    }
}

#[test]
fn reverse_cholesky_reconstructs_random_spd() {
    let mut rng = ChaCha12Rng::seed_from_u64(22);
    for _ in 0..20 {
        let a = random_matrix(&mut rng, 8, 8);
        let h = a.gram().add_diag(0.1);
        let f = reverse_cholesky(&h).unwrap();
        // Strict upper part must be exactly zero.
        for i in 0..8 {
            for j in (i + 1)..8 {
                assert_eq!(f.l().get(i, j), 0.0);
            }
            assert!(f.diag()[i] > 0.0);
        }
        let recon = f.l().transpose().matmul(f.l()).unwrap();
        let rel = recon.sub(&h).unwrap().max_abs() / h.max_abs();
        assert!(rel < 1e-8, "reconstruction rel error {rel}");
    }
}

#[test]
fn spd_solve_residual_below_tolerance() {
    let mut rng = ChaCha12Rng::seed_from_u64(33);
    for _ in 0..20 {
        let h = random_spd(&mut rng, 10);
        let b = random_matrix(&mut rng, 10, 3);
        let x = spd_solve(&h, &b).unwrap();
        let resid = h.matmul(&x).unwrap().sub(&b).unwrap();
        assert!(resid.frobenius() / b.frobenius() < 1e-8);
    }
}

#[test]
fn spd_solve_roundtrip_recovers_x() {
    let mut rng = ChaCha12Rng::seed_from_u64(44);
    for _ in 0..20 {
        let h = random_spd(&mut rng, 9);
        let x = random_matrix(&mut rng, 9, 4);
        let b = h.matmul(&x).unwrap();
        let solved = spd_solve(&h, &b).unwrap();
        assert!(solved.max_abs_diff(&x) < 1e-7);
    }
}

#[test]
fn fwht_matches_dense_hadamard_multiply() {
    let mut rng = ChaCha12Rng::seed_from_u64(55);
    for n in [16usize, 64, 256, 1024] {
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = fwht(&x).unwrap();
        let dense = dense_hadamard(n);
        let xv = DenseMatrix::from_vec(1, n, x).unwrap();
        let slow = xv.matmul(&dense.transpose()).unwrap();
        for (a, b) in fast.iter().zip(slow.as_slice()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fwht_is_involutive(len_pow in 0usize..8, seed in 0u64..1000) {
        let n = 1usize << len_pow;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let twice = fwht(&fwht(&x).unwrap()).unwrap();
        for (a, b) in twice.iter().zip(&x) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn fwht_preserves_l2_norm(len_pow in 0usize..8, seed in 0u64..1000) {
        let n = 1usize << len_pow;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let y = fwht(&x).unwrap();
        let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((nx - ny).abs() < 1e-9 * (1.0 + nx));
    }

    #[test]
    fn spd_solve_random_roundtrip(seed in 0u64..500) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let h = random_spd(&mut rng, 6);
        let x = random_matrix(&mut rng, 6, 2);
        let b = h.matmul(&x).unwrap();
        let solved = spd_solve(&h, &b).unwrap();
        prop_assert!(solved.max_abs_diff(&x) < 1e-7);
    }
}
