//! Quantizer checks: exhaustive-enumeration optimality bounds for the
//! sequential solver, the bit-exact fixed-point identity, and grid
//! properties under random inputs.

use loaq_core::matrix::DenseMatrix;
use loaq_core::quant::{
    gptq_fixed_point_holds, gptq_quantize, minmax_params, quantize_activations, rtn_quantize,
    surrogate_loss, GptqConfig, QuantAxis, QuantParams,
};
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
    let g = a.gram();
    let mean_diag = g.diag().iter().sum::<f64>() / n as f64;
    g.add_diag(0.1 * mean_diag)
}

/// Exhaustive minimum of `tr((Q−W)ᵀH(Q−W))` over the full 2-bit grid for
/// a 2×1 weight: 16 candidate pairs.
fn exhaustive_optimum(w: &DenseMatrix, h: &DenseMatrix, params: &QuantParams) -> f64 {
    let mut best = f64::INFINITY;
    for g0 in 0..4i32 {
        for g1 in 0..4i32 {
            let q = DenseMatrix::from_vec(2, 1, vec![params.dequant(0, g0), params.dequant(0, g1)])
                .unwrap();
            best = best.min(surrogate_loss(&q, w, h).unwrap());
        }
    }
    best
}

#[test]
fn gptq_near_optimal_and_beats_rtn_on_tiny_instances() {
    // LDLQ is not provably optimal; the bound is statistical, mirroring
    // an exhaustive search over all 16 grid pairs.
    let h = DenseMatrix::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]).unwrap();
    let cfg = GptqConfig::default();
    let mut rng = ChaCha12Rng::seed_from_u64(2024);
    let trials = 200;
    let mut good = 0;
    for _ in 0..trials {
        let w = random_matrix(&mut rng, 2, 1);
        let params = minmax_params(&w, 2, QuantAxis::PerOutputChannel).unwrap();
        let q = gptq_quantize(&w, &h, &params, &cfg).unwrap();
        let (_, q_rtn) = rtn_quantize(&w, &params).unwrap();
        let loss = surrogate_loss(&q, &w, &h).unwrap();
        let loss_rtn = surrogate_loss(&q_rtn, &w, &h).unwrap();
        let opt = exhaustive_optimum(&w, &h, &params);
        if loss <= 1.5 * opt + 1e-12 && loss <= loss_rtn + 1e-12 {
            good += 1;
        }
        assert!(gptq_fixed_point_holds(&w, &h, &params, &cfg, &q).unwrap());
    }
    assert!(
        good as f64 >= 0.9 * trials as f64,
        "only {good}/{trials} trials within the optimality bounds"
    );
}

#[test]
fn fixed_point_identity_holds_with_and_without_reorder() {
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    for reorder in [false, true] {
        let cfg = GptqConfig {
            perc_damp: 0.01,
            reorder,
        };
        for _ in 0..25 {
            let w = random_matrix(&mut rng, 6, 4);
            let h = random_spd(&mut rng, 6);
            let params = minmax_params(&w, 3, QuantAxis::PerOutputChannel).unwrap();
            let q = gptq_quantize(&w, &h, &params, &cfg).unwrap();
            assert!(gptq_fixed_point_holds(&w, &h, &params, &cfg, &q).unwrap());
        }
    }
}

#[test]
fn surrogate_loss_invariant_under_consistent_permutation() {
    let mut rng = ChaCha12Rng::seed_from_u64(13);
    for _ in 0..20 {
        let n = 6;
        let w = random_matrix(&mut rng, n, 3);
        let q = random_matrix(&mut rng, n, 3);
        let h = random_spd(&mut rng, n);
        let base = surrogate_loss(&q, &w, &h).unwrap();
        // Fisher-Yates with the test rng.
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        let gather = |m: &DenseMatrix| {
            let rows: Vec<Vec<f64>> = perm.iter().map(|&p| m.row(p).to_vec()).collect();
            let slices: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            DenseMatrix::from_rows(&slices).unwrap()
        };
        let wp = gather(&w);
        let qp = gather(&q);
        let mut hp = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                hp.set(i, j, h.get(perm[i], perm[j]));
            }
        }
        let permuted = surrogate_loss(&qp, &wp, &hp).unwrap();
        assert!((base - permuted).abs() < 1e-10 * (1.0 + base.abs()));
    }
}

#[test]
fn loss_is_statistically_monotone_in_bits() {
    let mut rng = ChaCha12Rng::seed_from_u64(99);
    let cfg = GptqConfig::default();
    let trials = 150;
    let mut monotone = 0;
    for _ in 0..trials {
        let w = random_matrix(&mut rng, 6, 4);
        let h = random_spd(&mut rng, 6);
        let bits = rng.random_range(2u32..5);
        let p_lo = minmax_params(&w, bits, QuantAxis::PerOutputChannel).unwrap();
        let p_hi = minmax_params(&w, bits + 1, QuantAxis::PerOutputChannel).unwrap();
        let q_lo = gptq_quantize(&w, &h, &p_lo, &cfg).unwrap();
        let q_hi = gptq_quantize(&w, &h, &p_hi, &cfg).unwrap();
        let l_lo = surrogate_loss(&q_lo, &w, &h).unwrap();
        let l_hi = surrogate_loss(&q_hi, &w, &h).unwrap();
        if l_hi <= l_lo + 1e-12 {
            monotone += 1;
        }
    }
    assert!(
        monotone as f64 >= 0.95 * trials as f64,
        "only {monotone}/{trials} trials monotone in bits"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rtn_error_within_half_step(seed in 0u64..1000) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let w = random_matrix(&mut rng, 6, 6);
        let params = minmax_params(&w, 8, QuantAxis::PerOutputChannel).unwrap();
        let (_, q) = rtn_quantize(&w, &params).unwrap();
        for r in 0..6 {
            for c in 0..6 {
                let half = params.scale()[c] / 2.0;
                prop_assert!((q.get(r, c) - w.get(r, c)).abs() <= half + 1e-12);
            }
        }
    }

    #[test]
    fn activation_quant_error_within_half_step(seed in 0u64..1000) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let x = random_matrix(&mut rng, 5, 8);
        let xq = quantize_activations(&x, 8).unwrap();
        let params = minmax_params(&x, 8, QuantAxis::PerToken).unwrap();
        for r in 0..5 {
            let half = params.scale()[r] / 2.0;
            for c in 0..8 {
                prop_assert!((xq.get(r, c) - x.get(r, c)).abs() <= half + 1e-12);
            }
        }
    }

    #[test]
    fn rtn_idempotent(seed in 0u64..1000) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let w = random_matrix(&mut rng, 4, 5);
        let params = minmax_params(&w, 4, QuantAxis::PerOutputChannel).unwrap();
        let (codes1, q1) = rtn_quantize(&w, &params).unwrap();
        let (codes2, q2) = rtn_quantize(&q1, &params).unwrap();
        prop_assert_eq!(codes1, codes2);
        prop_assert_eq!(q1, q2);
    }
}
