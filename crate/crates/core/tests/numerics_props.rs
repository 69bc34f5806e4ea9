mod common;

use can_core::attention::{joint_attention_weights, DecoderLayerParams, JointMask};
use can_core::numerics::{cosine_similarity, layer_norm, matmul, softmax_rows, Mask};
use can_core::training::{lr_at, TrainConfig};
use can_core::{DecoderVariant, Matrix, ModelConfig};
use common::*;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Matrix::new(rows, cols, v).unwrap())
}

fn shaped() -> impl Strategy<Value = (Matrix, Matrix)> {
    (1usize..7, 0usize..7, 1usize..7).prop_flat_map(|(m, k, n)| (matrix(m, k), matrix(k, n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_loops((a, b) in shaped()) {
        let got = matmul(&a, &b).unwrap();
        prop_assert!(max_abs_diff(&mmul(&to_m(&a), &b), &got) < 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions(m in (1usize..6, 1usize..9).prop_flat_map(|(r, c)| matrix(r, c)), shift in -50.0f64..50.0) {
        let mask = Mask::from_fn(m.rows(), m.cols(), |i, j| j <= i || j + 1 == m.cols());
        let p = softmax_rows(&m, Some(&mask)).unwrap();
        let shifted = softmax_rows(&m.map(|v| v + shift), Some(&mask)).unwrap();
        for i in 0..m.rows() {
            let sum: f64 = p.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for j in 0..m.cols() {
                if !mask.allows(i, j) {
                    prop_assert_eq!(p.get(i, j), 0.0);
                }
                prop_assert!(p.get(i, j) >= 0.0);
            }
        }
        prop_assert!(p.max_abs_diff(&shifted) < 1e-12);
    }

    #[test]
    fn layer_norm_standardizes_rows(m in (1usize..5, 2usize..10).prop_flat_map(|(r, c)| matrix(r, c))) {
        let d = m.cols();
        let out = layer_norm(&m, &vec![1.0; d], &vec![0.0; d], 1e-12).unwrap();
        for i in 0..m.rows() {
            let r = m.row(i);
            let spread = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - r.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assume!(spread > 1e-3);
            let mean: f64 = out.row(i).iter().sum::<f64>() / d as f64;
            let var: f64 = out.row(i).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cosine_is_bounded_and_symmetric(a in prop::collection::vec(-5.0f64..5.0, 1..12), seed in 0u64..1000) {
        let b: Vec<f64> = random_matrix(1, a.len(), seed).row(0).to_vec();
        prop_assume!(a.iter().any(|v| v.abs() > 1e-6));
        let ab = cosine_similarity(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert!((ab - cosine_similarity(&b, &a).unwrap()).abs() < 1e-15);
        prop_assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    /// Joint attention rows are distributions with exact zeros on future
    /// target positions, and changing a future target row leaves every
    /// earlier row untouched.
    #[test]
    fn joint_softmax_contract(t in 1usize..8, s in 1usize..8, seed in 0u64..10_000) {
        let (d, heads) = (8, 2);
        let DecoderLayerParams::Compressed(p) = random_model(ModelConfig::new(d, heads, 1, 1, 8, DecoderVariant::Compressed), seed).params().decoder[0].clone() else { unreachable!() };
        let x = random_matrix(t, d, seed + 1);
        let h = random_matrix(s, d, seed + 2);
        let mask = JointMask::new(t, s).unwrap();
        let w = joint_attention_weights(&x, &h, &p.wq, &p.wk1, &p.wk2, heads, &mask).unwrap();
        for a in &w {
            prop_assert_eq!(a.shape(), (t, t + s));
            for i in 0..t {
                prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for j in i + 1..t {
                    prop_assert_eq!(a.get(i, j), 0.0);
                }
            }
        }
        let k = t - 1;
        let mut x2 = x.clone();
        for j in 0..d {
            x2.set(k, j, x.get(k, j) + 3.0);
        }
        let w2 = joint_attention_weights(&x2, &h, &p.wq, &p.wk1, &p.wk2, heads, &mask).unwrap();
        for (a, b) in w.iter().zip(&w2) {
            for i in 0..k {
                prop_assert_eq!(a.row(i), b.row(i));
            }
        }
    }

    #[test]
    fn schedule_rises_then_decays(warmup in 1u64..500, peak in 1e-5f64..1e-2) {
        let cfg = TrainConfig { warmup_steps: warmup, peak_lr: peak, ..TrainConfig::default() };
        prop_assert!((lr_at(warmup, &cfg) - peak).abs() < 1e-15);
        for s in 1..warmup {
            prop_assert!(lr_at(s, &cfg) < lr_at(s + 1, &cfg));
        }
        for s in [warmup + 1, 2 * warmup, 10 * warmup] {
            prop_assert!(lr_at(s, &cfg) < lr_at(warmup, &cfg));
            prop_assert!((lr_at(s, &cfg) - peak * (warmup as f64 / s as f64).sqrt()).abs() < 1e-15);
        }
    }
}
