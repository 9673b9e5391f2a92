//! Property tests for the invariants that hold over whole input families.

use fabsim_core::matrix::{gemm, Matrix};
use fabsim_core::scalar::Scalar;
use fabsim_core::zero::{build_shards, ParamShape};
use proptest::prelude::*;

fn matrix_pair() -> impl Strategy<Value = (Matrix<f64>, Matrix<f64>)> {
    (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(m, k, n)| {
        (
            proptest::collection::vec(-100.0f64..100.0, m * k),
            proptest::collection::vec(-100.0f64..100.0, k * n),
        )
            .prop_map(move |(da, db)| {
                (
                    Matrix::new(m, k, da).unwrap(),
                    Matrix::new(k, n, db).unwrap(),
                )
            })
    })
}

proptest! {
    #[test]
    fn gemm_transpose_identity_is_bitwise((a, b) in matrix_pair()) {
        // (A·B)ᵀ accumulates each entry in the same order as Bᵀ·Aᵀ, so the
        // two routes agree bitwise, not just within tolerance.
        let ab_t = gemm(&a, &b, false, false).unwrap().transposed();
        let bt_at = gemm(&b, &a, true, true).unwrap();
        prop_assert!(ab_t.bits_eq(&bt_at));
    }

    #[test]
    fn bf16_rounding_is_idempotent(bits in any::<u32>()) {
        let x = f32::from_bits(bits);
        prop_assume!(!x.is_nan());
        let once = x.round_bf16();
        prop_assert_eq!(once.to_bits(), once.round_bf16().to_bits());
    }

    #[test]
    fn shard_ranges_partition_and_round_trip(
        shapes in proptest::collection::vec((1usize..5, 1usize..5), 1..5),
        dp in 1usize..6,
        alignment in 1usize..5,
    ) {
        let named: Vec<(String, ParamShape)> = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| (format!("p{i}"), ParamShape::Matrix(r, c)))
            .collect();
        let layout = build_shards(&named, dp, alignment);
        prop_assert_eq!(layout.padded_total % dp, 0);
        prop_assert_eq!(layout.padded_total % alignment, 0);
        prop_assert!(layout.padded_total >= layout.total);

        // Ranges tile [0, padded_total) exactly.
        let mut covered = 0usize;
        for rank in 0..dp {
            let r = layout.rank_range(rank);
            prop_assert_eq!(r.start, covered);
            covered = r.end;
        }
        prop_assert_eq!(covered, layout.padded_total);

        // pad then unpad recovers every parameter exactly.
        let flat: Vec<f64> = (0..layout.total).map(|i| i as f64 * 1.5 - 3.0).collect();
        let padded = layout.pad(&flat);
        prop_assert_eq!(layout.unpad(&padded), flat.clone());
        for p in &layout.params {
            let vals = &padded[p.range()];
            prop_assert_eq!(vals, &flat[p.range()]);
        }
    }

    #[test]
    fn softmax_selection_invariant_under_logit_shift(
        logits in proptest::collection::vec(-5.0f64..5.0, 4),
        shift in -50.0f64..50.0,
    ) {
        // Adding a constant to every logit leaves the softmax argmax
        // unchanged (guard against exact ties, which are measure zero but
        // reachable by the generator).
        let softmax = |z: &[f64]| {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect::<Vec<f64>>()
        };
        let argmax = |z: &[f64]| {
            z.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .unwrap()
                .0
        };
        let mut sorted = logits.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        prop_assume!(sorted.windows(2).all(|w| (w[1] - w[0]).abs() > 1e-6));

        let base = argmax(&softmax(&logits));
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        prop_assert_eq!(base, argmax(&softmax(&shifted)));
    }
}
