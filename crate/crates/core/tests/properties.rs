use csibert_core::archive::TensorArchive;
use csibert_core::channel::{generate_dataset, DatasetConfig};
use csibert_core::preprocess::{make_mask, FeatureMatrix, MaskScheme, MaskSpec, NormMode};
use csibert_core::tensor::{grad_check, softmax_rows, GradCheckOptions};
use csibert_core::{Tape, Tensor};
use proptest::prelude::*;

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Tensor::new(&[rows, cols], v).unwrap())
}

fn opts() -> GradCheckOptions {
    GradCheckOptions::default()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn softmax_rows_sum_to_one(x in tensor(3, 5)) {
        let s = softmax_rows(&x, None).unwrap();
        for i in 0..3 {
            let total: f64 = s.row(i).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(s.row(i).iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn matmul_then_gelu_gradients_match(a in tensor(3, 4), b in tensor(4, 2)) {
        let r = grad_check(
            |t, v| {
                let m = t.matmul(v[0], v[1])?;
                let g = t.gelu(m);
                let sq = t.square(g);
                Ok(t.sum_all(sq))
            },
            &[a, b],
            &opts(),
        )
        .unwrap();
        prop_assert!(r.max_rel_error < 1e-4, "{:?}", r);
    }

    #[test]
    fn layer_norm_attention_gradients_match(x in tensor(4, 3), g in tensor(1, 3), b in tensor(1, 3)) {
        let valid = [true, true, false, true];
        let r = grad_check(
            |t, v| {
                let n = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                let nt = t.transpose(n)?;
                let scores = t.matmul(n, nt)?;
                let p = t.softmax_rows(scores, Some(&valid))?;
                let y = t.matmul(p, v[0])?;
                let sq = t.square(y);
                Ok(t.sum_all(sq))
            },
            &[x, g, b],
            &opts(),
        )
        .unwrap();
        prop_assert!(r.max_rel_error < 1e-4, "{:?}", r);
    }

    #[test]
    fn tape_gradient_of_sum_of_squares_is_twice_input(x in tensor(2, 6)) {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let sq = tape.square(v);
        let out = tape.sum_all(sq);
        let grads = tape.backward(out).unwrap();
        prop_assert_eq!(grads.get(v).unwrap(), &x.scale(2.0));
    }

    #[test]
    fn every_kth_masks_exactly_the_multiples(k in 1usize..12, rows in 1usize..40, cols in 1usize..6) {
        let m = make_mask(&MaskSpec::new(MaskScheme::EveryKth { k }, 0), rows, cols).unwrap();
        for i in 0..rows {
            for j in 0..cols {
                prop_assert_eq!(m.keep(i, j), i % k != 0);
            }
        }
    }

    #[test]
    fn masks_are_a_function_of_their_seed(seed in any::<u64>(), q in 0.0f64..1.0) {
        let spec = MaskSpec::new(MaskScheme::Bernoulli { keep_prob: q }, seed);
        prop_assert_eq!(make_mask(&spec, 9, 7).unwrap(), make_mask(&spec, 9, 7).unwrap());
        let sweep = MaskSpec::new(MaskScheme::RatioSweep { masked_fraction: q }, seed);
        let m = make_mask(&sweep, 9, 7).unwrap();
        for i in 0..9 {
            let row: Vec<bool> = (0..7).map(|j| m.keep(i, j)).collect();
            prop_assert!(row.iter().all(|&k| k == row[0]));
        }
    }

    #[test]
    fn archive_round_trips_bytes(x in tensor(3, 4), y in tensor(1, 5), tag in "[a-z]{1,8}") {
        let a = TensorArchive {
            kind: tag.clone(),
            metadata: serde_json::json!({ "tag": tag }),
            tensors: vec![("x".into(), x), ("y".into(), y)],
        };
        let bytes = a.to_bytes().unwrap();
        let back = TensorArchive::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &a);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn features_invert_back_to_csi(seed in any::<u64>(), per_subcarrier in any::<bool>()) {
        let ds = generate_dataset(&DatasetConfig {
            cells: 1,
            ues_per_cell: 1,
            seed,
            snr_db: 20.0,
            ..DatasetConfig::desk()
        })
        .unwrap();
        let mode = if per_subcarrier { NormMode::PerSubcarrier } else { NormMode::Global };
        for h in &ds.tensors {
            let f = FeatureMatrix::from_csi(h, mode).unwrap();
            let back = f.to_csi().unwrap();
            let scale = h.magnitude().iter().cloned().fold(0.0, f64::max);
            for (a, b) in h.data().iter().zip(back.data()) {
                prop_assert!((a - b).norm() <= 1e-9 * scale.max(1e-300));
            }
        }
    }
}
