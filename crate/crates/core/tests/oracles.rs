mod support;

use ndarray::{array, Array1, Array2};
use proptest::prelude::*;

use support::scalar;
use support::sweeps::{normalization_sweep, residual_identity_failures};
use vidalign::alignment::{self, AttentionParams};
use vidalign::embedding_store::TextTokens;
use vidalign::training::{loss_t2v, loss_v2t};

#[test]
fn library_matches_scalar_loops() {
    for (name, err) in scalar::oracle_sweep(100, 2024) {
        assert!(err <= 1e-10, "{name}: relative error {err:e}");
    }
}

#[test]
fn oracle_sweep_is_seed_sensitive_but_always_tight() {
    for seed in [1, 2, 3] {
        for (name, err) in scalar::oracle_sweep(30, seed) {
            assert!(err <= 1e-10, "seed {seed}, {name}: {err:e}");
        }
    }
}

#[test]
fn importance_sums_and_permutations() {
    let stats = normalization_sweep(300, 7);
    assert!(stats.max_fine_dev <= 1e-9, "{stats:?}");
    assert!(stats.max_coarse_dev <= 1e-9, "{stats:?}");
    assert_eq!(stats.equivariance_failures, 0);
}

#[test]
fn zero_projections_are_bit_exact_residuals() {
    assert_eq!(residual_identity_failures(300, 9), 0);
}

#[test]
fn oracle_attention_hand_example() {
    // two keys with equal scores: the output is the mean of the values
    let q = vec![vec![1.0, 0.0]];
    let k = vec![vec![0.0, 1.0], vec![0.0, -1.0]];
    let v = vec![vec![2.0, 4.0], vec![0.0, 0.0]];
    assert_eq!(scalar::attention(&q, &k, &v, 1), vec![vec![1.0, 2.0]]);
    let lib = alignment::cross_attention(
        scalar::array(&q).view(),
        scalar::array(&k).view(),
        scalar::array(&v).view(),
    )
    .unwrap();
    assert_eq!(lib, array![[1.0, 2.0]]);
}

#[test]
fn oracle_losses_hand_example() {
    // uniform logits: every softmax is 1/B or 1/C
    let y = Array2::<f64>::zeros((3, 2));
    let labels = [0, 0, 1];
    let t2v = (3.0f64).ln();
    let v2t = (2.0f64).ln();
    assert!((scalar::loss_t2v(&scalar::rows(&y), &labels) - t2v).abs() < 1e-15);
    assert!((scalar::loss_v2t(&scalar::rows(&y), &labels) - v2t).abs() < 1e-15);
    assert!((loss_t2v(&y, &labels) - t2v).abs() < 1e-15);
    assert!((loss_v2t(&y, &labels) - v2t).abs() < 1e-15);
}

fn text(rows: Vec<Vec<f64>>) -> TextTokens {
    let m = scalar::array(&rows);
    let summary = m.sum_axis(ndarray::Axis(0));
    TextTokens::new(m, summary)
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    proptest::collection::vec(proptest::collection::vec(0.05f64..1.0, cols), rows)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_stay_normalized(
        (frames, global, subs) in (1usize..6).prop_flat_map(|d| (
            matrix(5, d),
            matrix(3, d),
            proptest::collection::vec(matrix(2, d), 2..4),
        ))
    ) {
        let f = scalar::array(&frames);
        let g = scalar::array(&global);
        let coarse = alignment::coarse_importance(g.view(), f.view()).unwrap();
        prop_assert!((coarse.sum() - 3.0).abs() < 1e-9);
        prop_assert!(coarse.iter().all(|&a| a > 0.0));
        let subs: Vec<TextTokens> = subs.into_iter().map(text).collect();
        let fine = alignment::fine_importance(&subs, f.view()).unwrap();
        prop_assert!((fine.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn embeddings_lie_in_the_weighted_hull(frames in matrix(4, 3), raw in proptest::collection::vec(0.0f64..1.0, 4)) {
        prop_assume!(raw.iter().sum::<f64>() > 1e-3);
        let total: f64 = raw.iter().sum();
        let a = Array1::from(raw.iter().map(|x| x / total).collect::<Vec<_>>());
        let f = scalar::array(&frames);
        let o = alignment::coarse_embedding(f.view(), a.view()).unwrap();
        for d in 0..3 {
            let lo = frames.iter().map(|r| r[d]).fold(f64::INFINITY, f64::min);
            let hi = frames.iter().map(|r| r[d]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(o[d] >= lo - 1e-12 && o[d] <= hi + 1e-12);
        }
    }

    #[test]
    fn zero_value_projection_keeps_tokens(global in matrix(3, 4), sub in matrix(2, 4), wq in matrix(4, 4)) {
        let att = AttentionParams { wq: scalar::array(&wq), ..AttentionParams::zeros(4) };
        let g = text(global);
        let out = alignment::augment_global_text(&g, &[text(sub)], &att).unwrap();
        prop_assert_eq!(out, g.tokens);
    }

    #[test]
    fn losses_are_nonnegative(y in matrix(4, 3), labels in proptest::collection::vec(0usize..3, 4)) {
        let y = scalar::array(&y).mapv(|v| v * 20.0);
        prop_assert!(loss_t2v(&y, &labels) >= 0.0);
        prop_assert!(loss_v2t(&y, &labels) >= 0.0);
    }
}
