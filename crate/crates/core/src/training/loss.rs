//! Text-to-video and video-to-text InfoNCE over a batch of logits.
//!
//! `y[b][c]` is the scaled similarity of batch video `b` to class `c`. For a
//! video `b` with label `c_b`, `k_b` is the set of batch videos sharing that
//! label (including `b`). Both losses are negated mean log-probabilities, so
//! they are non-negative and minimized during training.

use ndarray::{Array1, Array2, ArrayView1};
use serde::Serialize;

/// Scaled similarities, one row per batch video.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    pub y: Array2<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub t2v: f64,
    pub v2t: f64,
    pub total: f64,
}

fn log_sum_exp(v: ArrayView1<f64>) -> f64 {
    let max = v.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn softmax_view(v: ArrayView1<f64>) -> Array1<f64> {
    let lse = log_sum_exp(v);
    v.mapv(|x| (x - lse).exp())
}

fn positives(labels: &[usize]) -> Vec<Vec<usize>> {
    labels
        .iter()
        .map(|&c| {
            labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == c)
                .map(|(i, _)| i)
                .collect()
        })
        .collect()
}

/// Each class column is a softmax over the batch videos.
pub fn loss_t2v(y: &Array2<f64>, labels: &[usize]) -> f64 {
    let b_count = labels.len();
    if b_count == 0 {
        return 0.0;
    }
    let pos = positives(labels);
    let mut acc = 0.0;
    for (b, &c) in labels.iter().enumerate() {
        let lse = log_sum_exp(y.column(c));
        let mean = pos[b].iter().map(|&bp| y[[bp, c]] - lse).sum::<f64>() / pos[b].len() as f64;
        acc += mean;
    }
    -acc / b_count as f64
}

/// Each video row is a softmax over the classes.
pub fn loss_v2t(y: &Array2<f64>, labels: &[usize]) -> f64 {
    let b_count = labels.len();
    if b_count == 0 {
        return 0.0;
    }
    let pos = positives(labels);
    let row_lse: Vec<f64> = y.rows().into_iter().map(log_sum_exp).collect();
    let mut acc = 0.0;
    for (b, &c) in labels.iter().enumerate() {
        let mean = pos[b]
            .iter()
            .map(|&bp| y[[bp, c]] - row_lse[bp])
            .sum::<f64>()
            / pos[b].len() as f64;
        acc += mean;
    }
    -acc / b_count as f64
}

/// `L_t2v + lambda * L_v2t`.
pub fn total_loss(y: &Array2<f64>, labels: &[usize], lambda: f64) -> f64 {
    loss_t2v(y, labels) + lambda * loss_v2t(y, labels)
}

pub fn loss_breakdown(y: &Array2<f64>, labels: &[usize], lambda: f64) -> LossBreakdown {
    let t2v = loss_t2v(y, labels);
    let v2t = loss_v2t(y, labels);
    LossBreakdown {
        t2v,
        v2t,
        total: t2v + lambda * v2t,
    }
}

/// Losses and the gradient of the total loss with respect to every logit.
pub fn loss_and_logit_grad(
    y: &Array2<f64>,
    labels: &[usize],
    lambda: f64,
) -> (LossBreakdown, Array2<f64>) {
    let parts = loss_breakdown(y, labels, lambda);
    let mut dy = Array2::zeros(y.raw_dim());
    let b_count = labels.len();
    if b_count == 0 {
        return (parts, dy);
    }
    let pos = positives(labels);
    let coef = 1.0 / b_count as f64;
    let row_soft: Vec<Array1<f64>> = y.rows().into_iter().map(softmax_view).collect();
    for (b, &c) in labels.iter().enumerate() {
        let share = coef / pos[b].len() as f64;
        // text-to-video
        let col_soft = softmax_view(y.column(c));
        for &bp in &pos[b] {
            dy[[bp, c]] -= share;
        }
        dy.column_mut(c).scaled_add(coef, &col_soft);
        // video-to-text
        for &bp in &pos[b] {
            dy[[bp, c]] -= lambda * share;
            dy.row_mut(bp).scaled_add(lambda * share, &row_soft[bp]);
        }
    }
    (parts, dy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Literal loop transcription of the two losses, no stabilization.
    fn oracle(y: &[Vec<f64>], labels: &[usize]) -> (f64, f64) {
        let b_count = y.len();
        let c_count = y[0].len();
        let mut t2v = 0.0;
        let mut v2t = 0.0;
        for b in 0..b_count {
            let c = labels[b];
            let k: Vec<usize> = (0..b_count).filter(|&i| labels[i] == c).collect();
            let mut st = 0.0;
            let mut sv = 0.0;
            for &bp in &k {
                let mut den_t = 0.0;
                for bpp in 0..b_count {
                    den_t += y[bpp][c].exp();
                }
                st += (y[bp][c].exp() / den_t).ln();
                let mut den_v = 0.0;
                for cc in 0..c_count {
                    den_v += y[bp][cc].exp();
                }
                sv += (y[bp][c].exp() / den_v).ln();
            }
            t2v += st / k.len() as f64;
            v2t += sv / k.len() as f64;
        }
        (-t2v / b_count as f64, -v2t / b_count as f64)
    }

    fn to_rows(y: &Array2<f64>) -> Vec<Vec<f64>> {
        y.rows().into_iter().map(|r| r.to_vec()).collect()
    }

    #[test]
    fn trivial_cases() {
        let y = array![[0.7]];
        assert_eq!(loss_t2v(&y, &[0]), 0.0);
        assert_eq!(loss_v2t(&y, &[0]), 0.0);
        assert_eq!(total_loss(&y, &[0], 1.0), 0.0);
        let y = array![[0.3, 0.1], [0.3, -2.0]];
        assert!((loss_t2v(&y, &[0, 0]) - 2f64.ln()).abs() < 1e-15);
        let y = array![[1.5], [-0.5], [2.0]];
        assert!(loss_v2t(&y, &[0, 0, 0]).abs() < 1e-15);
        let y = Array2::from_elem((3, 5), 0.4);
        assert!((loss_v2t(&y, &[0, 3, 3]) - 5f64.ln()).abs() < 1e-14);
        let y = array![[0.3, 0.9], [0.2, -0.1]];
        assert_eq!(total_loss(&y, &[1, 0], 0.0), loss_t2v(&y, &[1, 0]));
    }

    #[test]
    fn random_instances_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let y = Array2::from_shape_simple_fn((4, 3), || rng.random_range(-3.0..3.0));
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
            let (t, v) = oracle(&to_rows(&y), &labels);
            assert!((loss_t2v(&y, &labels) - t).abs() < 1e-10);
            assert!((loss_v2t(&y, &labels) - v).abs() < 1e-10);
            let lambda = rng.random_range(0.0..2.0);
            assert!((total_loss(&y, &labels, lambda) - (t + lambda * v)).abs() < 1e-10);
        }
    }

    #[test]
    fn large_logits_stay_finite() {
        let y = array![[1e4, -1e4, 3e3], [-1e4, 1e4, 0.0]];
        let l = total_loss(&y, &[0, 1], 1.0);
        assert!(l.is_finite());
        let (_, dy) = loss_and_logit_grad(&y, &[0, 2], 1.0);
        assert!(dy.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn logit_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let y = Array2::from_shape_simple_fn((5, 4), || rng.random_range(-2.0..2.0));
            let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..4)).collect();
            let lambda = 0.7;
            let (_, dy) = loss_and_logit_grad(&y, &labels, lambda);
            let h = 1e-6;
            for idx in [(0, 0), (1, 2), (4, 3), (2, 1), (3, labels[3])] {
                let mut yp = y.clone();
                yp[idx] += h;
                let mut ym = y.clone();
                ym[idx] -= h;
                let num = (total_loss(&yp, &labels, lambda) - total_loss(&ym, &labels, lambda))
                    / (2.0 * h);
                assert!(
                    (num - dy[idx]).abs() < 1e-7,
                    "{idx:?}: {num} vs {}",
                    dy[idx]
                );
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
            (1usize..6, 1usize..5).prop_flat_map(|(b, c)| {
                (
                    proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, c), b),
                    proptest::collection::vec(0..c, b),
                )
            })
        }

        fn matrix(rows: &[Vec<f64>]) -> Array2<f64> {
            Array2::from_shape_fn((rows.len(), rows[0].len()), |(i, j)| rows[i][j])
        }

        proptest! {
            #[test]
            fn shift_invariance_and_non_negativity(
                (rows, labels) in instance(),
                shift in -10.0f64..10.0,
            ) {
                let y = matrix(&rows);
                let t = loss_t2v(&y, &labels);
                let v = loss_v2t(&y, &labels);
                prop_assert!(t >= -1e-12 && v >= -1e-12);

                // per-row shift leaves v2t unchanged
                let mut rowshift = y.clone();
                for (i, mut r) in rowshift.rows_mut().into_iter().enumerate() {
                    r += shift * (i as f64 + 1.0);
                }
                prop_assert!((loss_v2t(&rowshift, &labels) - v).abs() < 1e-9);

                // per-column shift leaves t2v unchanged
                let mut colshift = y.clone();
                for (j, mut c) in colshift.columns_mut().into_iter().enumerate() {
                    c += shift * (j as f64 - 1.0);
                }
                prop_assert!((loss_t2v(&colshift, &labels) - t).abs() < 1e-9);
            }
        }
    }
}
