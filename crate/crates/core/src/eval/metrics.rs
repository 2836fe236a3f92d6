//! Classification and retrieval metrics.
//!
//! Ranking conventions, pinned because planted data produces exact ties:
//!
//! * Top-k: class `c` ranks above `c'` when its score is higher, or equal
//!   with a lower class index. A video counts as correct when any of its
//!   labels is among the first `k` classes.
//! * mAP: for each class, videos are ranked by that class's score, equal
//!   scores ordered by lower video index. Average precision is the mean of
//!   precision@r over the ranks `r` of the positives. mAP averages AP over
//!   classes with at least one positive.
//!
//! Worked example for mAP with scores (rows are videos, columns classes)
//! `[[0.9, 0.1], [0.8, 0.7], [0.3, 0.6], [0.2, 0.4]]` and labels
//! `{0}, {1}, {1}, {0, 1}`: class 0 ranks videos 0, 1, 2, 3 with positives
//! at ranks 1 and 4, AP = (1/1 + 2/4) / 2 = 0.75; class 1 ranks 1, 2, 3, 0
//! with positives at 1, 2, 3, AP = 1; mAP = 0.875.

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use crate::alignment::{ModelParams, Scorer};
use crate::embedding_store::EmbeddingDataset;
use crate::error::{Error, Result};

/// Position of `class` in the ranking of `row`, 0-based.
fn rank_of(row: ndarray::ArrayView1<f64>, class: usize) -> usize {
    let s = row[class];
    row.iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < class))
        .count()
}

pub fn topk_accuracy_sets(scores: &Array2<f64>, labelsets: &[Vec<usize>], k: usize) -> Result<f64> {
    let classes = scores.ncols();
    if k == 0 || k > classes {
        return Err(Error::BadK { k, classes });
    }
    if labelsets.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for (i, (row, labels)) in scores.rows().into_iter().zip(labelsets).enumerate() {
        if labels.is_empty() {
            return Err(Error::EmptyLabelSet(i));
        }
        if labels.iter().any(|&c| c < classes && rank_of(row, c) < k) {
            hits += 1;
        }
    }
    Ok(hits as f64 / labelsets.len() as f64)
}

pub fn topk_accuracy(scores: &Array2<f64>, labels: &[usize], k: usize) -> Result<f64> {
    let sets: Vec<Vec<usize>> = labels.iter().map(|&l| vec![l]).collect();
    topk_accuracy_sets(scores, &sets, k)
}

pub fn average_precision(column: ndarray::ArrayView1<f64>, positive: &[bool]) -> Option<f64> {
    let total = positive.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..column.len()).collect();
    order.sort_by(|&a, &b| column[b].total_cmp(&column[a]).then(a.cmp(&b)));
    let mut found = 0;
    let mut acc = 0.0;
    for (r, &v) in order.iter().enumerate() {
        if positive[v] {
            found += 1;
            acc += found as f64 / (r + 1) as f64;
        }
    }
    Some(acc / total as f64)
}

pub fn mean_average_precision(scores: &Array2<f64>, labelsets: &[Vec<usize>]) -> Result<f64> {
    if let Some(i) = labelsets.iter().position(|l| l.is_empty()) {
        return Err(Error::EmptyLabelSet(i));
    }
    let mut sum = 0.0;
    let mut counted = 0;
    for c in 0..scores.ncols() {
        let positive: Vec<bool> = labelsets.iter().map(|l| l.contains(&c)).collect();
        if let Some(ap) = average_precision(scores.column(c), &positive) {
            sum += ap;
            counted += 1;
        }
    }
    Ok(if counted == 0 {
        0.0
    } else {
        sum / counted as f64
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub name: String,
    pub videos: usize,
    pub top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub top1: f64,
    /// Top-k with `k = min(5, classes)`.
    pub top5: f64,
    /// Only for multi-label datasets.
    pub map: Option<f64>,
    pub per_class: Vec<ClassAccuracy>,
}

/// Class scores for every video, one row per video.
pub fn score_matrix(ds: &EmbeddingDataset, p: &ModelParams) -> Result<Array2<f64>> {
    let scorer = Scorer::new(&ds.classes, p)?;
    let rows = ds
        .videos
        .par_iter()
        .map(|v| scorer.scores(v.frames.view()))
        .collect::<Result<Vec<_>>>()?;
    let mut m = Array2::zeros((rows.len(), ds.classes.len()));
    for (i, r) in rows.iter().enumerate() {
        for (j, s) in r.iter().enumerate() {
            m[[i, j]] = *s;
        }
    }
    Ok(m)
}

pub fn report_from_scores(
    scores: &Array2<f64>,
    labelsets: &[Vec<usize>],
    class_names: &[String],
    multi_label: bool,
) -> Result<EvalReport> {
    let c = scores.ncols();
    let top1 = topk_accuracy_sets(scores, labelsets, 1)?;
    let top5 = topk_accuracy_sets(scores, labelsets, c.min(5))?;
    let map = if multi_label {
        Some(mean_average_precision(scores, labelsets)?)
    } else {
        None
    };
    let per_class = (0..c)
        .map(|class| {
            let members: Vec<usize> = labelsets
                .iter()
                .enumerate()
                .filter(|(_, l)| l.first() == Some(&class))
                .map(|(i, _)| i)
                .collect();
            let hits = members
                .iter()
                .filter(|&&i| labelsets[i].iter().any(|&l| rank_of(scores.row(i), l) == 0))
                .count();
            ClassAccuracy {
                class,
                name: class_names.get(class).cloned().unwrap_or_default(),
                videos: members.len(),
                top1: if members.is_empty() {
                    0.0
                } else {
                    hits as f64 / members.len() as f64
                },
            }
        })
        .collect();
    Ok(EvalReport {
        top1,
        top5,
        map,
        per_class,
    })
}

pub fn evaluate(ds: &EmbeddingDataset, p: &ModelParams) -> Result<EvalReport> {
    if ds.classes.is_empty() {
        return Err(Error::EmptyClassList);
    }
    let scores = score_matrix(ds, p)?;
    let labels: Vec<Vec<usize>> = ds.videos.iter().map(|v| v.labels.clone()).collect();
    report_from_scores(&scores, &labels, &ds.class_names(), ds.is_multi_label())
}

#[derive(Serialize)]
struct ProfileRow<'a> {
    video: &'a str,
    class: usize,
    frame: usize,
    coarse: f64,
    fine: f64,
}

/// Coarse and fine frame weights of every video under its primary class,
/// one CSV row per frame.
pub fn write_profiles_csv<W: std::io::Write>(
    ds: &EmbeddingDataset,
    p: &ModelParams,
    out: W,
) -> Result<()> {
    let scorer = Scorer::new(&ds.classes, p)?;
    let profiles = ds
        .videos
        .par_iter()
        .map(|v| Ok(scorer.profiles(v.frames.view())?.swap_remove(v.label())))
        .collect::<Result<Vec<_>>>()?;
    let err = |e: csv::Error| Error::ConfigInvalid(format!("writing profiles: {e}"));
    let mut w = csv::Writer::from_writer(out);
    for (v, prof) in ds.videos.iter().zip(&profiles) {
        for (frame, (&coarse, &fine)) in prof.coarse.iter().zip(&prof.fine).enumerate() {
            w.serialize(ProfileRow {
                video: &v.video_id,
                class: v.label(),
                frame,
                coarse,
                fine,
            })
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| err(e.into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn topk_examples() {
        let onehot = Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 1.0 } else { 0.0 });
        assert_eq!(topk_accuracy(&onehot, &[0, 1, 2, 3], 1).unwrap(), 1.0);
        let s = array![[0.2, 0.5, 0.3], [0.9, 0.05, 0.05], [0.1, 0.1, 0.8]];
        assert_eq!(topk_accuracy(&s, &[0, 1, 2], 1).unwrap(), 1.0 / 3.0);
        assert_eq!(topk_accuracy(&s, &[0, 1, 2], 3).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&s, &[0, 1, 2], 2).unwrap(), 2.0 / 3.0);
        assert!(matches!(
            topk_accuracy(&s, &[0, 1, 2], 0),
            Err(Error::BadK { .. })
        ));
        assert!(matches!(
            topk_accuracy(&s, &[0, 1, 2], 4),
            Err(Error::BadK { .. })
        ));
    }

    #[test]
    fn ties_favour_lower_class_index() {
        let s = array![[0.5, 0.5, 0.5]];
        assert_eq!(topk_accuracy(&s, &[0], 1).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&s, &[1], 1).unwrap(), 0.0);
        assert_eq!(topk_accuracy(&s, &[1], 2).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&s, &[2], 2).unwrap(), 0.0);
    }

    #[test]
    fn map_examples() {
        let s = array![[0.9], [0.1]];
        assert_eq!(
            mean_average_precision(&s, &[vec![0], vec![0]]).unwrap(),
            1.0
        );
        let s = array![[0.9, 0.0], [0.1, 0.0]];
        // class 0: positive ranked last of two
        assert_eq!(average_precision(s.column(0), &[false, true]).unwrap(), 0.5);
        let s = array![[0.9, 0.1], [0.8, 0.7], [0.3, 0.6], [0.2, 0.4]];
        let labels = vec![vec![0], vec![1], vec![1], vec![0, 1]];
        assert!((mean_average_precision(&s, &labels).unwrap() - 0.875).abs() < 1e-15);
        assert!(matches!(
            mean_average_precision(&s, &[vec![0], vec![], vec![1], vec![1]]),
            Err(Error::EmptyLabelSet(1))
        ));
    }

    #[test]
    fn perfect_separation_gives_unit_map() {
        let s = array![
            [0.9, 0.2, 0.1],
            [0.8, 0.3, 0.7],
            [0.1, 0.9, 0.6],
            [0.0, 0.8, 0.2]
        ];
        let labels = vec![vec![0], vec![0, 2], vec![1, 2], vec![1]];
        assert_eq!(mean_average_precision(&s, &labels).unwrap(), 1.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn topk_is_monotone_in_k(
                rows in proptest::collection::vec(proptest::collection::vec(0i32..4, 5), 1..12),
                seed in 0usize..5,
            ) {
                // small integer scores so ties are frequent
                let s = Array2::from_shape_fn((rows.len(), 5), |(i, j)| rows[i][j] as f64);
                let labels: Vec<usize> = (0..rows.len()).map(|i| (i + seed) % 5).collect();
                let mut prev = 0.0;
                for k in 1..=5 {
                    let a = topk_accuracy(&s, &labels, k).unwrap();
                    prop_assert!(a >= prev && (0.0..=1.0).contains(&a));
                    prev = a;
                }
                prop_assert_eq!(prev, 1.0);
            }

            #[test]
            fn separated_positives_give_unit_map(
                labels in proptest::collection::vec(proptest::collection::btree_set(0usize..3, 1..3), 1..10),
                noise in proptest::collection::vec(0.0f64..0.4, 30),
            ) {
                let sets: Vec<Vec<usize>> = labels.iter().map(|s| s.iter().copied().collect()).collect();
                let s = Array2::from_shape_fn((sets.len(), 3), |(i, j)| {
                    let base = if sets[i].contains(&j) { 1.0 } else { 0.0 };
                    base + noise[(i * 3 + j) % 30]
                });
                prop_assert_eq!(mean_average_precision(&s, &sets).unwrap(), 1.0);
            }
        }
    }
}
