//! Dataset splits and the evaluation protocols built on them.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{ModelParams, Variant};
use crate::embedding_store::{EmbeddingDataset, SubtextCandidateSet};
use crate::error::{Error, Result};
use crate::eval::metrics::{evaluate, EvalReport};
use crate::subtext_metrics::{tpp_dataset_average, TppConfig};
use crate::training::{train, TrainConfig};

/// Keeps the listed classes, in that order, and the videos labelled with
/// them. Labels are renumbered; labels outside the subset are dropped.
pub fn class_subset(ds: &EmbeddingDataset, keep: &[usize]) -> Result<EmbeddingDataset> {
    let mut remap = BTreeMap::new();
    for (new, &old) in keep.iter().enumerate() {
        if old >= ds.classes.len() {
            return Err(Error::ConfigInvalid(format!(
                "class {old} out of range for {} classes",
                ds.classes.len()
            )));
        }
        if remap.insert(old, new).is_some() {
            return Err(Error::ConfigInvalid(format!("class {old} listed twice")));
        }
    }
    let classes = keep.iter().map(|&c| ds.classes[c].clone()).collect();
    let videos = ds
        .videos
        .iter()
        .filter_map(|v| {
            let labels: Vec<usize> = v
                .labels
                .iter()
                .filter_map(|l| remap.get(l).copied())
                .collect();
            (!labels.is_empty()).then(|| {
                let mut v = v.clone();
                v.labels = labels;
                v
            })
        })
        .collect();
    let candidates = ds
        .candidates
        .iter()
        .filter_map(|cs| {
            remap.get(&cs.class_id).map(|&new| SubtextCandidateSet {
                class_id: new,
                groups: cs.groups.clone(),
            })
        })
        .collect();
    let mut out = EmbeddingDataset::new(ds.dim, videos, classes);
    out.candidates = candidates;
    Ok(out)
}

fn with_videos(ds: &EmbeddingDataset, idx: &[usize]) -> EmbeddingDataset {
    let mut out = ds.clone();
    out.videos = idx.iter().map(|&i| ds.videos[i].clone()).collect();
    out
}

/// Video indices grouped by primary label.
fn by_class(ds: &EmbeddingDataset) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); ds.classes.len()];
    for (i, v) in ds.videos.iter().enumerate() {
        if let Some(&c) = v.labels.first() {
            if c < groups.len() {
                groups[c].push(i);
            }
        }
    }
    groups
}

fn split_by(
    ds: &EmbeddingDataset,
    seed: u64,
    mut take: impl FnMut(usize, usize) -> Result<usize>,
) -> Result<(EmbeddingDataset, EmbeddingDataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut rest_idx = Vec::new();
    for (c, mut members) in by_class(ds).into_iter().enumerate() {
        let n = take(c, members.len())?;
        members.shuffle(&mut rng);
        train_idx.extend_from_slice(&members[..n]);
        rest_idx.extend_from_slice(&members[n..]);
    }
    train_idx.sort_unstable();
    rest_idx.sort_unstable();
    Ok((with_videos(ds, &train_idx), with_videos(ds, &rest_idx)))
}

/// Exactly `shots` videos per class for training, the rest for evaluation.
pub fn few_shot_split(
    ds: &EmbeddingDataset,
    shots: usize,
    seed: u64,
) -> Result<(EmbeddingDataset, EmbeddingDataset)> {
    split_by(ds, seed, |class, found| {
        if found <= shots {
            Err(Error::InsufficientVideos {
                class,
                found,
                shots,
            })
        } else {
            Ok(shots)
        }
    })
}

/// `round(train_fraction * n)` videos of each class for training.
pub fn stratified_split(
    ds: &EmbeddingDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(EmbeddingDataset, EmbeddingDataset)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::ConfigInvalid(format!(
            "train fraction {train_fraction} outside [0, 1]"
        )));
    }
    split_by(ds, seed, |_, found| {
        Ok(((train_fraction * found as f64).round() as usize).min(found))
    })
}

/// Parameters together with the classes they were trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub classes: Vec<String>,
}

/// Classifies unseen classes with frozen parameters.
pub fn zero_shot_eval(model: &TrainedModel, ds: &EmbeddingDataset) -> Result<EvalReport> {
    let overlap: Vec<String> = ds
        .class_names()
        .into_iter()
        .filter(|n| model.classes.contains(n))
        .collect();
    if !overlap.is_empty() {
        return Err(Error::ClassOverlap(overlap));
    }
    evaluate(ds, &model.params)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub top1: f64,
    pub top5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["variant", "top1", "top5"])
            .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([r.variant.name(), &r.top1.to_string(), &r.top5.to_string()])
                .map_err(csv_err)?;
        }
        w.flush().map_err(|e| csv_err(e.into()))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::ConfigInvalid(format!("writing csv: {e}"))
}

/// One row per variant, in baseline, coarse, fine, full order.
pub fn ablation_suite(ds: &EmbeddingDataset, trained: &[ModelParams]) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(4);
    for v in Variant::ALL {
        let p = trained
            .iter()
            .find(|p| p.variant == v)
            .ok_or_else(|| Error::ConfigInvalid(format!("no parameters for variant {v}")))?;
        let r = evaluate(ds, p)?;
        rows.push(AblationRow {
            variant: v,
            top1: r.top1,
            top5: r.top5,
        });
    }
    Ok(AblationTable { rows })
}

/// Trains every variant with the same budget and seed, then evaluates.
pub fn run_ablation(
    train_ds: &EmbeddingDataset,
    eval_ds: &EmbeddingDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<AblationTable> {
    let trained = Variant::ALL
        .iter()
        .map(|&variant| {
            let cfg = TrainConfig {
                variant,
                ..cfg.clone()
            };
            Ok(train(train_ds, &cfg, seed)?.params)
        })
        .collect::<Result<Vec<_>>>()?;
    ablation_suite(eval_ds, &trained)
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx <= 1e-24 * n {
        return Err(Error::DegenerateVariance("tpp"));
    }
    if syy <= 1e-24 * n {
        return Err(Error::DegenerateVariance("top1"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TppPoint {
    pub group: usize,
    pub tpp: f64,
    pub top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TppStudy {
    pub points: Vec<TppPoint>,
    pub pearson_r: f64,
}

impl TppStudy {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for p in &self.points {
            w.serialize(p).map_err(csv_err)?;
        }
        w.flush().map_err(|e| csv_err(e.into()))
    }
}

/// Number of candidate groups every class offers.
pub fn candidate_group_count(ds: &EmbeddingDataset) -> usize {
    if ds.candidates.len() < ds.classes.len() {
        return 0;
    }
    ds.candidates
        .iter()
        .map(|c| c.groups.len())
        .min()
        .unwrap_or(0)
}

/// For each candidate group: install it in both datasets, record the
/// training set's average TPP, train, and record evaluation top-1.
pub fn tpp_correlation_study(
    train_ds: &EmbeddingDataset,
    eval_ds: &EmbeddingDataset,
    cfg: &TrainConfig,
    tpp: &TppConfig,
    seed: u64,
) -> Result<TppStudy> {
    let groups = candidate_group_count(train_ds);
    if groups < 3 {
        return Err(Error::NeedThreeGroups(groups));
    }
    let installed = (0..groups)
        .map(|g| {
            let tr = train_ds.with_candidate_group(g)?;
            let ev = eval_ds.with_candidate_group(g)?;
            let score = tpp_dataset_average(&tr, tpp)?;
            Ok((tr, ev, score))
        })
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = installed.iter().map(|x| x.2).collect();
    let mean = scores.iter().sum::<f64>() / groups as f64;
    if scores
        .iter()
        .all(|s| (s - mean).abs() <= 1e-12 * mean.abs().max(1.0))
    {
        return Err(Error::DegenerateVariance("tpp"));
    }
    let mut points = Vec::with_capacity(groups);
    for (g, (tr, ev, score)) in installed.iter().enumerate() {
        let out = train(tr, cfg, seed)?;
        let r = evaluate(ev, &out.params)?;
        points.push(TppPoint {
            group: g,
            tpp: *score,
            top1: r.top1,
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.tpp).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.top1).collect();
    let pearson_r = pearson(&xs, &ys)?;
    Ok(TppStudy { points, pearson_r })
}
