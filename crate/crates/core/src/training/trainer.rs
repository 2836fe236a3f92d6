//! Mini-batch training loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    Activation, CoarseForm, InitConfig, ModelParams, Scorer, Variant, DEFAULT_LAMBDA, DEFAULT_TAU,
};
use crate::embedding_store::{validate, EmbeddingDataset, FrameEmbeddings};
use crate::error::{Error, Result};
use crate::training::backward::{backward, compute_logits, Batch};
use crate::training::loss::loss_breakdown;
use crate::training::optim::{adamw_step, AdamWConfig, LrSchedule, OptimState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda: f64,
    pub tau: f64,
    pub variant: Variant,
    pub coarse_form: CoarseForm,
    pub heads: usize,
    pub hidden: Option<usize>,
    pub activation: Activation,
    pub ffn_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        let init = InitConfig::default();
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 5e-4,
            warmup_epochs: 5,
            weight_decay: adam.weight_decay,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            lambda: DEFAULT_LAMBDA,
            tau: DEFAULT_TAU,
            variant: Variant::Full,
            coarse_form: CoarseForm::Softmax,
            heads: init.heads,
            hidden: init.hidden,
            activation: init.activation,
            ffn_noise: init.ffn_noise,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::TrainConfigInvalid(e.message().to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::TrainConfigInvalid(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.ffn_noise >= 0.0) {
            return bad("eps must be positive, weight_decay and ffn_noise non-negative");
        }
        Ok(())
    }

    pub fn init_config(&self) -> InitConfig {
        InitConfig {
            heads: self.heads,
            hidden: self.hidden,
            activation: self.activation,
            ffn_noise: self.ffn_noise,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Fresh parameters for `dim`, drawn from `rng`, carrying this config's
    /// temperature, loss weight, variant and coarse form.
    pub fn fresh_params(&self, dim: usize, rng: &mut ChaCha8Rng) -> Result<ModelParams> {
        let mut p = ModelParams::init(dim, &self.init_config(), rng)?;
        p.tau = self.tau;
        p.lambda = self.lambda;
        p.variant = self.variant;
        p.coarse_form = self.coarse_form;
        Ok(p)
    }
}

/// Losses are averaged over fixed, unshuffled batches of the whole training
/// set; `epoch` 0 describes the initial parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_t2v: f64,
    pub loss_v2t: f64,
    pub total: f64,
    pub train_top1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
}

fn record(
    epoch: usize,
    ds: &EmbeddingDataset,
    p: &ModelParams,
    batch_size: usize,
) -> Result<EpochRecord> {
    let mut sums = (0.0, 0.0, 0.0);
    let chunks: Vec<&[FrameEmbeddings]> = ds.videos.chunks(batch_size).collect();
    for chunk in &chunks {
        let batch = Batch::new(chunk.iter().collect());
        let y = compute_logits(&batch, &ds.classes, p)?;
        let l = loss_breakdown(&y.y, &batch.labels(), p.lambda);
        sums.0 += l.t2v;
        sums.1 += l.v2t;
        sums.2 += l.total;
    }
    let n = chunks.len() as f64;
    let scorer = Scorer::new(&ds.classes, p)?;
    let hits = ds
        .videos
        .par_iter()
        .map(|v| {
            Ok(v.labels
                .contains(&scorer.classify(v.frames.view())?.predicted))
        })
        .collect::<Result<Vec<bool>>>()?;
    let correct = hits.iter().filter(|&&h| h).count();
    Ok(EpochRecord {
        epoch,
        loss_t2v: sums.0 / n,
        loss_v2t: sums.1 / n,
        total: sums.2 / n,
        train_top1: correct as f64 / ds.videos.len() as f64,
    })
}

/// Trains fresh parameters on every video of `ds`. Multi-label videos are
/// trained under their first label.
pub fn train(ds: &EmbeddingDataset, cfg: &TrainConfig, seed: u64) -> Result<TrainOutput> {
    cfg.check()?;
    let report = validate(ds);
    if !report.is_valid() {
        return Err(Error::ValidationFailure(report));
    }
    if ds.videos.is_empty() {
        return Err(Error::TrainConfigInvalid("dataset has no videos".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = cfg.fresh_params(ds.dim, &mut rng)?;
    train_from(ds, cfg, params, &mut rng)
}

/// Continues training `params`, shuffling with `rng`.
pub fn train_from(
    ds: &EmbeddingDataset,
    cfg: &TrainConfig,
    mut params: ModelParams,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutput> {
    cfg.check()?;
    let steps_per_epoch = ds.videos.len().div_ceil(cfg.batch_size) as u64;
    let schedule = LrSchedule::WarmupCosine {
        warmup_steps: cfg.warmup_epochs as u64 * steps_per_epoch,
        total_steps: cfg.epochs as u64 * steps_per_epoch,
    };
    let mut state = OptimState::new(&params, cfg.adamw(), schedule);
    let mut history = vec![record(0, ds, &params, cfg.batch_size)?];
    let mut order: Vec<usize> = (0..ds.videos.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        for idx in order.chunks(cfg.batch_size) {
            let batch = Batch::new(idx.iter().map(|&i| &ds.videos[i]).collect());
            let out = backward(&batch, &ds.classes, &params)?;
            adamw_step(&mut params, &out.grads, &mut state)?;
        }
        history.push(record(epoch, ds, &params, cfg.batch_size)?);
    }
    Ok(TrainOutput { params, history })
}

pub fn write_history_csv<W: Write>(history: &[EpochRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in history {
        w.serialize(r)
            .map_err(|e| Error::ConfigInvalid(format!("writing history: {e}")))?;
    }
    w.flush()
        .map_err(|e| Error::ConfigInvalid(format!("writing history: {e}")))?;
    Ok(())
}
