//! Forward pass with cached intermediates and its hand-derived reverse pass.
//!
//! Gradients flow from the loss through the logits `cos(t_c, o)/tau`, the two
//! feed-forward heads, the coarse frame weights and the augmented global
//! tokens into the attention projections. Fine weights and all embeddings are
//! constants. The class-level augmentation is shared by every video in the
//! batch, so token gradients are reduced per class before the attention
//! backward runs once per class.

use ndarray::{s, Array1, Array2, Axis};
use rayon::prelude::*;

use crate::alignment::{
    augment_cached, coarse_weights_from_sims, fine_from_units, mean_pool_baseline, weighted_frames,
    AugmentCache, ClassContext, CoarseForm, FfnCache, ModelParams, PreparedVideo, Variant,
};
use crate::embedding_store::{ClassTextBundle, FrameEmbeddings};
use crate::error::{Error, Result};
use crate::training::gradients::{GradientSet, TensorSet};
use crate::training::loss::{loss_and_logit_grad, loss_breakdown, LogitMatrix, LossBreakdown};

/// Videos of one optimization step.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub videos: Vec<&'a FrameEmbeddings>,
}

impl<'a> Batch<'a> {
    pub fn new(videos: Vec<&'a FrameEmbeddings>) -> Self {
        Self { videos }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.videos.iter().map(|v| v.label()).collect()
    }

    fn check(&self, num_classes: usize) -> Result<()> {
        if self.videos.is_empty() {
            return Err(Error::TrainConfigInvalid("empty batch".into()));
        }
        if num_classes == 0 {
            return Err(Error::EmptyClassList);
        }
        for (i, v) in self.videos.iter().enumerate() {
            if v.labels.is_empty() {
                return Err(Error::EmptyLabelSet(i));
            }
            if let Some(&bad) = v.labels.iter().find(|&&l| l >= num_classes) {
                return Err(Error::DimMismatch(format!(
                    "label {bad} of video {} exceeds {num_classes} classes",
                    v.video_id
                )));
            }
        }
        Ok(())
    }
}

pub struct BackwardOutput {
    pub loss: LossBreakdown,
    pub grads: GradientSet,
    pub logits: LogitMatrix,
}

/// Cached forward state of one (video, class) pair.
struct PairCache {
    /// Token-frame cosine similarities, M x L.
    sims: Array2<f64>,
    /// Normalized coarse weights per token, M x L.
    weights: Array2<f64>,
    coarse_cache: Option<FfnCache>,
    fine_cache: Option<FfnCache>,
    o: Array1<f64>,
    o_norm: f64,
    cos: f64,
}

struct ClassState {
    ctx: ClassContext,
    cache: AugmentCache,
}

fn class_states(classes: &[ClassTextBundle], p: &ModelParams) -> Result<Vec<ClassState>> {
    classes
        .iter()
        .enumerate()
        .map(|(c, b)| {
            let (t_hat, cache) =
                augment_cached(&b.global, &b.subtexts, &p.attention).map_err(Error::in_class(c))?;
            let ctx = ClassContext::from_augmented(b, t_hat).map_err(Error::in_class(c))?;
            Ok(ClassState { ctx, cache })
        })
        .collect()
}

fn forward_pair(video: &PreparedVideo, ctx: &ClassContext, p: &ModelParams) -> Result<PairCache> {
    let dim = ctx.t_hat.ncols();
    if video.frames.ncols() != dim {
        return Err(Error::DimMismatch(format!(
            "frames have dimension {}, texts {dim}",
            video.frames.ncols()
        )));
    }
    let sims = ctx.t_hat_units.dot(&video.units.t());
    let weights = coarse_weights_from_sims(&sims, p.coarse_form);
    let a_coarse = weights.sum_axis(Axis(0));
    let o_coarse = weighted_frames(video.frames, a_coarse.view());
    let (o, coarse_cache, fine_cache) = match p.variant {
        Variant::Full => {
            let a_fine = fine_from_units(&ctx.sub_units, &video.units);
            let o_fine = weighted_frames(video.frames, a_fine.view());
            let (oc, cc) = p.fusion.coarse.forward_cached(o_coarse.view())?;
            let (of, fc) = p.fusion.fine.forward_cached(o_fine.view())?;
            (oc + of, Some(cc), Some(fc))
        }
        Variant::CoarseOnly => {
            let (oc, cc) = p.fusion.coarse.forward_cached(o_coarse.view())?;
            (oc, Some(cc), None)
        }
        Variant::FineOnly => {
            let a_fine = fine_from_units(&ctx.sub_units, &video.units);
            let o_fine = weighted_frames(video.frames, a_fine.view());
            let (of, fc) = p.fusion.fine.forward_cached(o_fine.view())?;
            (of, None, Some(fc))
        }
        Variant::MeanPool => {
            let mean = mean_pool_baseline(video.frames)?;
            let (oc, cc) = p.fusion.coarse.forward_cached(mean.view())?;
            (oc, Some(cc), None)
        }
    };
    let o_norm = o.dot(&o).sqrt();
    if o_norm == 0.0 || !o_norm.is_finite() {
        return Err(Error::ZeroVector);
    }
    let cos = ctx.summary_unit.dot(&o) / o_norm;
    Ok(PairCache {
        sims,
        weights,
        coarse_cache,
        fine_cache,
        o,
        o_norm,
        cos,
    })
}

/// Per-video gradient contribution: FFN gradients and, per class, the
/// gradient with respect to the unit-normalized augmented token rows.
struct VideoGrad {
    grads: GradientSet,
    token_units: Vec<Option<Array2<f64>>>,
}

fn backward_video(
    video: &PreparedVideo,
    pairs: &[PairCache],
    dy: ndarray::ArrayView1<f64>,
    states: &[ClassState],
    p: &ModelParams,
    zero: &GradientSet,
) -> VideoGrad {
    let mut grads = zero.clone();
    let mut token_units = Vec::with_capacity(pairs.len());
    for (c, pair) in pairs.iter().enumerate() {
        let ctx = &states[c].ctx;
        // d cos(t, o) / d o = (t_unit - cos * o_unit) / |o|
        let scale = dy[c] / p.tau / pair.o_norm;
        let o_unit = &pair.o / pair.o_norm;
        let d_o = (&ctx.summary_unit - &(o_unit * pair.cos)) * scale;

        if let Some(fc) = &pair.fine_cache {
            p.fusion
                .fine
                .backward(fc, d_o.view(), &mut grads.fusion.fine);
        }
        let d_coarse_in = pair.coarse_cache.as_ref().map(|cc| {
            p.fusion
                .coarse
                .backward(cc, d_o.view(), &mut grads.fusion.coarse)
        });

        if !p.variant.uses_coarse() {
            token_units.push(None);
            continue;
        }
        let d_o_coarse = d_coarse_in.expect("coarse branch active");
        // o_coarse = sum_l a_l v_l
        let d_a = video.frames.dot(&d_o_coarse);
        let d_sims = match p.coarse_form {
            CoarseForm::Softmax => {
                let w = &pair.weights;
                let mut d = Array2::zeros(w.raw_dim());
                for (i, wrow) in w.rows().into_iter().enumerate() {
                    let inner = wrow.dot(&d_a);
                    for l in 0..wrow.len() {
                        d[[i, l]] = wrow[l] * (d_a[l] - inner);
                    }
                }
                d
            }
            CoarseForm::Literal => {
                let sims = &pair.sims;
                let mut d = Array2::zeros(sims.raw_dim());
                for (i, srow) in sims.rows().into_iter().enumerate() {
                    let z = srow.sum();
                    let e = srow.mapv(f64::exp);
                    let inner = e.dot(&d_a);
                    for l in 0..srow.len() {
                        d[[i, l]] = d_a[l] * e[l] / z - inner / (z * z);
                    }
                }
                d
            }
        };
        // sims = T_hat_unit . V_unit^T
        token_units.push(Some(d_sims.dot(&video.units)));
    }
    VideoGrad { grads, token_units }
}

/// Backward through `attend` and the three projections, accumulating into `g`.
fn attention_backward(
    d_t_hat: &Array2<f64>,
    global_tokens: &Array2<f64>,
    cache: &AugmentCache,
    heads: usize,
    g: &mut GradientSet,
) {
    let dim = d_t_hat.ncols();
    let hd = dim / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut d_q = Array2::zeros(cache.q.raw_dim());
    let mut d_k = Array2::zeros(cache.k.raw_dim());
    let mut d_v = Array2::zeros(cache.v.raw_dim());
    for (h, a) in cache.weights.iter().enumerate() {
        let cols = s![.., h * hd..(h + 1) * hd];
        let d_h = d_t_hat.slice(cols);
        let d_a = d_h.dot(&cache.v.slice(cols).t());
        d_v.slice_mut(cols).assign(&a.t().dot(&d_h));
        let mut d_z = d_a.clone();
        for ((mut dz_row, a_row), da_row) in
            d_z.rows_mut().into_iter().zip(a.rows()).zip(d_a.rows())
        {
            let inner = a_row.dot(&da_row);
            dz_row.zip_mut_with(&a_row, |dz, &w| *dz = w * (*dz - inner));
        }
        d_q.slice_mut(cols)
            .assign(&(d_z.dot(&cache.k.slice(cols)) * scale));
        d_k.slice_mut(cols)
            .assign(&(d_z.t().dot(&cache.q.slice(cols)) * scale));
    }
    g.attention.wq += &global_tokens.t().dot(&d_q);
    g.attention.wk += &cache.subtexts.t().dot(&d_k);
    g.attention.wv += &cache.subtexts.t().dot(&d_v);
}

/// Logits for a batch against every class, `cos(t_c, o_{b,c}) / tau`.
pub fn compute_logits(
    batch: &Batch,
    classes: &[ClassTextBundle],
    p: &ModelParams,
) -> Result<LogitMatrix> {
    batch.check(classes.len())?;
    let scorer = crate::alignment::Scorer::new(classes, p)?;
    let rows = batch
        .videos
        .par_iter()
        .map(|v| scorer.scores(v.frames.view()))
        .collect::<Result<Vec<_>>>()?;
    let mut y = Array2::zeros((rows.len(), classes.len()));
    for (b, row) in rows.iter().enumerate() {
        for (c, s) in row.iter().enumerate() {
            y[[b, c]] = s / p.tau;
        }
    }
    Ok(LogitMatrix { y })
}

/// Loss of a batch via the plain forward path (no caches).
pub fn forward_loss(
    batch: &Batch,
    classes: &[ClassTextBundle],
    p: &ModelParams,
) -> Result<LossBreakdown> {
    let y = compute_logits(batch, classes, p)?;
    Ok(loss_breakdown(&y.y, &batch.labels(), p.lambda))
}

/// Total loss and exact gradients for every learnable tensor.
pub fn backward(
    batch: &Batch,
    classes: &[ClassTextBundle],
    p: &ModelParams,
) -> Result<BackwardOutput> {
    batch.check(classes.len())?;
    let states = class_states(classes, p)?;
    let labels = batch.labels();

    let forward = batch
        .videos
        .par_iter()
        .map(|v| {
            let video = PreparedVideo::new(v.frames.view())?;
            let pairs = states
                .iter()
                .map(|st| forward_pair(&video, &st.ctx, p))
                .collect::<Result<Vec<_>>>()?;
            Ok((video, pairs))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut y = Array2::zeros((batch.videos.len(), classes.len()));
    for (b, (_, pairs)) in forward.iter().enumerate() {
        for (c, pair) in pairs.iter().enumerate() {
            y[[b, c]] = pair.cos / p.tau;
        }
    }
    let (loss, dy) = loss_and_logit_grad(&y, &labels, p.lambda);

    let zero = GradientSet::zeros_like(p);
    let per_video: Vec<VideoGrad> = forward
        .par_iter()
        .enumerate()
        .map(|(b, (video, pairs))| backward_video(video, pairs, dy.row(b), &states, p, &zero))
        .collect();

    // ordered reduction keeps results independent of the worker count
    let mut grads = zero.clone();
    let mut token_units: Vec<Option<Array2<f64>>> = vec![None; classes.len()];
    for vg in &per_video {
        grads.add_assign(&vg.grads);
        for (acc, contrib) in token_units.iter_mut().zip(&vg.token_units) {
            if let Some(d) = contrib {
                match acc {
                    Some(a) => *a += d,
                    None => *acc = Some(d.clone()),
                }
            }
        }
    }

    for (c, d_units) in token_units.iter().enumerate() {
        let Some(d_units) = d_units else { continue };
        let st = &states[c];
        // unit = x / |x|  =>  dx = (d_unit - <d_unit, unit> unit) / |x|
        let mut d_t_hat = Array2::zeros(d_units.raw_dim());
        for (i, (du, u)) in d_units
            .rows()
            .into_iter()
            .zip(st.ctx.t_hat_units.rows())
            .enumerate()
        {
            let x = st.ctx.t_hat.row(i);
            let norm = x.dot(&x).sqrt();
            let inner = du.dot(&u);
            let row = (&du - &(&u * inner)) / norm;
            d_t_hat.row_mut(i).assign(&row);
        }
        attention_backward(
            &d_t_hat,
            &classes[c].global.tokens,
            &st.cache,
            p.attention.heads,
            &mut grads,
        );
    }

    for (name, t) in grads.tensors() {
        if t.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(name));
        }
    }
    Ok(BackwardOutput {
        loss,
        grads,
        logits: LogitMatrix { y },
    })
}
