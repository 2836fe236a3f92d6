//! Multi-granularity video embedding.
//!
//! For a video with frame embeddings `v_1..v_L` and a candidate class `c`:
//!
//! 1. The global token matrix `T` attends over the concatenated sub-text
//!    tokens, `T_hat = Attention(T Wq, S Wk, S Wv) + T`.
//! 2. Coarse weights: for every row of `T_hat` a softmax over frames of the
//!    cosine similarities, summed over rows. `o_coarse = sum_l a_l v_l`.
//! 3. Fine weights: a softmax over frames of the best mean token similarity
//!    among sub-texts. `o_fine = sum_l a_l v_l`.
//! 4. `o = FFN_coarse(o_coarse) + FFN_fine(o_fine)`, scored against the
//!    class summary embedding by cosine similarity.
//!
//! The embedding is class-conditional: every candidate class produces its own `o`.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::embedding_store::{ClassTextBundle, FrameEmbeddings, TextTokens};
use crate::error::{Error, Result};
use crate::subtext_metrics::cosine_sim;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    /// Number of attention heads; must divide the embedding dimension.
    pub heads: usize,
}

impl AttentionParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            wq: Array2::zeros((dim, dim)),
            wk: Array2::zeros((dim, dim)),
            wv: Array2::zeros((dim, dim)),
            heads: 1,
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Affine layer `y = W x + b` with `W` stored as out x in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Array2::zeros((out, inp)),
            bias: Array1::zeros(out),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
        }
    }
}

/// A single affine map, or two affine maps with an activation in between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ffn {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

pub(crate) struct FfnCache {
    /// Input to each layer.
    inputs: Vec<Array1<f64>>,
    /// Pre-activation output of every layer except the last.
    preacts: Vec<Array1<f64>>,
}

impl Ffn {
    pub fn identity(dim: usize) -> Self {
        Self {
            layers: vec![Dense::identity(dim)],
            activation: Activation::default(),
        }
    }

    pub fn affine(weight: Array2<f64>, bias: Array1<f64>) -> Self {
        Self {
            layers: vec![Dense { weight, bias }],
            activation: Activation::default(),
        }
    }

    /// Same shapes, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
            activation: self.activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub(crate) fn forward_cached(&self, x: ArrayView1<f64>) -> Result<(Array1<f64>, FfnCache)> {
        let mut cache = FfnCache {
            inputs: Vec::with_capacity(self.layers.len()),
            preacts: Vec::new(),
        };
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.weight.ncols() != h.len() {
                return Err(Error::DimMismatch(format!(
                    "ffn layer {i} expects {} inputs, got {}",
                    layer.weight.ncols(),
                    h.len()
                )));
            }
            let z = layer.weight.dot(&h) + &layer.bias;
            cache.inputs.push(h);
            if i + 1 < self.layers.len() {
                h = z.mapv(|v| self.activation.apply(v));
                cache.preacts.push(z);
            } else {
                h = z;
            }
        }
        Ok((h, cache))
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub(crate) fn backward(
        &self,
        cache: &FfnCache,
        dout: ArrayView1<f64>,
        grads: &mut Ffn,
    ) -> Array1<f64> {
        let mut d = dout.to_owned();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let g = &mut grads.layers[i];
            let input = &cache.inputs[i];
            for r in 0..d.len() {
                let dr = d[r];
                g.bias[r] += dr;
                if dr != 0.0 {
                    g.weight.row_mut(r).scaled_add(dr, input);
                }
            }
            let mut dx = layer.weight.t().dot(&d);
            if i > 0 {
                let z = &cache.preacts[i - 1];
                dx.zip_mut_with(z, |g, &z| *g *= self.activation.derivative(z));
            }
            d = dx;
        }
        d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub coarse: Ffn,
    pub fine: Ffn,
}

impl FusionParams {
    pub fn identity(dim: usize) -> Self {
        Self {
            coarse: Ffn::identity(dim),
            fine: Ffn::identity(dim),
        }
    }
}

/// How coarse frame weights are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CoarseForm {
    /// Per-token softmax over frames, summed over tokens.
    #[default]
    Softmax,
    /// `exp(sim) / sum(sim)`, exponential in the numerator only.
    Literal,
}

/// Which branches build the fused video embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// `FFN_coarse(mean of frames)`.
    #[serde(rename = "baseline")]
    MeanPool,
    #[serde(rename = "coarse")]
    CoarseOnly,
    #[serde(rename = "fine")]
    FineOnly,
    #[default]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::MeanPool,
        Variant::CoarseOnly,
        Variant::FineOnly,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::MeanPool => "baseline",
            Variant::CoarseOnly => "coarse",
            Variant::FineOnly => "fine",
            Variant::Full => "full",
        }
    }

    pub fn uses_coarse(self) -> bool {
        matches!(self, Variant::CoarseOnly | Variant::Full)
    }

    pub fn uses_fine(self) -> bool {
        matches!(self, Variant::FineOnly | Variant::Full)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "baseline" | "mean-pool" => Ok(Variant::MeanPool),
            "coarse" => Ok(Variant::CoarseOnly),
            "fine" => Ok(Variant::FineOnly),
            "full" => Ok(Variant::Full),
            other => Err(format!("unknown variant {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub attention: AttentionParams,
    pub fusion: FusionParams,
    /// Logit temperature used by the training losses.
    pub tau: f64,
    /// Weight of the video-to-text loss.
    pub lambda: f64,
    pub variant: Variant,
    pub coarse_form: CoarseForm,
}

/// Shape and initialization options for fresh parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub heads: usize,
    /// Optional hidden width for both feed-forward heads.
    pub hidden: Option<usize>,
    pub activation: Activation,
    /// Standard deviation of the noise added to identity FFN weights.
    pub ffn_noise: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            heads: 1,
            hidden: None,
            activation: Activation::Relu,
            ffn_noise: 0.01,
        }
    }
}

pub const DEFAULT_TAU: f64 = 0.05;
pub const DEFAULT_LAMBDA: f64 = 1.0;

impl ModelParams {
    /// Zero attention projections and exact identity FFNs.
    pub fn identity(dim: usize) -> Self {
        Self {
            attention: AttentionParams::zeros(dim),
            fusion: FusionParams::identity(dim),
            tau: DEFAULT_TAU,
            lambda: DEFAULT_LAMBDA,
            variant: Variant::Full,
            coarse_form: CoarseForm::Softmax,
        }
    }

    /// Attention projections uniform in `±1/sqrt(D)`; affine FFNs start at
    /// identity plus Gaussian noise with zero bias. Hidden-layer FFNs use
    /// uniform fan-in initialization instead.
    pub fn init<R: Rng + ?Sized>(dim: usize, cfg: &InitConfig, rng: &mut R) -> Result<Self> {
        if dim == 0 {
            return Err(Error::DimMismatch("dimension is zero".into()));
        }
        if cfg.heads == 0 || !dim.is_multiple_of(cfg.heads) {
            return Err(Error::DimMismatch(format!(
                "{} heads do not divide dimension {dim}",
                cfg.heads
            )));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let uni = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let draw = |rows: usize, cols: usize, rng: &mut R| {
            Array2::from_shape_simple_fn((rows, cols), || uni.sample(rng))
        };
        let wq = draw(dim, dim, rng);
        let wk = draw(dim, dim, rng);
        let wv = draw(dim, dim, rng);
        let attention = AttentionParams {
            wq,
            wk,
            wv,
            heads: cfg.heads,
        };
        let noise = Normal::new(0.0, cfg.ffn_noise.max(0.0)).expect("finite std");
        let make_ffn = |rng: &mut R| match cfg.hidden {
            None => {
                let mut w = Array2::eye(dim);
                w.mapv_inplace(|x| x + noise.sample(rng));
                Ffn::affine(w, Array1::zeros(dim))
            }
            Some(h) => {
                let b1 = 1.0 / (dim as f64).sqrt();
                let b2 = 1.0 / (h as f64).sqrt();
                let u1 = Uniform::new_inclusive(-b1, b1).expect("finite bound");
                let u2 = Uniform::new_inclusive(-b2, b2).expect("finite bound");
                Ffn {
                    layers: vec![
                        Dense {
                            weight: Array2::from_shape_simple_fn((h, dim), || u1.sample(rng)),
                            bias: Array1::zeros(h),
                        },
                        Dense {
                            weight: Array2::from_shape_simple_fn((dim, h), || u2.sample(rng)),
                            bias: Array1::zeros(dim),
                        },
                    ],
                    activation: cfg.activation,
                }
            }
        };
        let coarse = make_ffn(rng);
        let fine = make_ffn(rng);
        Ok(Self {
            attention,
            fusion: FusionParams { coarse, fine },
            tau: DEFAULT_TAU,
            lambda: DEFAULT_LAMBDA,
            variant: Variant::Full,
            coarse_form: CoarseForm::Softmax,
        })
    }

    pub fn dim(&self) -> usize {
        self.attention.dim()
    }
}

/// Frame weights for one (video, class) pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImportanceProfile {
    pub coarse: Vec<f64>,
    pub fine: Vec<f64>,
}

// ---------------------------------------------------------------------------
// stages

fn check_cols(name: &str, m: &ArrayView2<f64>, dim: usize) -> Result<()> {
    if m.ncols() != dim {
        return Err(Error::DimMismatch(format!(
            "{name} has {} columns, expected {dim}",
            m.ncols()
        )));
    }
    Ok(())
}

/// Sum of `values` in ascending order, so the result does not depend on
/// the order they arrive in. Every reduction over frames goes through here.
pub(crate) fn order_free_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

/// Row-wise softmax in place, shifted by the row maximum.
pub(crate) fn softmax_rows(m: &mut Array2<f64>) {
    let mut buf = Vec::with_capacity(m.ncols());
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        buf.clear();
        buf.extend(row.iter());
        let sum = order_free_sum(&mut buf);
        row.mapv_inplace(|x| x / sum);
    }
}

pub(crate) fn softmax(v: &Array1<f64>) -> Array1<f64> {
    let max = v.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = v.mapv(|x| (x - max).exp());
    let sum = order_free_sum(&mut e.to_vec());
    e / sum
}

/// `sum_l a_l v_l`, reduced per coordinate with [`order_free_sum`].
pub(crate) fn weighted_frames(frames: ArrayView2<f64>, a: ArrayView1<f64>) -> Array1<f64> {
    let mut buf = vec![0.0; frames.nrows()];
    Array1::from_shape_fn(frames.ncols(), |d| {
        for (l, slot) in buf.iter_mut().enumerate() {
            *slot = a[l] * frames[[l, d]];
        }
        order_free_sum(&mut buf)
    })
}

/// Single-head scaled dot-product attention, `softmax(Q K^T / sqrt(D)) V`.
pub fn cross_attention(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    Ok(attend(q, k, v, 1)?.0)
}

/// Multi-head attention over column blocks. Returns the output and the
/// per-head attention weights (M x P each).
pub(crate) fn attend(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    heads: usize,
) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
    let dim = q.ncols();
    check_cols("keys", &k, dim)?;
    check_cols("values", &v, dim)?;
    if k.nrows() != v.nrows() {
        return Err(Error::DimMismatch(format!(
            "{} keys but {} values",
            k.nrows(),
            v.nrows()
        )));
    }
    if k.nrows() == 0 {
        return Err(Error::DimMismatch(
            "attention needs at least one key".into(),
        ));
    }
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::DimMismatch(format!(
            "{heads} heads do not divide dimension {dim}"
        )));
    }
    let hd = dim / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Array2::zeros((q.nrows(), dim));
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * hd..(h + 1) * hd];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut scores);
        out.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        weights.push(scores);
    }
    Ok((out, weights))
}

pub(crate) struct AugmentCache {
    /// Concatenated sub-text tokens, P x D.
    pub subtexts: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub weights: Vec<Array2<f64>>,
}

pub(crate) fn augment_cached(
    global: &TextTokens,
    subtexts: &[TextTokens],
    p: &AttentionParams,
) -> Result<(Array2<f64>, AugmentCache)> {
    if subtexts.is_empty() {
        return Err(Error::EmptySubtexts);
    }
    let dim = p.dim();
    check_cols("global tokens", &global.tokens.view(), dim)?;
    for s in subtexts {
        check_cols("sub-text tokens", &s.tokens.view(), dim)?;
    }
    let views: Vec<_> = subtexts.iter().map(|s| s.tokens.view()).collect();
    let stacked = concatenate(Axis(0), &views).expect("column counts checked");
    let q = global.tokens.dot(&p.wq);
    let k = stacked.dot(&p.wk);
    let v = stacked.dot(&p.wv);
    let (att, weights) = attend(q.view(), k.view(), v.view(), p.heads)?;
    let t_hat = att + &global.tokens;
    Ok((
        t_hat,
        AugmentCache {
            subtexts: stacked,
            q,
            k,
            v,
            weights,
        },
    ))
}

/// Global tokens augmented by attention over all sub-text tokens, plus a residual.
pub fn augment_global_text(
    global: &TextTokens,
    subtexts: &[TextTokens],
    p: &AttentionParams,
) -> Result<Array2<f64>> {
    Ok(augment_cached(global, subtexts, p)?.0)
}

/// Rows scaled to unit norm; errors on any zero row.
pub(crate) fn unit_rows(m: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms: Array1<f64> = m.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if norms.iter().any(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::ZeroVector);
    }
    let mut out = m.to_owned();
    for (mut row, n) in out.rows_mut().into_iter().zip(&norms) {
        row.mapv_inplace(|x| x / n);
    }
    Ok((out, norms))
}

/// Coarse weights from precomputed token-frame cosine similarities (M x L).
pub(crate) fn coarse_weights_from_sims(sims: &Array2<f64>, form: CoarseForm) -> Array2<f64> {
    match form {
        CoarseForm::Softmax => {
            let mut w = sims.clone();
            softmax_rows(&mut w);
            w
        }
        CoarseForm::Literal => {
            let mut w = sims.mapv(f64::exp);
            for (mut row, srow) in w.rows_mut().into_iter().zip(sims.rows()) {
                let z = order_free_sum(&mut srow.to_vec());
                row.mapv_inplace(|x| x / z);
            }
            w
        }
    }
}

pub fn coarse_importance(t_hat: ArrayView2<f64>, frames: ArrayView2<f64>) -> Result<Array1<f64>> {
    coarse_importance_with(t_hat, frames, CoarseForm::Softmax)
}

/// Per-frame coarse weights; sums to the number of rows of `t_hat` in softmax form.
pub fn coarse_importance_with(
    t_hat: ArrayView2<f64>,
    frames: ArrayView2<f64>,
    form: CoarseForm,
) -> Result<Array1<f64>> {
    check_cols("frames", &frames, t_hat.ncols())?;
    if frames.nrows() == 0 {
        return Err(Error::DimMismatch("video has no frames".into()));
    }
    let (tu, _) = unit_rows(t_hat)?;
    let (fu, _) = unit_rows(frames)?;
    let sims = tu.dot(&fu.t());
    Ok(coarse_weights_from_sims(&sims, form).sum_axis(Axis(0)))
}

/// `sum_l a_l v_l`.
pub fn coarse_embedding(frames: ArrayView2<f64>, a: ArrayView1<f64>) -> Result<Array1<f64>> {
    if frames.nrows() != a.len() {
        return Err(Error::DimMismatch(format!(
            "{} frames but {} weights",
            frames.nrows(),
            a.len()
        )));
    }
    Ok(weighted_frames(frames, a))
}

/// Per-frame fine weights: softmax over frames of `max_n mean_tokens cos(token, frame)`.
pub fn fine_importance(subtexts: &[TextTokens], frames: ArrayView2<f64>) -> Result<Array1<f64>> {
    if subtexts.is_empty() {
        return Err(Error::EmptySubtexts);
    }
    let dim = frames.ncols();
    for s in subtexts {
        check_cols("sub-text tokens", &s.tokens.view(), dim)?;
    }
    if frames.nrows() == 0 {
        return Err(Error::DimMismatch("video has no frames".into()));
    }
    let (fu, _) = unit_rows(frames)?;
    let units = subtexts
        .iter()
        .map(|s| Ok(unit_rows(s.tokens.view())?.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(fine_from_units(&units, &fu))
}

pub(crate) fn fine_from_units(sub_units: &[Array2<f64>], frame_units: &Array2<f64>) -> Array1<f64> {
    let mut best = Array1::from_elem(frame_units.nrows(), f64::NEG_INFINITY);
    for s in sub_units {
        let mean_sim = s
            .dot(&frame_units.t())
            .mean_axis(Axis(0))
            .expect("tokens nonempty");
        best.zip_mut_with(&mean_sim, |b, &m| *b = b.max(m));
    }
    softmax(&best)
}

pub fn fine_embedding(frames: ArrayView2<f64>, a: ArrayView1<f64>) -> Result<Array1<f64>> {
    coarse_embedding(frames, a)
}

/// `FFN_coarse(o_coarse) + FFN_fine(o_fine)`.
pub fn fuse(
    o_coarse: ArrayView1<f64>,
    o_fine: ArrayView1<f64>,
    p: &FusionParams,
) -> Result<Array1<f64>> {
    if o_coarse.len() != o_fine.len() {
        return Err(Error::DimMismatch(format!(
            "coarse length {} vs fine length {}",
            o_coarse.len(),
            o_fine.len()
        )));
    }
    Ok(p.coarse.forward(o_coarse)? + p.fine.forward(o_fine)?)
}

pub fn mean_pool_baseline(frames: ArrayView2<f64>) -> Result<Array1<f64>> {
    if frames.nrows() == 0 {
        return Err(Error::DimMismatch("video has no frames".into()));
    }
    let w = Array1::from_elem(frames.nrows(), 1.0 / frames.nrows() as f64);
    Ok(weighted_frames(frames, w.view()))
}

// ---------------------------------------------------------------------------
// composed pipeline

/// Everything about a class that does not depend on the video.
pub struct ClassContext {
    pub t_hat: Array2<f64>,
    pub(crate) t_hat_units: Array2<f64>,
    pub(crate) summary_unit: Array1<f64>,
    pub(crate) sub_units: Vec<Array2<f64>>,
}

impl ClassContext {
    pub fn new(bundle: &ClassTextBundle, p: &ModelParams) -> Result<Self> {
        let t_hat = augment_global_text(&bundle.global, &bundle.subtexts, &p.attention)?;
        Self::from_augmented(bundle, t_hat)
    }

    pub(crate) fn from_augmented(bundle: &ClassTextBundle, t_hat: Array2<f64>) -> Result<Self> {
        let (t_hat_units, _) = unit_rows(t_hat.view())?;
        let summary_unit = crate::embedding_store::l2_normalize(bundle.global.summary.view())?;
        let sub_units = bundle
            .subtexts
            .iter()
            .map(|s| Ok(unit_rows(s.tokens.view())?.0))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            t_hat,
            t_hat_units,
            summary_unit,
            sub_units,
        })
    }
}

/// Frames with their unit-normalized copy.
pub struct PreparedVideo<'a> {
    pub frames: ArrayView2<'a, f64>,
    pub(crate) units: Array2<f64>,
}

impl<'a> PreparedVideo<'a> {
    pub fn new(frames: ArrayView2<'a, f64>) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(Error::DimMismatch("video has no frames".into()));
        }
        let (units, _) = unit_rows(frames)?;
        Ok(Self { frames, units })
    }
}

/// Fused embedding of one video under one class.
pub struct ConditionedEmbedding {
    pub o: Array1<f64>,
    pub o_coarse: Array1<f64>,
    pub o_fine: Array1<f64>,
    pub profile: ImportanceProfile,
}

pub(crate) fn embed_in_context(
    video: &PreparedVideo,
    ctx: &ClassContext,
    p: &ModelParams,
) -> Result<ConditionedEmbedding> {
    let dim = ctx.t_hat.ncols();
    if video.frames.ncols() != dim {
        return Err(Error::DimMismatch(format!(
            "frames have dimension {}, texts {dim}",
            video.frames.ncols()
        )));
    }
    let sims = ctx.t_hat_units.dot(&video.units.t());
    let a_coarse = coarse_weights_from_sims(&sims, p.coarse_form).sum_axis(Axis(0));
    let a_fine = fine_from_units(&ctx.sub_units, &video.units);
    let o_coarse = weighted_frames(video.frames, a_coarse.view());
    let o_fine = weighted_frames(video.frames, a_fine.view());
    let o = match p.variant {
        Variant::Full => fuse(o_coarse.view(), o_fine.view(), &p.fusion)?,
        Variant::CoarseOnly => p.fusion.coarse.forward(o_coarse.view())?,
        Variant::FineOnly => p.fusion.fine.forward(o_fine.view())?,
        Variant::MeanPool => p
            .fusion
            .coarse
            .forward(mean_pool_baseline(video.frames)?.view())?,
    };
    Ok(ConditionedEmbedding {
        o,
        o_coarse,
        o_fine,
        profile: ImportanceProfile {
            coarse: a_coarse.to_vec(),
            fine: a_fine.to_vec(),
        },
    })
}

/// Fused embedding of `frames` conditioned on `bundle`'s texts.
pub fn video_embedding(
    frames: &FrameEmbeddings,
    bundle: &ClassTextBundle,
    p: &ModelParams,
) -> Result<(Array1<f64>, ImportanceProfile)> {
    let ctx = ClassContext::new(bundle, p)?;
    let video = PreparedVideo::new(frames.frames.view())?;
    let e = embed_in_context(&video, &ctx, p)?;
    Ok((e.o, e.profile))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Classification {
    pub scores: Vec<f64>,
    pub predicted: usize,
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Precomputed class contexts for scoring many videos with fixed parameters.
pub struct Scorer<'p> {
    params: &'p ModelParams,
    contexts: Vec<ClassContext>,
}

impl<'p> Scorer<'p> {
    pub fn new(classes: &[ClassTextBundle], params: &'p ModelParams) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::EmptyClassList);
        }
        let contexts = classes
            .iter()
            .enumerate()
            .map(|(c, b)| ClassContext::new(b, params).map_err(Error::in_class(c)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { params, contexts })
    }

    pub fn num_classes(&self) -> usize {
        self.contexts.len()
    }

    /// Cosine similarity between each class summary and the video embedding under that class.
    pub fn scores(&self, frames: ArrayView2<f64>) -> Result<Vec<f64>> {
        let video = PreparedVideo::new(frames)?;
        self.contexts
            .iter()
            .map(|ctx| {
                let e = embed_in_context(&video, ctx, self.params)?;
                cosine_sim(ctx.summary_unit.view(), e.o.view())
            })
            .collect()
    }

    pub fn profiles(&self, frames: ArrayView2<f64>) -> Result<Vec<ImportanceProfile>> {
        let video = PreparedVideo::new(frames)?;
        self.contexts
            .iter()
            .map(|ctx| Ok(embed_in_context(&video, ctx, self.params)?.profile))
            .collect()
    }

    pub fn classify(&self, frames: ArrayView2<f64>) -> Result<Classification> {
        let scores = self.scores(frames)?;
        let predicted = argmax(&scores);
        Ok(Classification { scores, predicted })
    }
}

/// Scores every candidate class with its own conditioned embedding.
pub fn classify(
    frames: &FrameEmbeddings,
    classes: &[ClassTextBundle],
    p: &ModelParams,
) -> Result<Classification> {
    Scorer::new(classes, p)?.classify(frames.frames.view())
}
