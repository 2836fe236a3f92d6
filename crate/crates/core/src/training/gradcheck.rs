//! Central finite-difference verification of analytic gradients.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::alignment::{InitConfig, ModelParams};
use crate::embedding_store::{ClassTextBundle, FrameEmbeddings, TextTokens};
use crate::error::{Error, Result};
use crate::training::backward::{backward, forward_loss, Batch};
use crate::training::gradients::{GradientSet, TensorSet};

/// A scalar function of the model parameters with an analytic gradient.
pub trait Objective {
    fn loss(&self, p: &ModelParams) -> Result<f64>;
    fn gradient(&self, p: &ModelParams) -> Result<GradientSet>;
}

/// The full pipeline loss on a fixed batch.
pub struct PipelineObjective<'a> {
    pub batch: Batch<'a>,
    pub classes: &'a [ClassTextBundle],
}

impl Objective for PipelineObjective<'_> {
    fn loss(&self, p: &ModelParams) -> Result<f64> {
        Ok(forward_loss(&self.batch, self.classes, p)?.total)
    }

    fn gradient(&self, p: &ModelParams) -> Result<GradientSet> {
        Ok(backward(&self.batch, self.classes, p)?.grads)
    }
}

/// `0.5 * sum_i w_i (x_i - c_i)^2` over every coordinate, with `w_i` and
/// `c_i` fixed pseudo-random functions of the coordinate index.
pub struct QuadraticObjective;

impl QuadraticObjective {
    fn coefficients(i: usize) -> (f64, f64) {
        let w = 0.5 + (i % 7) as f64 * 0.25;
        let c = -3.0 - ((i * 37) % 11) as f64 / 11.0;
        (w, c)
    }
}

impl Objective for QuadraticObjective {
    fn loss(&self, p: &ModelParams) -> Result<f64> {
        let mut total = 0.0;
        let mut i = 0;
        for (_, t) in p.tensors() {
            for &x in t {
                let (w, c) = Self::coefficients(i);
                total += 0.5 * w * (x - c) * (x - c);
                i += 1;
            }
        }
        Ok(total)
    }

    fn gradient(&self, p: &ModelParams) -> Result<GradientSet> {
        let mut g = GradientSet::zeros_like(p);
        let mut i = 0;
        for ((_, gt), (_, t)) in g.tensors_mut().into_iter().zip(p.tensors()) {
            for (gx, &x) in gt.iter_mut().zip(t) {
                let (w, c) = Self::coefficients(i);
                *gx = w * (x - c);
                i += 1;
            }
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub h: f64,
    /// Coordinates sampled per tensor (capped at its size); `None` checks all.
    pub per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            per_tensor: Some(40),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub tensors: Vec<TensorCheck>,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn grad_check<O: Objective>(
    obj: &O,
    p: &ModelParams,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if cfg.per_tensor == Some(0) {
        return Err(Error::EmptySample);
    }
    let analytic = obj.gradient(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = p.clone();
    let mut tensors = Vec::new();
    let mut coords_checked = 0;
    let mut worst: f64 = 0.0;

    let grads = analytic.tensors();
    for (t_idx, (name, g)) in grads.iter().enumerate() {
        let len = g.len();
        let picks: Vec<usize> = match cfg.per_tensor {
            Some(n) if n < len => {
                let mut v = sample(&mut rng, len, n).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        let mut tensor_worst: f64 = 0.0;
        for &i in &picks {
            let original = p.tensors()[t_idx].1[i];
            work.tensors_mut()[t_idx].1[i] = original + cfg.h;
            let up = obj.loss(&work)?;
            work.tensors_mut()[t_idx].1[i] = original - cfg.h;
            let down = obj.loss(&work)?;
            work.tensors_mut()[t_idx].1[i] = original;
            let numeric = (up - down) / (2.0 * cfg.h);
            tensor_worst = tensor_worst.max(relative_error(g[i], numeric));
        }
        coords_checked += picks.len();
        worst = worst.max(tensor_worst);
        tensors.push(TensorCheck {
            name: name.clone(),
            coords: picks.len(),
            max_rel_error: tensor_worst,
        });
    }
    if coords_checked == 0 {
        return Err(Error::EmptySample);
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        coords_checked,
        tensors,
    })
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal))
}

/// Small random problem used by the gradient check: `videos` per batch,
/// `classes` with `subtexts` each, `frames` per video, dimension `dim`.
#[derive(Debug, Clone)]
pub struct GradFixture {
    pub videos: Vec<FrameEmbeddings>,
    pub classes: Vec<ClassTextBundle>,
    pub params: ModelParams,
}

impl GradFixture {
    pub fn random(
        videos: usize,
        classes: usize,
        frames: usize,
        dim: usize,
        subtexts: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = 3;
        let text = |rng: &mut ChaCha8Rng| {
            TextTokens::new(
                gaussian(rng, tokens, dim),
                gaussian(rng, 1, dim).row(0).to_owned(),
            )
        };
        let bundles: Vec<ClassTextBundle> = (0..classes)
            .map(|c| ClassTextBundle {
                class_name: format!("class{c}"),
                global: text(&mut rng),
                subtexts: (0..subtexts).map(|_| text(&mut rng)).collect(),
            })
            .collect();
        let vids = (0..videos)
            .map(|b| {
                FrameEmbeddings::new(
                    format!("v{b}"),
                    gaussian(&mut rng, frames, dim),
                    b % classes,
                )
            })
            .collect();
        let init = InitConfig {
            ffn_noise: 0.1,
            ..InitConfig::default()
        };
        let params = ModelParams::init(dim, &init, &mut rng)?;
        Ok(Self {
            videos: vids,
            classes: bundles,
            params,
        })
    }

    /// The standard fixture: 4 videos, 3 classes, 6 frames, dimension 16, 3 sub-texts.
    pub fn standard(seed: u64) -> Result<Self> {
        Self::random(4, 3, 6, 16, 3, seed)
    }

    pub fn objective(&self) -> PipelineObjective<'_> {
        PipelineObjective {
            batch: Batch::new(self.videos.iter().collect()),
            classes: &self.classes,
        }
    }
}
