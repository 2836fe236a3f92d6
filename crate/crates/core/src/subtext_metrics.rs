//! Text-prompt perplexity (TPP) and sub-text set selection.
//!
//! For a class with global summary `t` and sub-text summaries `s_1..s_N`:
//!
//! ```text
//! sigma_n = (cos(t, s_n) + 1) / 2
//! delta_n = 1 - mean_{n' != n} (cos(s_n, s_n') + 1) / 2
//! TPP     = exp(-(1/N) * sum_n log(alpha(sigma_n) * beta(delta_n)))
//! ```
//!
//! Both scores are clamped to `[epsilon, 1]` before scaling.

use std::fmt;
use std::str::FromStr;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::embedding_store::{ClassTextBundle, EmbeddingDataset, SubtextCandidateSet, TextTokens};
use crate::error::{Error, Result};

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine_sim(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch(format!(
            "cosine of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Monotone map applied to sigma or delta before the log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Scaler {
    #[default]
    Identity,
    Power {
        p: f64,
    },
    /// `1 - x`, floored at epsilon so the log stays finite.
    OneMinus,
}

impl Scaler {
    fn apply(self, x: f64, epsilon: f64) -> f64 {
        match self {
            Scaler::Identity => x,
            Scaler::Power { p } => x.powf(p),
            Scaler::OneMinus => (1.0 - x).max(epsilon),
        }
    }
}

impl FromStr for Scaler {
    type Err = Error;

    /// Accepts `identity`, `one-minus` and `power:<p>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Scaler::Identity),
            "one-minus" => Ok(Scaler::OneMinus),
            _ => {
                let p = s
                    .strip_prefix("power:")
                    .and_then(|p| p.parse::<f64>().ok())
                    .ok_or_else(|| Error::BadScaler(s.to_string()))?;
                if !(p > 0.0 && p.is_finite()) {
                    return Err(Error::BadScaler(s.to_string()));
                }
                Ok(Scaler::Power { p })
            }
        }
    }
}

impl fmt::Display for Scaler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scaler::Identity => write!(f, "identity"),
            Scaler::Power { p } => write!(f, "power:{p}"),
            Scaler::OneMinus => write!(f, "one-minus"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TppConfig {
    pub alpha: Scaler,
    pub beta: Scaler,
    pub epsilon: f64,
}

impl Default for TppConfig {
    fn default() -> Self {
        Self {
            alpha: Scaler::Identity,
            beta: Scaler::Identity,
            epsilon: 1e-6,
        }
    }
}

impl TppConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::BadScaler(format!(
                "epsilon {} outside (0, 0.5)",
                self.epsilon
            )));
        }
        for s in [self.alpha, self.beta] {
            if let Scaler::Power { p } = s {
                if !(p > 0.0 && p.is_finite()) {
                    return Err(Error::BadScaler(s.to_string()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TppBreakdown {
    /// Unclamped per-sub-text similarity scores.
    pub sigma: Vec<f64>,
    /// Unclamped per-sub-text divergence scores.
    pub delta: Vec<f64>,
    pub tpp: f64,
}

pub fn sigma_score(t_summary: ArrayView1<f64>, s_summary: ArrayView1<f64>) -> Result<f64> {
    Ok((cosine_sim(t_summary, s_summary)? + 1.0) / 2.0)
}

pub fn delta_score(s_summaries: &[ArrayView1<f64>], n: usize) -> Result<f64> {
    let count = s_summaries.len();
    if count < 2 {
        return Err(Error::NeedTwoSubtexts(count));
    }
    let mut acc = 0.0;
    for (m, other) in s_summaries.iter().enumerate() {
        if m != n {
            acc += (cosine_sim(s_summaries[n], *other)? + 1.0) / 2.0;
        }
    }
    Ok(1.0 - acc / (count - 1) as f64)
}

fn tpp_from_summaries(
    global: ArrayView1<f64>,
    subtexts: &[ArrayView1<f64>],
    cfg: &TppConfig,
) -> Result<TppBreakdown> {
    cfg.check()?;
    let n = subtexts.len();
    if n < 2 {
        return Err(Error::NeedTwoSubtexts(n));
    }
    let sigma = subtexts
        .iter()
        .map(|s| sigma_score(global, *s))
        .collect::<Result<Vec<_>>>()?;
    let delta = (0..n)
        .map(|i| delta_score(subtexts, i))
        .collect::<Result<Vec<_>>>()?;
    let clamp = |x: f64| x.clamp(cfg.epsilon, 1.0);
    let mean_log = sigma
        .iter()
        .zip(&delta)
        .map(|(&s, &d)| {
            (cfg.alpha.apply(clamp(s), cfg.epsilon) * cfg.beta.apply(clamp(d), cfg.epsilon)).ln()
        })
        .sum::<f64>()
        / n as f64;
    Ok(TppBreakdown {
        sigma,
        delta,
        tpp: (-mean_log).exp(),
    })
}

/// TPP of a class's own sub-text set.
pub fn tpp_score(bundle: &ClassTextBundle, cfg: &TppConfig) -> Result<TppBreakdown> {
    tpp_of_group(&bundle.global, &bundle.subtexts, cfg)
}

pub fn tpp_of_group(
    global: &TextTokens,
    group: &[TextTokens],
    cfg: &TppConfig,
) -> Result<TppBreakdown> {
    let subs: Vec<ArrayView1<f64>> = group.iter().map(|s| s.summary.view()).collect();
    tpp_from_summaries(global.summary.view(), &subs, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubtextSelection {
    pub chosen: usize,
    pub scores: Vec<TppBreakdown>,
}

/// Picks the candidate group with the highest TPP; ties go to the lowest index.
pub fn select_subtext_set(
    candidates: &SubtextCandidateSet,
    global: &TextTokens,
    cfg: &TppConfig,
) -> Result<SubtextSelection> {
    if candidates.groups.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let scores = candidates
        .groups
        .iter()
        .map(|g| tpp_of_group(global, g, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut chosen = 0;
    for (i, s) in scores.iter().enumerate() {
        if s.tpp > scores[chosen].tpp {
            chosen = i;
        }
    }
    Ok(SubtextSelection { chosen, scores })
}

/// Mean TPP over all classes of a dataset.
pub fn tpp_dataset_average(ds: &EmbeddingDataset, cfg: &TppConfig) -> Result<f64> {
    if ds.classes.is_empty() {
        return Err(Error::EmptyClassList);
    }
    let mut total = 0.0;
    for (c, class) in ds.classes.iter().enumerate() {
        total += tpp_score(class, cfg).map_err(Error::in_class(c))?.tpp;
    }
    Ok(total / ds.classes.len() as f64)
}
