//! Planted synthetic datasets.
//!
//! Class semantics live in a random subspace of dimension `semantic_dim`.
//! Each class `c` has a unit core direction `g_c` in that subspace; the first
//! `semantic_dim` cores are orthonormal and any further ones are random unit
//! vectors of the subspace, so unseen classes are built from the same
//! semantics as seen ones. Everything else lives in the orthogonal
//! complement.
//!
//! A class owns `A` atomic actions. Unique atomics have prototype
//! `normalize(kappa * g_c + q)` with `q` a random unit vector of the
//! complement. The first `round(rho * A)` atomic slots of a class are instead
//! shared with a neighbouring class on a ring and lie wholly in the
//! complement, so they look the same to both classes and carry no class
//! semantics.
//!
//! A video is a random ordering of its class's atomic segments plus one idle
//! segment along a per-video random direction of the complement.
//! Segment lengths come from a Dirichlet draw rounded to whole frames. Each
//! frame is its segment's prototype plus isotropic Gaussian noise of expected
//! norm `noise`. The global prompt tokens and summary are `g_c` plus noise and
//! each sub-text is its atomic prototype plus noise.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding_store::{
    round_to_storage, ClassTextBundle, EmbeddingDataset, FrameEmbeddings, SubtextCandidateSet,
    TextTokens,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    /// Atomic actions per class.
    pub atomics: usize,
    /// Fraction of each class's atomics shared with a neighbouring class.
    pub shared_fraction: f64,
    pub frames: usize,
    pub dim: usize,
    /// Dimension of the subspace holding the class cores; below `dim`.
    pub semantic_dim: usize,
    /// Dirichlet concentration of atomic segment lengths; small values give
    /// very uneven durations.
    pub concentration: f64,
    /// Dirichlet concentration of the idle segment; zero disables it.
    pub idle_concentration: f64,
    /// Expected norm of the per-frame noise.
    pub noise: f64,
    /// Text noise relative to `noise`.
    pub text_noise_scale: f64,
    /// Weight of the class core inside unique atomic prototypes.
    pub core_weight: f64,
    pub global_tokens: usize,
    pub subtext_tokens: usize,
    pub videos_per_class: usize,
    /// Every class uses the same core direction.
    pub identical_globals: bool,
    /// Candidate sub-text groups per class; group `g` of `G` replaces
    /// `round(g * A / (G - 1))` sub-texts with distractors.
    pub candidate_groups: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            atomics: 4,
            shared_fraction: 0.5,
            frames: 8,
            dim: 32,
            semantic_dim: 16,
            concentration: 1.0,
            idle_concentration: 1.0,
            noise: 1.0,
            text_noise_scale: 0.5,
            core_weight: 1.0,
            global_tokens: 3,
            subtext_tokens: 4,
            videos_per_class: 50,
            identical_globals: false,
            candidate_groups: 0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        for (name, v) in [
            ("classes", self.classes),
            ("atomics", self.atomics),
            ("frames", self.frames),
            ("dim", self.dim),
            ("semantic_dim", self.semantic_dim),
            ("global_tokens", self.global_tokens),
            ("subtext_tokens", self.subtext_tokens),
            ("videos_per_class", self.videos_per_class),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return bad(format!(
                "shared_fraction {} outside [0, 1]",
                self.shared_fraction
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!(
                "noise {} must be finite and non-negative",
                self.noise
            ));
        }
        if !(self.text_noise_scale >= 0.0 && self.text_noise_scale.is_finite()) {
            return bad("text_noise_scale must be finite and non-negative".into());
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return bad("concentration must be positive".into());
        }
        if !(self.idle_concentration >= 0.0 && self.idle_concentration.is_finite()) {
            return bad("idle_concentration must be non-negative".into());
        }
        if !(self.core_weight > 0.0 && self.core_weight.is_finite()) {
            return bad("core_weight must be positive".into());
        }
        if self.semantic_dim >= self.dim {
            return bad(format!(
                "semantic_dim {} must be below dim {}",
                self.semantic_dim, self.dim
            ));
        }
        if self.candidate_groups == 1 {
            return bad("candidate_groups must be 0 or at least 2".into());
        }
        Ok(())
    }

    pub fn shared_slots(&self) -> usize {
        (self.shared_fraction * self.atomics as f64).round() as usize
    }
}

/// Rounds `weights` (summing to 1) to integer counts summing to `total`:
/// floors first, then hands the remainder to the largest fractional parts,
/// lower index first on ties.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let scaled: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = scaled.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = scaled[a] - scaled[a].floor();
        let fb = scaled[b] - scaled[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(dim, || rng.sample::<f64, _>(StandardNormal))
}

fn normalized(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

/// Random unit vector orthogonal to the orthonormal rows of `basis`.
fn orthogonal_unit(rng: &mut ChaCha8Rng, basis: &[Array1<f64>], dim: usize) -> Array1<f64> {
    loop {
        let mut v = gaussian(rng, dim);
        for b in basis {
            let proj = b.dot(&v);
            v.scaled_add(-proj, b);
        }
        let n = v.dot(&v).sqrt();
        if n > 1e-6 {
            return v / n;
        }
    }
}

fn dirichlet(rng: &mut ChaCha8Rng, alpha: &[f64]) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = alpha
            .iter()
            .map(|&a| {
                if a > 0.0 {
                    Gamma::new(a, 1.0).expect("positive shape").sample(rng)
                } else {
                    0.0
                }
            })
            .collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return draws.into_iter().map(|d| d / sum).collect();
        }
    }
}

fn noisy_tokens(rng: &mut ChaCha8Rng, base: &Array1<f64>, count: usize, scale: f64) -> TextTokens {
    let dim = base.len();
    let per_coord = scale / (dim as f64).sqrt();
    let mut tokens = Array2::zeros((count, dim));
    for mut row in tokens.rows_mut() {
        row.assign(&(base + &(gaussian(rng, dim) * per_coord)));
    }
    let summary = base + &(gaussian(rng, dim) * per_coord);
    TextTokens::new(tokens, summary)
}

struct Prototypes {
    /// Orthonormal basis of the semantic subspace.
    semantic: Vec<Array1<f64>>,
    cores: Vec<Array1<f64>>,
    /// `atomics[c][a]`.
    atomics: Vec<Vec<Array1<f64>>>,
}

fn prototypes(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Prototypes {
    let dim = cfg.dim;
    let mut basis: Vec<Array1<f64>> = Vec::new();
    for _ in 0..cfg.semantic_dim {
        let v = orthogonal_unit(rng, &basis, dim);
        basis.push(v);
    }
    let core_count = if cfg.identical_globals {
        1
    } else {
        cfg.classes
    };
    let mut cores: Vec<Array1<f64>> = (0..core_count)
        .map(|c| match basis.get(c) {
            Some(b) => b.clone(),
            None => {
                let mut v = Array1::zeros(dim);
                for b in &basis {
                    v.scaled_add(rng.sample::<f64, _>(StandardNormal), b);
                }
                normalized(v)
            }
        })
        .collect();
    while cores.len() < cfg.classes {
        cores.push(cores[0].clone());
    }

    let shared = cfg.shared_slots();
    // ring[c][j] is shared between class c and class c + j + 1
    let pairs = shared.div_ceil(2);
    let ring: Vec<Vec<Array1<f64>>> = (0..cfg.classes)
        .map(|_| {
            (0..pairs)
                .map(|_| orthogonal_unit(rng, &basis, dim))
                .collect()
        })
        .collect();

    let c_count = cfg.classes;
    let atomics = (0..c_count)
        .map(|c| {
            let mut slots = Vec::with_capacity(cfg.atomics);
            for j in 0..pairs {
                slots.push(ring[c][j].clone());
                let partner = (c + c_count * (j + 1) - (j + 1)) % c_count;
                slots.push(ring[partner][j].clone());
            }
            slots.truncate(shared);
            while slots.len() < cfg.atomics {
                let q = orthogonal_unit(rng, &basis, dim);
                slots.push(normalized(&cores[c] * cfg.core_weight + q));
            }
            slots
        })
        .collect();
    Prototypes {
        semantic: basis,
        cores,
        atomics,
    }
}

/// One video's segment plan: `(segment, frames)` in temporal order, where a
/// segment index equal to the atomic count means the idle segment.
pub fn segment_plan(
    rng: &mut ChaCha8Rng,
    atomics: usize,
    frames: usize,
    concentration: f64,
    idle_concentration: f64,
) -> Vec<(usize, usize)> {
    let mut alpha = vec![concentration; atomics];
    alpha.push(idle_concentration);
    let w = dirichlet(rng, &alpha);
    let mut counts = largest_remainder(&w, frames);
    // keep at least one atomic frame
    if counts[atomics] == frames {
        counts[atomics] -= 1;
        let best = (0..atomics)
            .max_by(|&a, &b| w[a].total_cmp(&w[b]).then(b.cmp(&a)))
            .expect("at least one atomic");
        counts[best] += 1;
    }
    let mut order: Vec<usize> = (0..=atomics).collect();
    order.shuffle(rng);
    order
        .into_iter()
        .filter(|&s| counts[s] > 0)
        .map(|s| (s, counts[s]))
        .collect()
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<EmbeddingDataset> {
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let protos = prototypes(cfg, &mut rng);
    let text_noise = cfg.noise * cfg.text_noise_scale;

    let mut classes = Vec::with_capacity(cfg.classes);
    for c in 0..cfg.classes {
        let global = noisy_tokens(&mut rng, &protos.cores[c], cfg.global_tokens, text_noise);
        let subtexts = protos.atomics[c]
            .iter()
            .map(|p| noisy_tokens(&mut rng, p, cfg.subtext_tokens, text_noise))
            .collect();
        classes.push(ClassTextBundle {
            class_name: format!("class{c:03}"),
            global,
            subtexts,
        });
    }

    let core_basis = &protos.semantic;
    let per_coord = cfg.noise / (cfg.dim as f64).sqrt();
    let mut videos = Vec::with_capacity(cfg.classes * cfg.videos_per_class);
    for c in 0..cfg.classes {
        for i in 0..cfg.videos_per_class {
            let idle = orthogonal_unit(&mut rng, core_basis, cfg.dim);
            let plan = segment_plan(
                &mut rng,
                cfg.atomics,
                cfg.frames,
                cfg.concentration,
                cfg.idle_concentration,
            );
            let mut frames = Array2::zeros((cfg.frames, cfg.dim));
            let mut l = 0;
            for (seg, len) in plan {
                let proto = if seg == cfg.atomics {
                    &idle
                } else {
                    &protos.atomics[c][seg]
                };
                for _ in 0..len {
                    let f = proto + &(gaussian(&mut rng, cfg.dim) * per_coord);
                    frames.row_mut(l).assign(&f);
                    l += 1;
                }
            }
            videos.push(FrameEmbeddings::new(format!("c{c:03}_v{i:04}"), frames, c));
        }
    }

    let mut ds = EmbeddingDataset::new(cfg.dim, videos, classes);
    if cfg.candidate_groups >= 2 {
        let g_count = cfg.candidate_groups;
        for c in 0..cfg.classes {
            let mut groups = Vec::with_capacity(g_count);
            for g in 0..g_count {
                let replaced = ((g * cfg.atomics) as f64 / (g_count - 1) as f64).round() as usize;
                let group = (0..cfg.atomics)
                    .map(|a| {
                        if a < replaced {
                            let d = orthogonal_unit(&mut rng, core_basis, cfg.dim);
                            noisy_tokens(&mut rng, &d, cfg.subtext_tokens, text_noise)
                        } else {
                            noisy_tokens(
                                &mut rng,
                                &protos.atomics[c][a],
                                cfg.subtext_tokens,
                                text_noise,
                            )
                        }
                    })
                    .collect();
                groups.push(group);
            }
            ds.candidates.push(SubtextCandidateSet {
                class_id: c,
                groups,
            });
        }
    }
    Ok(round_to_storage(&ds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding_store::validate;

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(largest_remainder(&[0.5, 0.5], 8), vec![4, 4]);
        assert_eq!(largest_remainder(&[1.0 / 3.0; 3], 8), vec![3, 3, 2]);
        assert_eq!(largest_remainder(&[0.05, 0.9, 0.05], 8), vec![1, 7, 0]);
        assert_eq!(
            largest_remainder(&[0.1, 0.2, 0.7], 10)
                .iter()
                .sum::<usize>(),
            10
        );
    }

    #[test]
    fn durations_sum_to_frame_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for conc in [0.05, 0.5, 1.0, 10.0] {
            for _ in 0..200 {
                let plan = segment_plan(&mut rng, 4, 8, conc, conc);
                assert_eq!(plan.iter().map(|p| p.1).sum::<usize>(), 8);
                assert!(plan.iter().any(|p| p.0 < 4));
            }
        }
    }

    #[test]
    fn generated_dataset_is_valid_and_deterministic() {
        let cfg = SyntheticConfig {
            videos_per_class: 5,
            candidate_groups: 3,
            ..SyntheticConfig::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        assert!(validate(&a).is_valid());
        assert_eq!(a.videos.len(), 50);
        assert_eq!(a.classes.len(), 10);
        assert_eq!(a.candidates.len(), 10);
        assert!(a.classes.iter().all(|c| c.subtexts.len() == 4));
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn shared_atomics_are_common_to_neighbours() {
        let cfg = SyntheticConfig {
            noise: 0.0,
            videos_per_class: 1,
            ..SyntheticConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let p = prototypes(&cfg, &mut rng);
        // two shared slots: one owned with the next class, one with the previous
        assert_eq!(p.atomics[3][0], p.atomics[4][1]);
        assert_eq!(p.atomics[3][1], p.atomics[2][0]);
        for c in 0..cfg.classes {
            for a in 0..2 {
                for core in &p.cores {
                    assert!(core.dot(&p.atomics[c][a]).abs() < 1e-12);
                }
            }
            for a in 2..4 {
                let own = p.cores[c].dot(&p.atomics[c][a]);
                assert!((own - 1.0 / 2f64.sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            SyntheticConfig {
                classes: 0,
                ..Default::default()
            },
            SyntheticConfig {
                shared_fraction: 1.5,
                ..Default::default()
            },
            SyntheticConfig {
                noise: -1.0,
                ..Default::default()
            },
            SyntheticConfig {
                semantic_dim: 32,
                ..Default::default()
            },
            SyntheticConfig {
                candidate_groups: 1,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(
                generate_synthetic(&cfg),
                Err(Error::ConfigInvalid(_))
            ));
        }
        let ok = SyntheticConfig {
            classes: 40,
            videos_per_class: 1,
            ..Default::default()
        };
        assert!(generate_synthetic(&ok).is_ok());
    }
}
