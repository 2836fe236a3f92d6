//! Randomized sweeps over the normalization, permutation and residual
//! properties of the forward pipeline.

#![allow(dead_code)]

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vidalign::alignment::{self, AttentionParams, Scorer};

use super::scalar::{random_bundle, random_matrix, random_params};

#[derive(Debug, Default, Clone, Copy)]
pub struct NormStats {
    pub max_fine_dev: f64,
    pub max_coarse_dev: f64,
    /// Inputs where permuting frames did not permute both profiles exactly
    /// or changed a score or an embedding in any bit.
    pub equivariance_failures: usize,
}

pub fn normalization_sweep(inputs: usize, seed: u64) -> NormStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = NormStats::default();
    for _ in 0..inputs {
        let dim = rng.random_range(1..=16);
        let frames_n = rng.random_range(1..=16);
        let classes: Vec<_> = (0..rng.random_range(1..=3))
            .map(|_| random_bundle(&mut rng, dim))
            .collect();
        let p = random_params(&mut rng, dim);
        let frames = random_matrix(&mut rng, frames_n, dim);
        let mut perm: Vec<usize> = (0..frames_n).collect();
        perm.shuffle(&mut rng);
        let permuted = frames.select(Axis(0), &perm);

        let scorer = Scorer::new(&classes, &p).unwrap();
        let profiles = scorer.profiles(frames.view()).unwrap();
        let profiles_p = scorer.profiles(permuted.view()).unwrap();
        for (c, (prof, prof_p)) in profiles.iter().zip(&profiles_p).enumerate() {
            let m = classes[c].global.tokens.nrows() as f64;
            let fine: f64 = prof.fine.iter().sum();
            let coarse: f64 = prof.coarse.iter().sum();
            stats.max_fine_dev = stats.max_fine_dev.max((fine - 1.0).abs());
            stats.max_coarse_dev = stats.max_coarse_dev.max((coarse - m).abs());
            let same = perm.iter().enumerate().all(|(i, &src)| {
                prof_p.coarse[i].to_bits() == prof.coarse[src].to_bits()
                    && prof_p.fine[i].to_bits() == prof.fine[src].to_bits()
            });
            let a = ndarray::Array1::from(prof.coarse.clone());
            let a_p = ndarray::Array1::from(prof_p.coarse.clone());
            let o = alignment::coarse_embedding(frames.view(), a.view()).unwrap();
            let o_p = alignment::coarse_embedding(permuted.view(), a_p.view()).unwrap();
            let pooled = alignment::mean_pool_baseline(frames.view()).unwrap();
            let pooled_p = alignment::mean_pool_baseline(permuted.view()).unwrap();
            if !same || o != o_p || pooled != pooled_p {
                stats.equivariance_failures += 1;
            }
        }
        let scores = scorer.scores(frames.view()).unwrap();
        let scores_p = scorer.scores(permuted.view()).unwrap();
        if scores
            .iter()
            .zip(&scores_p)
            .any(|(a, b)| a.to_bits() != b.to_bits())
        {
            stats.equivariance_failures += 1;
        }
    }
    stats
}

/// Number of inputs where zero projections changed any global token bit.
pub fn residual_identity_failures(inputs: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for _ in 0..inputs {
        let dim = rng.random_range(1..=16);
        let bundle = random_bundle(&mut rng, dim);
        let divisors: Vec<usize> = (1..=dim).filter(|h| dim % h == 0).collect();
        let att = AttentionParams {
            heads: divisors[rng.random_range(0..divisors.len())],
            ..AttentionParams::zeros(dim)
        };
        let t_hat = alignment::augment_global_text(&bundle.global, &bundle.subtexts, &att).unwrap();
        let g: &Array2<f64> = &bundle.global.tokens;
        if t_hat.shape() != g.shape()
            || t_hat.iter().zip(g).any(|(a, b)| a.to_bits() != b.to_bits())
        {
            failures += 1;
        }
    }
    failures
}
