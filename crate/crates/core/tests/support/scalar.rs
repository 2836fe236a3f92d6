//! Plain nested-loop reimplementations of the forward pipeline, the TPP
//! score and the losses, plus a randomized comparison against the library.
//!
//! Nothing here calls into ndarray arithmetic; every quantity is spelled out
//! index by index so a mistake in the library cannot be shared by the oracle.

#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vidalign::alignment::{
    self, Activation, AttentionParams, CoarseForm, Dense, Ffn, FusionParams, ModelParams, Scorer,
    Variant,
};
use vidalign::embedding_store::{ClassTextBundle, TextTokens};
use vidalign::subtext_metrics::{self, Scaler, TppConfig};
use vidalign::training;

pub type M = Vec<Vec<f64>>;

pub fn rows(a: &Array2<f64>) -> M {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

pub fn array(m: &M) -> Array2<f64> {
    let cols = m.first().map_or(0, Vec::len);
    Array2::from_shape_fn((m.len(), cols), |(i, j)| m[i][j])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for &x in v {
        if x > max {
            max = x;
        }
    }
    let mut e = vec![0.0; v.len()];
    let mut z = 0.0;
    for i in 0..v.len() {
        e[i] = (v[i] - max).exp();
        z += e[i];
    }
    for x in &mut e {
        *x /= z;
    }
    e
}

/// `x W` for a row-vector matrix `x` (n x d) and `W` (d x e).
fn matmul(x: &M, w: &M) -> M {
    let e = w[0].len();
    let mut out = vec![vec![0.0; e]; x.len()];
    for i in 0..x.len() {
        for j in 0..e {
            let mut s = 0.0;
            for k in 0..w.len() {
                s += x[i][k] * w[k][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn attention(q: &M, k: &M, v: &M, heads: usize) -> M {
    let d = q[0].len();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let lo = h * hd;
        for i in 0..q.len() {
            let mut scores = vec![0.0; k.len()];
            for j in 0..k.len() {
                let mut s = 0.0;
                for c in lo..lo + hd {
                    s += q[i][c] * k[j][c];
                }
                scores[j] = s * scale;
            }
            let w = softmax(&scores);
            for c in lo..lo + hd {
                let mut s = 0.0;
                for j in 0..k.len() {
                    s += w[j] * v[j][c];
                }
                out[i][c] = s;
            }
        }
    }
    out
}

pub fn augment(global: &M, subtexts: &[M], wq: &M, wk: &M, wv: &M, heads: usize) -> M {
    let mut stacked = Vec::new();
    for s in subtexts {
        stacked.extend(s.iter().cloned());
    }
    let att = attention(
        &matmul(global, wq),
        &matmul(&stacked, wk),
        &matmul(&stacked, wv),
        heads,
    );
    let mut out = att;
    for i in 0..out.len() {
        for c in 0..out[i].len() {
            out[i][c] += global[i][c];
        }
    }
    out
}

pub fn coarse_weights(t_hat: &M, frames: &M, literal: bool) -> Vec<f64> {
    let l = frames.len();
    let mut a = vec![0.0; l];
    for tok in t_hat {
        let sims: Vec<f64> = frames.iter().map(|f| cosine(tok, f)).collect();
        if literal {
            let mut z = 0.0;
            for &s in &sims {
                z += s;
            }
            for j in 0..l {
                a[j] += sims[j].exp() / z;
            }
        } else {
            let w = softmax(&sims);
            for j in 0..l {
                a[j] += w[j];
            }
        }
    }
    a
}

pub fn fine_weights(subtexts: &[M], frames: &M) -> Vec<f64> {
    let mut best = vec![f64::NEG_INFINITY; frames.len()];
    for (j, f) in frames.iter().enumerate() {
        for s in subtexts {
            let mut mean = 0.0;
            for tok in s {
                mean += cosine(tok, f);
            }
            mean /= s.len() as f64;
            if mean > best[j] {
                best[j] = mean;
            }
        }
    }
    softmax(&best)
}

pub fn weighted_sum(frames: &M, a: &[f64]) -> Vec<f64> {
    let mut o = vec![0.0; frames[0].len()];
    for (j, f) in frames.iter().enumerate() {
        for c in 0..f.len() {
            o[c] += a[j] * f[c];
        }
    }
    o
}

pub struct Layer {
    pub w: M,
    pub b: Vec<f64>,
}

pub fn ffn(layers: &[Layer], tanh: bool, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        let mut z = vec![0.0; layer.w.len()];
        for r in 0..layer.w.len() {
            z[r] = dot(&layer.w[r], &h) + layer.b[r];
        }
        if i + 1 < layers.len() {
            for v in &mut z {
                *v = if tanh { v.tanh() } else { v.max(0.0) };
            }
        }
        h = z;
    }
    h
}

fn layers_of(f: &Ffn) -> (Vec<Layer>, bool) {
    let layers = f
        .layers
        .iter()
        .map(|l| Layer {
            w: rows(&l.weight),
            b: l.bias.to_vec(),
        })
        .collect();
    (layers, f.activation == Activation::Tanh)
}

/// Classification score of one video for one class under `p`.
pub fn class_score(bundle: &ClassTextBundle, frames: &M, p: &ModelParams) -> f64 {
    let global = rows(&bundle.global.tokens);
    let subs: Vec<M> = bundle.subtexts.iter().map(|s| rows(&s.tokens)).collect();
    let t_hat = augment(
        &global,
        &subs,
        &rows(&p.attention.wq),
        &rows(&p.attention.wk),
        &rows(&p.attention.wv),
        p.attention.heads,
    );
    let a_c = coarse_weights(&t_hat, frames, p.coarse_form == CoarseForm::Literal);
    let a_f = fine_weights(&subs, frames);
    let (lc, tc) = layers_of(&p.fusion.coarse);
    let (lf, tf) = layers_of(&p.fusion.fine);
    let o = match p.variant {
        Variant::Full => {
            let x = ffn(&lc, tc, &weighted_sum(frames, &a_c));
            let y = ffn(&lf, tf, &weighted_sum(frames, &a_f));
            x.iter().zip(&y).map(|(a, b)| a + b).collect()
        }
        Variant::CoarseOnly => ffn(&lc, tc, &weighted_sum(frames, &a_c)),
        Variant::FineOnly => ffn(&lf, tf, &weighted_sum(frames, &a_f)),
        Variant::MeanPool => {
            let w = vec![1.0 / frames.len() as f64; frames.len()];
            ffn(&lc, tc, &weighted_sum(frames, &w))
        }
    };
    cosine(&bundle.global.summary.to_vec(), &o)
}

fn scale(s: Scaler, x: f64, eps: f64) -> f64 {
    match s {
        Scaler::Identity => x,
        Scaler::Power { p } => x.powf(p),
        Scaler::OneMinus => (1.0 - x).max(eps),
    }
}

pub fn tpp(global_summary: &[f64], summaries: &[Vec<f64>], cfg: &TppConfig) -> f64 {
    let n = summaries.len();
    let mut acc = 0.0;
    for i in 0..n {
        let sigma = (cosine(global_summary, &summaries[i]) + 1.0) / 2.0;
        let mut sim = 0.0;
        for j in 0..n {
            if j != i {
                sim += (cosine(&summaries[i], &summaries[j]) + 1.0) / 2.0;
            }
        }
        let delta = 1.0 - sim / (n - 1) as f64;
        let s = sigma.clamp(cfg.epsilon, 1.0);
        let d = delta.clamp(cfg.epsilon, 1.0);
        acc += (scale(cfg.alpha, s, cfg.epsilon) * scale(cfg.beta, d, cfg.epsilon)).ln();
    }
    (-acc / n as f64).exp()
}

fn positives(labels: &[usize], b: usize) -> Vec<usize> {
    (0..labels.len())
        .filter(|&i| labels[i] == labels[b])
        .collect()
}

pub fn loss_t2v(y: &M, labels: &[usize]) -> f64 {
    let mut acc = 0.0;
    for b in 0..labels.len() {
        let c = labels[b];
        let mut z = 0.0;
        for row in y {
            z += row[c].exp();
        }
        let pos = positives(labels, b);
        let mut inner = 0.0;
        for &bp in &pos {
            inner += (y[bp][c].exp() / z).ln();
        }
        acc += inner / pos.len() as f64;
    }
    -acc / labels.len() as f64
}

pub fn loss_v2t(y: &M, labels: &[usize]) -> f64 {
    let mut acc = 0.0;
    for b in 0..labels.len() {
        let c = labels[b];
        let pos = positives(labels, b);
        let mut inner = 0.0;
        for &bp in &pos {
            let mut z = 0.0;
            for &v in &y[bp] {
                z += v.exp();
            }
            inner += (y[bp][c].exp() / z).ln();
        }
        acc += inner / pos.len() as f64;
    }
    -acc / labels.len() as f64
}

// ---------------------------------------------------------------------------
// randomized comparison

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
}

pub fn random_text(rng: &mut ChaCha8Rng, tokens: usize, dim: usize) -> TextTokens {
    let t = random_matrix(rng, tokens, dim);
    let summary = Array1::from_shape_simple_fn(dim, || rng.random_range(-1.0..1.0));
    TextTokens::new(t, summary)
}

pub fn random_bundle(rng: &mut ChaCha8Rng, dim: usize) -> ClassTextBundle {
    let n = rng.random_range(2..=4);
    let m = rng.random_range(1..=4);
    let global = random_text(rng, m, dim);
    let subtexts = (0..n)
        .map(|_| {
            let t = rng.random_range(1..=4);
            random_text(rng, t, dim)
        })
        .collect();
    ClassTextBundle {
        class_name: "c".into(),
        global,
        subtexts,
    }
}

fn random_ffn(rng: &mut ChaCha8Rng, dim: usize) -> Ffn {
    if rng.random_bool(0.5) {
        Ffn::affine(
            random_matrix(rng, dim, dim),
            random_matrix(rng, 1, dim).row(0).to_owned(),
        )
    } else {
        let h = rng.random_range(1..=8);
        Ffn {
            layers: vec![
                Dense {
                    weight: random_matrix(rng, h, dim),
                    bias: random_matrix(rng, 1, h).row(0).to_owned(),
                },
                Dense {
                    weight: random_matrix(rng, dim, h),
                    bias: random_matrix(rng, 1, dim).row(0).to_owned(),
                },
            ],
            activation: if rng.random_bool(0.5) {
                Activation::Tanh
            } else {
                Activation::Relu
            },
        }
    }
}

pub fn random_params(rng: &mut ChaCha8Rng, dim: usize) -> ModelParams {
    let divisors: Vec<usize> = (1..=dim).filter(|h| dim % h == 0).collect();
    let heads = divisors[rng.random_range(0..divisors.len())];
    ModelParams {
        attention: AttentionParams {
            wq: random_matrix(rng, dim, dim),
            wk: random_matrix(rng, dim, dim),
            wv: random_matrix(rng, dim, dim),
            heads,
        },
        fusion: FusionParams {
            coarse: random_ffn(rng, dim),
            fine: random_ffn(rng, dim),
        },
        tau: 0.05,
        lambda: 1.0,
        variant: Variant::ALL[rng.random_range(0..4)],
        coarse_form: CoarseForm::Softmax,
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn max_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| rel_err(*x, *y))
        .fold(0.0, f64::max)
}

fn max_err_m(a: &Array2<f64>, b: &M) -> f64 {
    max_err(&a.iter().copied().collect::<Vec<_>>(), &b.concat())
}

/// Largest relative error (floored at scale 1) of each library operation
/// against its oracle over `instances` random problems with dimensions at most 8.
pub fn oracle_sweep(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let names = [
        "cross_attention",
        "augment_global_text",
        "coarse_importance",
        "fine_importance",
        "embeddings",
        "fuse",
        "tpp_score",
        "loss_t2v",
        "loss_v2t",
    ];
    let mut worst = [0.0f64; 9];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let dim = rng.random_range(1..=8);
        let frames_n = rng.random_range(1..=8);
        let bundle = random_bundle(&mut rng, dim);
        let p = random_params(&mut rng, dim);
        let frames = random_matrix(&mut rng, frames_n, dim);
        let fm = rows(&frames);

        let (qn, kn) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let q = random_matrix(&mut rng, qn, dim);
        let k = random_matrix(&mut rng, kn, dim);
        let v = random_matrix(&mut rng, k.nrows(), dim);
        let lib = alignment::cross_attention(q.view(), k.view(), v.view()).unwrap();
        worst[0] = worst[0].max(max_err_m(
            &lib,
            &attention(&rows(&q), &rows(&k), &rows(&v), 1),
        ));

        let global = rows(&bundle.global.tokens);
        let subs: Vec<M> = bundle.subtexts.iter().map(|s| rows(&s.tokens)).collect();
        let t_hat =
            alignment::augment_global_text(&bundle.global, &bundle.subtexts, &p.attention).unwrap();
        let t_hat_o = augment(
            &global,
            &subs,
            &rows(&p.attention.wq),
            &rows(&p.attention.wk),
            &rows(&p.attention.wv),
            p.attention.heads,
        );
        worst[1] = worst[1].max(max_err_m(&t_hat, &t_hat_o));

        let a_c = alignment::coarse_importance(t_hat.view(), frames.view()).unwrap();
        worst[2] = worst[2].max(max_err(
            a_c.as_slice().unwrap(),
            &coarse_weights(&t_hat_o, &fm, false),
        ));
        // the literal form divides by a raw similarity sum; keep it away from zero
        let pos_frames = frames.mapv(f64::abs);
        let pos_t = t_hat.mapv(f64::abs);
        let lit =
            alignment::coarse_importance_with(pos_t.view(), pos_frames.view(), CoarseForm::Literal)
                .unwrap();
        worst[2] = worst[2].max(max_err(
            lit.as_slice().unwrap(),
            &coarse_weights(&rows(&pos_t), &rows(&pos_frames), true),
        ));

        let a_f = alignment::fine_importance(&bundle.subtexts, frames.view()).unwrap();
        worst[3] = worst[3].max(max_err(a_f.as_slice().unwrap(), &fine_weights(&subs, &fm)));

        let o_c = alignment::coarse_embedding(frames.view(), a_c.view()).unwrap();
        let o_f = alignment::fine_embedding(frames.view(), a_f.view()).unwrap();
        let mut e = max_err(
            o_c.as_slice().unwrap(),
            &weighted_sum(&fm, a_c.as_slice().unwrap()),
        );
        e = e.max(max_err(
            o_f.as_slice().unwrap(),
            &weighted_sum(&fm, a_f.as_slice().unwrap()),
        ));
        let scorer = Scorer::new(std::slice::from_ref(&bundle), &p).unwrap();
        let score = scorer.scores(frames.view()).unwrap()[0];
        e = e.max(rel_err(score, class_score(&bundle, &fm, &p)));
        worst[4] = worst[4].max(e);

        let fused = alignment::fuse(o_c.view(), o_f.view(), &p.fusion).unwrap();
        let (lc, tc) = layers_of(&p.fusion.coarse);
        let (lf, tf) = layers_of(&p.fusion.fine);
        let fc = ffn(&lc, tc, o_c.as_slice().unwrap());
        let ff = ffn(&lf, tf, o_f.as_slice().unwrap());
        let fused_o: Vec<f64> = fc.iter().zip(&ff).map(|(a, b)| a + b).collect();
        worst[5] = worst[5].max(max_err(fused.as_slice().unwrap(), &fused_o));

        let scalers = [Scaler::Identity, Scaler::OneMinus, Scaler::Power { p: 2.0 }];
        let cfg = TppConfig {
            alpha: scalers[rng.random_range(0..3)],
            beta: scalers[rng.random_range(0..3)],
            epsilon: 1e-6,
        };
        let lib_tpp = subtext_metrics::tpp_score(&bundle, &cfg).unwrap().tpp;
        let sums: Vec<Vec<f64>> = bundle.subtexts.iter().map(|s| s.summary.to_vec()).collect();
        worst[6] = worst[6].max(rel_err(
            lib_tpp,
            tpp(&bundle.global.summary.to_vec(), &sums, &cfg),
        ));

        let b = rng.random_range(1..=8);
        let c = rng.random_range(1..=8);
        let y = random_matrix(&mut rng, b, c).mapv(|x| x * 10.0);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let ym = rows(&y);
        worst[7] = worst[7].max(rel_err(
            training::loss_t2v(&y, &labels),
            loss_t2v(&ym, &labels),
        ));
        worst[8] = worst[8].max(rel_err(
            training::loss_v2t(&y, &labels),
            loss_v2t(&ym, &labels),
        ));
    }
    names.into_iter().zip(worst).collect()
}
