//! Independent reference implementations and toy configurations shared by
//! the integration suites and the acceptance target.

#![allow(dead_code)]

pub mod checks;

use mmap_core::autograd::{Graph, Var};
use mmap_core::encoder::EncoderConfig;
use mmap_core::globalfusion::GlobalConfig;
use mmap_core::magfusion::FusionConfig;
use mmap_core::model::ModelConfig;
use mmap_core::params::{Matrix, ParamStore};
use mmap_core::protobank::BankConfig;
use mmap_core::train::{AugmentConfig, TrainConfig};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn randn(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

/// Desk-scale model for 32-pixel synthetic spots.
pub fn toy_model() -> ModelConfig {
    ModelConfig {
        spot_patch: 32,
        encoder: EncoderConfig {
            patch_size: 32,
            vit_patch: 16,
            dim: 128,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            lora: None,
            frozen: false,
        },
        fusion: FusionConfig::default(),
        global: GlobalConfig::default(),
        bank: BankConfig::default(),
    }
}

/// Tiny model for fast pipeline plumbing checks.
pub fn micro_model() -> ModelConfig {
    ModelConfig {
        spot_patch: 32,
        encoder: EncoderConfig {
            patch_size: 16,
            vit_patch: 8,
            dim: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            lora: None,
            frozen: false,
        },
        fusion: FusionConfig {
            layers: 1,
            heads: 2,
            pre_norm: true,
        },
        global: GlobalConfig {
            heads: 2,
            ..GlobalConfig::default()
        },
        bank: BankConfig {
            k_min: 4,
            k_max: 8,
            ..BankConfig::default()
        },
    }
}

/// Stage-1 schedule for the overfit check. Colour jitter is off because it
/// changes the colour the targets were generated from.
pub fn overfit_train(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        lr_max: 1e-3,
        lr_min: 0.0,
        epochs,
        batch_size: 16,
        seed,
        augment: AugmentConfig {
            jitter: 0.0,
            ..AugmentConfig::default()
        },
        random_crops: false,
        deterministic: true,
        ..TrainConfig::default()
    }
}

pub fn stage2_train(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        lr_max: 1e-3,
        lr_min: 0.0,
        epochs,
        batch_size: 16,
        seed,
        augment: AugmentConfig::disabled(),
        random_crops: false,
        deterministic: true,
        ..TrainConfig::default()
    }
}

/// Plain Lloyd iterations from the given initial centroids. Empty clusters
/// are refilled from the farthest point of a cluster with two or more members.
pub fn lloyd_oracle(points: &Matrix, init: &Matrix, max_iter: usize) -> (Matrix, Vec<usize>, f64) {
    let (n, d) = points.dim();
    let k = init.nrows();
    let dist = |i: usize, c: &Matrix, j: usize| -> f64 { (0..d).map(|t| (points[[i, t]] - c[[j, t]]).powi(2)).sum() };
    let mut c = init.clone();
    let mut assign: Vec<usize> = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let fresh: Vec<usize> = (0..n)
            .map(|i| {
                let mut best = 0;
                for j in 1..k {
                    if dist(i, &c, j) < dist(i, &c, best) {
                        best = j;
                    }
                }
                best
            })
            .collect();
        if fresh == assign {
            break;
        }
        assign = fresh;
        let recompute = |assign: &[usize], c: &mut Matrix, j: usize| -> usize {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == j).collect();
            if !members.is_empty() {
                for t in 0..d {
                    c[[j, t]] = members.iter().map(|&i| points[[i, t]]).sum::<f64>() / members.len() as f64;
                }
            }
            members.len()
        };
        let sizes: Vec<usize> = (0..k).map(|j| recompute(&assign, &mut c, j)).collect();
        let mut sizes = sizes;
        for j in 0..k {
            if sizes[j] != 0 {
                continue;
            }
            let donor_point = (0..n)
                .filter(|&i| sizes[assign[i]] >= 2)
                .fold(None::<usize>, |acc, i| match acc {
                    Some(b) if dist(b, &c, assign[b]) >= dist(i, &c, assign[i]) => Some(b),
                    _ => Some(i),
                });
            let Some(i) = donor_point else { break };
            let donor = assign[i];
            assign[i] = j;
            sizes[donor] -= 1;
            sizes[j] = 1;
            for t in 0..d {
                c[[j, t]] = points[[i, t]];
            }
            recompute(&assign, &mut c, donor);
        }
    }
    let inertia = (0..n).map(|i| dist(i, &c, assign[i])).sum();
    (c, assign, inertia)
}

/// Top-`l` centroid indices by cosine similarity, from a full sort.
pub fn retrieval_oracle(f: &[f64], centroids: &Matrix, l: usize) -> Vec<usize> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut scored: Vec<(f64, usize)> = centroids
        .rows()
        .into_iter()
        .enumerate()
        .map(|(j, c)| {
            let c = c.to_vec();
            let dot: f64 = f.iter().zip(&c).map(|(a, b)| a * b).sum();
            (dot / (norm(f) * norm(&c)).max(1e-8), j)
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.into_iter().take(l).map(|(_, j)| j).collect()
}

/// Single-pass raw-moment Pearson correlation.
pub fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    let den = ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        (n * sxy - sx * sy) / den
    }
}

pub fn errors_oracle(pred: &Matrix, truth: &Matrix) -> (f64, f64) {
    let diffs: Vec<f64> = pred.iter().zip(truth.iter()).map(|(a, b)| a - b).collect();
    let n = diffs.len() as f64;
    (diffs.iter().map(|d| d * d).sum::<f64>() / n, diffs.iter().map(|d| d.abs()).sum::<f64>() / n)
}

/// Largest relative gap between reverse-mode gradients of `build` and central
/// differences over every trainable entry. Denominators are floored at 1e-4
/// so entries with near-zero gradients are compared absolutely.
pub fn max_gradient_error(store: &mut ParamStore, build: &dyn Fn(&mut Graph) -> Var) -> f64 {
    const H: f64 = 1e-5;
    assert!(!store.trainable_ids().is_empty(), "nothing to check");
    let grads = {
        let mut g = Graph::new(store);
        let out = build(&mut g);
        g.backward(out)
    };
    let eval = |store: &ParamStore| {
        let mut g = Graph::inference(store);
        let out = build(&mut g);
        g.scalar_value(out)
    };
    let mut worst: f64 = 0.0;
    for id in store.trainable_ids() {
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Array2::zeros(store.get(id).dim()));
        let shape = store.get(id).dim();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = store.get(id)[[r, c]];
                store.get_mut(id)[[r, c]] = orig + H;
                let up = eval(store);
                store.get_mut(id)[[r, c]] = orig - H;
                let down = eval(store);
                store.get_mut(id)[[r, c]] = orig;
                let numeric = (up - down) / (2.0 * H);
                let a = analytic[[r, c]];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
                worst = worst.max(rel);
            }
        }
    }
    worst
}

/// Replaces every parameter with Gaussian values of the given scale.
pub fn randomize(store: &mut ParamStore, rng: &mut impl Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let (r, c) = store.get(id).dim();
        *store.get_mut(id) = randn(rng, r, c) * scale;
    }
}
