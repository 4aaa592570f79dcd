use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{cosine_lr, Adam, Checkpoint, Stage, TrainConfig};
use crate::autograd::Graph;
use crate::encoder::CropMode;
use crate::error::{config_err, MmapError, Result};
use crate::globalfusion::stage2_loss_graph;
use crate::ingest::{extract_patch, DatasetBundle, Split};
use crate::magfusion::regression_with_alignment;
use crate::model::{MmapModel, ModelConfig, Phase1Features};
use crate::params::Grads;
use crate::protobank::PrototypeBank;
use crate::util::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub loss_ge: f64,
    pub loss_mag: f64,
    pub loss_total: f64,
    pub steps: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    /// Per-epoch `(L_ge, L_mag, L_total)` means.
    pub fn loss_trace(&self) -> Vec<(f64, f64, f64)> {
        self.epochs.iter().map(|e| (e.loss_ge, e.loss_mag, e.loss_total)).collect()
    }
}

pub fn steps_per_epoch(n_spots: usize, batch_size: usize) -> usize {
    n_spots.div_ceil(batch_size)
}

struct Sample {
    slide: usize,
    center: (usize, usize),
    diagonal: f64,
    patch: Array3<u8>,
    target: Vec<f64>,
}

fn train_samples(bundle: &DatasetBundle, p: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (si, slide) in bundle.slides.iter().enumerate().filter(|(_, s)| s.split == Split::Train) {
        for spot in &slide.spots {
            out.push(Sample {
                slide: si,
                center: spot.center,
                diagonal: slide.diagonal(),
                patch: extract_patch(slide, spot.center, p)?,
                target: spot.expression.clone(),
            });
        }
    }
    if out.is_empty() {
        return Err(config_err("the train split has no spots"));
    }
    Ok(out)
}

struct SpotResult {
    grads: Grads,
    ge: f64,
    mag: f64,
    total: f64,
}

fn spot_rng(seed: u64, stage: Stage, epoch: usize, index: usize) -> ChaCha8Rng {
    let tag = match stage {
        Stage::Stage1 => "s1",
        Stage::Stage2 => "s2",
    };
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("{tag}/e{epoch}/i{index}")))
}

/// Shared epoch/batch/step loop. `spot` returns the loss terms and gradients of one sample.
fn optimize<F>(model: &mut MmapModel, cfg: &TrainConfig, stage: Stage, n: usize, log: &mut dyn FnMut(&EpochStats), spot: F) -> Result<TrainReport>
where
    F: Fn(&MmapModel, usize, &mut ChaCha8Rng) -> Result<SpotResult> + Sync,
{
    let mut adam = Adam::new(&model.store);
    let mut report = TrainReport {
        stage,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cosine_lr(epoch, cfg)?;
        let mut order: Vec<usize> = (0..n).collect();
        let tag = format!("shuffle/{stage:?}/e{epoch}");
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &tag)));
        let (mut ge, mut mag, mut total) = (0.0, 0.0, 0.0);
        let mut steps = 0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = || MmapError::Divergence {
                epoch: epoch + 1,
                batch: b + 1,
            };
            let run = |&i: &usize| spot(model, i, &mut spot_rng(cfg.seed, stage, epoch, i));
            let results: Vec<Result<SpotResult>> = if cfg.deterministic {
                batch.iter().map(run).collect()
            } else {
                batch.par_iter().map(run).collect()
            };
            let mut grads = Grads::zeros_like(&model.store);
            for r in results {
                let r = r?;
                if !r.total.is_finite() {
                    return Err(diverged());
                }
                ge += r.ge;
                mag += r.mag;
                total += r.total;
                grads.accumulate(&r.grads);
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.is_finite() {
                return Err(diverged());
            }
            adam.step(&mut model.store, &grads, lr);
            steps += 1;
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            lr,
            loss_ge: ge / n as f64,
            loss_mag: mag / n as f64,
            loss_total: total / n as f64,
            steps,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "{stage:?} epoch {} lr {:.3e} L_ge {:.5} L_mag {:.5}",
            stats.epoch,
            stats.lr,
            stats.loss_ge,
            stats.loss_mag
        );
        log(&stats);
        report.epochs.push(stats);
    }
    Ok(report)
}

fn crop_mode(cfg: &TrainConfig) -> CropMode {
    if cfg.random_crops {
        CropMode::Random
    } else {
        CropMode::Center
    }
}

/// Trains encoder, magnification fusion and the phase-1 head on the train split.
pub fn run_stage1(
    bundle: &DatasetBundle,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&EpochStats),
) -> Result<(Checkpoint, TrainReport)> {
    cfg.validate()?;
    let samples = train_samples(bundle, model_cfg.spot_patch)?;
    let mut model = MmapModel::new(model_cfg, bundle.n_genes(), cfg.seed)?;
    let mode = crop_mode(cfg);
    let report = optimize(&mut model, cfg, Stage::Stage1, samples.len(), log, |m, i, rng| {
        let s = &samples[i];
        let views = m.prepare_views(&s.patch, mode, Some(&cfg.augment), rng)?;
        let mut g = Graph::new(&m.store);
        let nodes = m.stage1_forward(&mut g, &views)?;
        let target = g.row_constant(&s.target);
        let terms = regression_with_alignment(&mut g, nodes.pred, target, nodes.f, nodes.cls[0], cfg.gamma1);
        Ok(SpotResult {
            ge: g.scalar_value(terms.regression),
            mag: g.scalar_value(terms.alignment),
            total: g.scalar_value(terms.total),
            grads: g.backward(terms.total),
        })
    })?;
    let checkpoint = Checkpoint {
        stage: Stage::Stage1,
        model,
        train: cfg.clone(),
        epoch: cfg.epochs,
        gene_names: bundle.gene_names.clone(),
    };
    Ok((checkpoint, report))
}

/// Freezes phase 1, builds (or reuses) one bank per train slide and trains
/// global fusion and the ensemble heads.
pub fn run_stage2(
    bundle: &DatasetBundle,
    stage1: &Checkpoint,
    cfg: &TrainConfig,
    banks: Option<BTreeMap<String, PrototypeBank>>,
    log: &mut dyn FnMut(&EpochStats),
) -> Result<(Checkpoint, TrainReport)> {
    cfg.validate()?;
    if stage1.gene_names != bundle.gene_names {
        return Err(config_err("checkpoint genes differ from the dataset genes"));
    }
    let mut model = stage1.model.clone();
    model.enter_stage2()?;
    let samples = train_samples(bundle, model.config.spot_patch)?;

    let mut center_feats: BTreeMap<usize, Vec<Phase1Features>> = BTreeMap::new();
    for (si, slide) in bundle.slides.iter().enumerate().filter(|(_, s)| s.split == Split::Train) {
        center_feats.insert(si, model.slide_features(slide)?);
    }
    model.banks = match banks {
        Some(b) => b,
        None => build_banks(&model, bundle, &center_feats)?,
    };
    for si in center_feats.keys() {
        let id = &bundle.slides[*si].slide_id;
        if !model.banks.contains_key(id) {
            return Err(config_err(format!("no prototype bank for train slide `{id}`")));
        }
    }
    let cached: Option<Vec<Phase1Features>> = (!cfg.random_crops && cfg.augment.is_identity())
        .then(|| center_feats.values().flatten().cloned().collect());
    let mode = crop_mode(cfg);

    let report = optimize(&mut model, cfg, Stage::Stage2, samples.len(), log, |m, i, rng| {
        let s = &samples[i];
        let owned;
        let feats = match &cached {
            Some(c) => &c[i],
            None => {
                let views = m.prepare_views(&s.patch, mode, Some(&cfg.augment), rng)?;
                owned = m.phase1_features(&views)?;
                &owned
            }
        };
        let bank = &m.banks[&bundle.slides[s.slide].slide_id];
        let (set, ctx) = m.retrieve(bank, &feats.f, s.center, s.diagonal)?;
        let mut g = Graph::new(&m.store);
        let nodes = m.stage2_forward(&mut g, feats, &set, ctx.as_ref())?;
        let target = g.row_constant(&s.target);
        let terms = stage2_loss_graph(&mut g, nodes.pred, target, nodes.f, nodes.h, cfg.gamma2);
        Ok(SpotResult {
            ge: g.scalar_value(terms.regression),
            mag: g.scalar_value(terms.alignment),
            total: g.scalar_value(terms.total),
            grads: g.backward(terms.total),
        })
    })?;
    let checkpoint = Checkpoint {
        stage: Stage::Stage2,
        model,
        train: cfg.clone(),
        epoch: cfg.epochs,
        gene_names: bundle.gene_names.clone(),
    };
    Ok((checkpoint, report))
}

fn build_banks(
    model: &MmapModel,
    bundle: &DatasetBundle,
    feats: &BTreeMap<usize, Vec<Phase1Features>>,
) -> Result<BTreeMap<String, PrototypeBank>> {
    let built: Vec<Result<PrototypeBank>> = feats
        .par_iter()
        .map(|(&si, f)| model.build_slide_bank(&bundle.slides[si], f))
        .collect();
    built.into_iter().map(|b| b.map(|b| (b.slide_id.clone(), b))).collect()
}

/// Center-mode banks for the given slides of `bundle`.
pub fn banks_for_slides(model: &MmapModel, bundle: &DatasetBundle, split: Option<Split>) -> Result<BTreeMap<String, PrototypeBank>> {
    let mut feats = BTreeMap::new();
    for (si, slide) in bundle.slides.iter().enumerate() {
        if split.is_none_or(|s| s == slide.split) {
            feats.insert(si, model.slide_features(slide)?);
        }
    }
    build_banks(model, bundle, &feats)
}
