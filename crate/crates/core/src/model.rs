//! The assembled two-phase model: encoder, magnification fusion and phase-1
//! head, plus the optional phase-2 global fusion, ensemble heads and banks.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoder::{
    make_multimag_views, normalize_imagenet, patch_to_float, resize_bilinear, CropMode, EncoderConfig, TokenEncoder,
    VitEncoder,
};
use crate::error::{config_err, shape_err, Result};
use crate::globalfusion::{Aggregation, EnsembleHeads, FirstHeadInput, GlobalConfig, GlobalFusion, SpatialContext};
use crate::ingest::{extract_patch, SlideRecord};
use crate::magfusion::{FusionConfig, MagFusion};
use crate::nn::Linear;
use crate::params::{Matrix, ParamStore};
use crate::protobank::{build_bank, choose_prototype_count, retrieve_prototypes, BankConfig, PrototypeBank, PrototypeSet};
use crate::train::{augment_patch, AugmentConfig};
use crate::util::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Side length of the window cut around each spot. Views are resized to
    /// `encoder.patch_size` when the two differ.
    pub spot_patch: usize,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub global: GlobalConfig,
    pub bank: BankConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            spot_patch: 112,
            encoder: EncoderConfig::default(),
            fusion: FusionConfig::default(),
            global: GlobalConfig::default(),
            bank: BankConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phase2 {
    pub global: GlobalFusion,
    pub heads: EnsembleHeads,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MmapModel {
    pub config: ModelConfig,
    pub n_genes: usize,
    pub seed: u64,
    pub store: ParamStore,
    pub encoder: VitEncoder,
    pub fusion: MagFusion,
    pub head1: Linear,
    pub phase2: Option<Phase2>,
    pub banks: BTreeMap<String, PrototypeBank>,
}

/// Frozen phase-1 outputs for one spot.
#[derive(Clone, Debug, PartialEq)]
pub struct Phase1Features {
    pub f: Vec<f64>,
    /// [CLS] vectors of the ×5, ×10 and ×20 views.
    pub cls: [Vec<f64>; 3],
    pub pred1: Vec<f64>,
}

pub struct Stage1Nodes {
    pub f: Var,
    pub cls: [Var; 3],
    pub pred: Var,
}

pub struct Stage2Nodes {
    pub f: Var,
    pub h: Var,
    pub pred: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictStage {
    /// Phase-1 head only.
    Stage1,
    /// Ensemble over the global-fusion output.
    Full,
}

fn rgb_row(v: &[f64]) -> Matrix {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row")
}

impl MmapModel {
    pub fn new(config: &ModelConfig, n_genes: usize, seed: u64) -> Result<Self> {
        config.encoder.validate()?;
        if n_genes == 0 {
            return Err(config_err("model needs at least one gene"));
        }
        if config.spot_patch == 0 || config.spot_patch % 4 != 0 {
            return Err(config_err(format!("spot patch {} must be a positive multiple of 4", config.spot_patch)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init"));
        let mut store = ParamStore::new();
        let encoder = VitEncoder::new(&mut store, &config.encoder, &mut rng)?;
        let fusion = MagFusion::new(&mut store, &config.fusion, config.encoder.dim, &mut rng)?;
        let head1 = Linear::new(&mut store, "head1", config.encoder.dim, n_genes, &mut rng);
        Ok(Self {
            config: config.clone(),
            n_genes,
            seed,
            store,
            encoder,
            fusion,
            head1,
            phase2: None,
            banks: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.config.encoder.dim
    }

    /// Freezes every phase-1 parameter and adds the phase-2 modules. The
    /// second ensemble head starts as a copy of the phase-1 head.
    pub fn enter_stage2(&mut self) -> Result<()> {
        if self.phase2.is_some() {
            return Ok(());
        }
        for prefix in ["encoder.", "fusion.", "head1."] {
            self.store.set_trainable_prefix(prefix, false);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "init-stage2"));
        let dim = self.dim();
        let global = GlobalFusion::new(&mut self.store, &self.config.global, dim, &mut rng)?;
        let heads = EnsembleHeads::from_stage1(&mut self.store, &self.head1);
        self.phase2 = Some(Phase2 { global, heads });
        Ok(())
    }

    /// Augments (optionally), builds the three magnification views, resizes
    /// them to the encoder input and applies ImageNet normalization.
    pub fn prepare_views(
        &self,
        patch: &Array3<u8>,
        mode: CropMode,
        augment: Option<&AugmentConfig>,
        rng: &mut impl Rng,
    ) -> Result<[Array3<f64>; 3]> {
        let mut x = patch_to_float(patch);
        if let Some(a) = augment {
            x = augment_patch(&x, rng, a);
        }
        let views = make_multimag_views(&x, mode, rng)?;
        let q = self.config.encoder.patch_size;
        Ok(views.views.map(|v| {
            let v = if v.dim().0 == q { v } else { resize_bilinear(v.view(), q, q) };
            normalize_imagenet(&v)
        }))
    }

    pub fn stage1_forward(&self, g: &mut Graph, views: &[Array3<f64>; 3]) -> Result<Stage1Nodes> {
        let s0 = self.encoder.forward(g, &views[0])?;
        let s1 = self.encoder.forward(g, &views[1])?;
        let s2 = self.encoder.forward(g, &views[2])?;
        let out = self.fusion.forward(g, s0, s1, s2);
        let cls = [s0, s1, s2].map(|s| g.slice_rows(s, 0, 1));
        let pred = self.head1.forward(g, out.f);
        Ok(Stage1Nodes { f: out.f, cls, pred })
    }

    pub fn phase1_features(&self, views: &[Array3<f64>; 3]) -> Result<Phase1Features> {
        let mut g = Graph::inference(&self.store);
        let n = self.stage1_forward(&mut g, views)?;
        let row = |v: Var| g.value(v).row(0).to_vec();
        Ok(Phase1Features {
            f: row(n.f),
            cls: n.cls.map(row),
            pred1: row(n.pred),
        })
    }

    /// Center-mode, unaugmented phase-1 features for every spot of a slide.
    pub fn slide_features(&self, slide: &SlideRecord) -> Result<Vec<Phase1Features>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        slide
            .spots
            .iter()
            .map(|spot| {
                let patch = extract_patch(slide, spot.center, self.config.spot_patch)?;
                let views = self.prepare_views(&patch, CropMode::Center, None, &mut rng)?;
                self.phase1_features(&views)
            })
            .collect()
    }

    pub fn bank_seed(&self, slide_id: &str) -> u64 {
        derive_seed(self.seed, slide_id)
    }

    pub fn build_slide_bank(&self, slide: &SlideRecord, feats: &[Phase1Features]) -> Result<PrototypeBank> {
        if feats.len() != slide.spots.len() {
            return Err(shape_err("one feature per spot required"));
        }
        let d = self.dim();
        let mut emb = Array2::zeros((feats.len(), d));
        let mut centers = Array2::zeros((feats.len(), 2));
        for (i, (ft, spot)) in feats.iter().zip(&slide.spots).enumerate() {
            emb.row_mut(i).assign(&ndarray::aview1(&ft.f));
            centers[[i, 0]] = spot.center.0 as f64;
            centers[[i, 1]] = spot.center.1 as f64;
        }
        build_bank(&emb, &centers, &slide.slide_id, &self.config.bank, self.bank_seed(&slide.slide_id))
    }

    pub fn prototype_count(&self, bank: &PrototypeBank) -> usize {
        choose_prototype_count(bank.k(), self.config.global.neighbors)
    }

    /// Top-L prototypes for `f` and, for the positional variant, their geometry.
    pub fn retrieve(
        &self,
        bank: &PrototypeBank,
        f: &[f64],
        center: (usize, usize),
        diagonal: f64,
    ) -> Result<(PrototypeSet, Option<SpatialContext>)> {
        let set = retrieve_prototypes(f, bank, self.prototype_count(bank))?;
        let ctx = (self.config.global.aggregation == Aggregation::CrossAttnPos).then(|| {
            let mut cc = Array2::zeros((set.len(), 2));
            for (r, &k) in set.indices.iter().enumerate() {
                cc.row_mut(r).assign(&bank.centroid_centers.row(k));
            }
            SpatialContext {
                patch_center: [center.0 as f64, center.1 as f64],
                centroid_centers: cc,
                diagonal,
            }
        });
        Ok((set, ctx))
    }

    fn phase2(&self) -> Result<&Phase2> {
        self.phase2.as_ref().ok_or_else(|| config_err("model has no phase-2 components"))
    }

    pub fn stage2_forward(
        &self,
        g: &mut Graph,
        feats: &Phase1Features,
        protos: &PrototypeSet,
        ctx: Option<&SpatialContext>,
    ) -> Result<Stage2Nodes> {
        let p2 = self.phase2()?;
        let f = g.constant(rgb_row(&feats.f));
        let e = match self.config.global.first_head_input {
            FirstHeadInput::X20 => &feats.cls[2],
            FirstHeadInput::X5 => &feats.cls[0],
        };
        let e = g.constant(rgb_row(e));
        let pv = g.constant(protos.prototypes.clone());
        let offsets = ctx.map(|c| g.constant(c.offsets()));
        let out = p2.global.forward(g, f, pv, offsets)?;
        let pred = p2.heads.forward(g, e, f, out.h);
        Ok(Stage2Nodes { f, h: out.h, pred })
    }

    /// Deterministic predictions (`spots × genes`) for one slide. A slide
    /// without a stored bank gets one built from its own spots.
    pub fn predict_slide(&self, slide: &SlideRecord, stage: PredictStage) -> Result<Matrix> {
        let feats = self.slide_features(slide)?;
        let mut out = Array2::zeros((feats.len(), self.n_genes));
        match stage {
            PredictStage::Stage1 => {
                for (i, ft) in feats.iter().enumerate() {
                    out.row_mut(i).assign(&ndarray::aview1(&ft.pred1));
                }
            }
            PredictStage::Full => {
                self.phase2()?;
                let built;
                let bank = match self.banks.get(&slide.slide_id) {
                    Some(b) => b,
                    None => {
                        built = self.build_slide_bank(slide, &feats)?;
                        &built
                    }
                };
                for (i, (ft, spot)) in feats.iter().zip(&slide.spots).enumerate() {
                    let (set, ctx) = self.retrieve(bank, &ft.f, spot.center, slide.diagonal())?;
                    let mut g = Graph::inference(&self.store);
                    let n = self.stage2_forward(&mut g, ft, &set, ctx.as_ref())?;
                    out.row_mut(i).assign(&g.value(n.pred).row(0));
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{generate_synthetic, SynthConfig};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            spot_patch: 16,
            encoder: EncoderConfig {
                patch_size: 16,
                vit_patch: 8,
                dim: 8,
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
                k_min: 2,
                k_max: 4,
                ..BankConfig::default()
            },
        }
    }

    #[test]
    fn stage2_freezes_phase1_and_copies_head() {
        let mut m = MmapModel::new(&tiny_config(), 3, 1).unwrap();
        m.enter_stage2().unwrap();
        for (id, p) in m.store.iter() {
            let phase1 = ["encoder.", "fusion.", "head1."].iter().any(|s| p.name.starts_with(s));
            assert_eq!(m.store.is_trainable(id), !phase1, "{}", p.name);
        }
        let p2 = m.phase2.as_ref().unwrap();
        assert_eq!(m.store.get(p2.heads.mlp2.weight), m.store.get(m.head1.weight));
    }

    #[test]
    fn predictions_have_one_row_per_spot() {
        let synth = SynthConfig {
            n_slides: 1,
            spots_per_slide: 9,
            n_genes: 3,
            patch_size: 16,
            n_test_slides: 0,
            ..SynthConfig::default()
        };
        let bundle = generate_synthetic(&synth, 2).unwrap();
        let mut m = MmapModel::new(&tiny_config(), 3, 1).unwrap();
        let p1 = m.predict_slide(&bundle.slides[0], PredictStage::Stage1).unwrap();
        assert_eq!(p1.dim(), (9, 3));
        assert!(m.predict_slide(&bundle.slides[0], PredictStage::Full).is_err());
        m.enter_stage2().unwrap();
        let p2 = m.predict_slide(&bundle.slides[0], PredictStage::Full).unwrap();
        assert_eq!(p2.dim(), (9, 3));
        // mlp1 and mlp3 start at zero and mlp2 equals the phase-1 head.
        for (a, b) in p2.iter().zip(p1.iter()) {
            assert!((a - b / 3.0).abs() < 1e-12);
        }
    }
}
