//! Cross-magnification fusion and the phase-1 objective.
//!
//! The fused sequence is `[z⁰₀; z¹₁..z¹_τ; z²₁..z²_τ]`: the ×5 [CLS] token
//! followed by the patch tokens of the ×10 and ×20 views. Self-attention runs
//! over it without positional terms and the output at position 0 is the fused
//! feature `f`.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoder::TokenSequence;
use crate::error::{config_err, shape_err, Result};
use crate::nn::{LayerNorm, Linear, MultiHeadAttention};
use crate::params::ParamStore;

/// Guard for cosine similarities of (near) zero-norm vectors.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub layers: usize,
    pub heads: usize,
    /// Layer-normalize the attention input (the residual stream is not normalized).
    pub pre_norm: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            pre_norm: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionLayer {
    pub norm: Option<LayerNorm>,
    pub attn: MultiHeadAttention,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MagFusion {
    cfg: FusionConfig,
    dim: usize,
    pub layers: Vec<FusionLayer>,
}

pub struct FusionOutput {
    /// `1×d` fused feature (output position 0).
    pub f: Var,
    /// Full `(1+2τ)×d` output sequence.
    pub sequence: Var,
    /// Per layer, per head attention matrices.
    pub probs: Vec<Vec<Var>>,
}

/// Phase-1 fused feature with the three [CLS] vectors it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeature {
    pub f: Vec<f64>,
    pub source_cls: [Vec<f64>; 3],
}

impl MagFusion {
    pub fn new(store: &mut ParamStore, cfg: &FusionConfig, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if cfg.layers == 0 {
            return Err(config_err("fusion needs at least one attention layer"));
        }
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let name = format!("fusion.layer{i}");
            layers.push(FusionLayer {
                norm: cfg.pre_norm.then(|| LayerNorm::new(store, &format!("{name}.norm"), dim)),
                attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, cfg.heads, rng)?,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            dim,
            layers,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `[seq0 row 0; seq1 rows 1..; seq2 rows 1..]`
    pub fn assemble(g: &mut Graph, seq0: Var, seq1: Var, seq2: Var) -> Var {
        let n = g.value(seq1).nrows();
        let cls0 = g.slice_rows(seq0, 0, 1);
        let p1 = g.slice_rows(seq1, 1, n);
        let p2 = g.slice_rows(seq2, 1, n);
        g.concat_rows(&[cls0, p1, p2])
    }

    /// Runs the attention stack over an already assembled sequence.
    pub fn forward_sequence(&self, g: &mut Graph, mut x: Var) -> FusionOutput {
        let mut probs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = match &layer.norm {
                Some(norm) => norm.forward(g, x),
                None => x,
            };
            let a = layer.attn.forward(g, input, input, None);
            x = g.add(x, a.out);
            probs.push(a.probs);
        }
        let f = g.slice_rows(x, 0, 1);
        FusionOutput { f, sequence: x, probs }
    }

    pub fn forward(&self, g: &mut Graph, seq0: Var, seq1: Var, seq2: Var) -> FusionOutput {
        let x = Self::assemble(g, seq0, seq1, seq2);
        self.forward_sequence(g, x)
    }
}

/// Inference-only fusion of three token sequences.
pub fn fuse_magnifications(
    seq0: &TokenSequence,
    seq1: &TokenSequence,
    seq2: &TokenSequence,
    fusion: &MagFusion,
    store: &ParamStore,
) -> Result<FusedFeature> {
    let dims = [seq0.tokens.dim(), seq1.tokens.dim(), seq2.tokens.dim()];
    if dims.iter().any(|&d| d != dims[0]) {
        return Err(shape_err(format!("token sequences disagree in shape: {dims:?}")));
    }
    if dims[0].1 != fusion.dim() {
        return Err(shape_err(format!(
            "token dim {} does not match fusion dim {}",
            dims[0].1,
            fusion.dim()
        )));
    }
    if dims[0].0 < 2 {
        return Err(shape_err("token sequences need at least one patch token"));
    }
    let mut g = Graph::inference(store);
    let s0 = g.constant(seq0.tokens.clone());
    let s1 = g.constant(seq1.tokens.clone());
    let s2 = g.constant(seq2.tokens.clone());
    let out = fusion.forward(&mut g, s0, s1, s2);
    Ok(FusedFeature {
        f: g.value(out.f).row(0).to_vec(),
        source_cls: [seq0.cls(), seq1.cls(), seq2.cls()],
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    crate::autograd::cosine_similarity(a, b, COSINE_EPS)
}

/// `1 − cos(f, e0)`, in `[0, 2]`.
pub fn magnification_alignment_loss(f: &[f64], e0: &[f64]) -> f64 {
    1.0 - cosine(f, e0)
}

/// Phase-1 regressor: a single affine map `d → g`.
pub type Stage1Head = Linear;

pub fn stage1_predict(f: &[f64], head: &Stage1Head, store: &ParamStore) -> Result<Vec<f64>> {
    if f.len() != head.d_in {
        return Err(shape_err(format!("feature length {} but head expects {}", f.len(), head.d_in)));
    }
    let x = Array2::from_shape_vec((1, f.len()), f.to_vec()).expect("row");
    Ok(head.apply(store, &x).row(0).to_vec())
}

pub fn mean_squared_error(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len(), "prediction/target length mismatch");
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64
}

/// `mean((pred − target)²) + γ₁·(1 − cos(f, e0))`
pub fn stage1_loss(pred: &[f64], target: &[f64], f: &[f64], e0: &[f64], gamma1: f64) -> f64 {
    mean_squared_error(pred, target) + gamma1 * magnification_alignment_loss(f, e0)
}

/// Loss nodes of one sample: regression term, alignment term and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub regression: Var,
    pub alignment: Var,
}

/// Graph form shared by both stages: `mse(pred, target) + γ·(1 − cos(anchor, other))`.
pub fn regression_with_alignment(
    g: &mut Graph,
    pred: Var,
    target: Var,
    anchor: Var,
    other: Var,
    gamma: f64,
) -> LossTerms {
    let regression = g.mse(pred, target);
    let alignment = g.cosine_distance(anchor, other, COSINE_EPS);
    let weighted = g.scale(alignment, gamma);
    let total = g.add(regression, weighted);
    LossTerms {
        total,
        regression,
        alignment,
    }
}
