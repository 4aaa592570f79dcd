//! Local-global fusion of a patch feature with its retrieved prototypes, and
//! the three-head ensemble used in phase 2.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{config_err, shape_err, Result};
use crate::magfusion::{mean_squared_error, regression_with_alignment, LossTerms, COSINE_EPS};
use crate::nn::{LayerNorm, Linear, MultiHeadAttention};
use crate::params::{Matrix, ParamId, ParamStore};
use crate::protobank::{NeighborStrategy, PrototypeSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    CrossAttn,
    CrossAttnPos,
    Mean,
    Sum,
}

impl Aggregation {
    pub const ALL: [Aggregation; 4] = [Self::CrossAttn, Self::CrossAttnPos, Self::Mean, Self::Sum];

    pub fn name(self) -> &'static str {
        match self {
            Self::CrossAttn => "cross_attn",
            Self::CrossAttnPos => "cross_attn_pos",
            Self::Mean => "mean",
            Self::Sum => "sum",
        }
    }

    fn uses_attention(self) -> bool {
        matches!(self, Self::CrossAttn | Self::CrossAttnPos)
    }
}

/// Which [CLS] vector feeds the first ensemble head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FirstHeadInput {
    X20,
    X5,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalConfig {
    pub heads: usize,
    pub aggregation: Aggregation,
    pub neighbors: NeighborStrategy,
    /// `h = LN(f + attn)` when set, bare attention output otherwise.
    pub residual: bool,
    /// Hidden width of the offset-to-bias perceptron (`cross_attn_pos` only).
    pub pos_hidden: usize,
    pub first_head_input: FirstHeadInput,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            aggregation: Aggregation::CrossAttn,
            neighbors: NeighborStrategy::Adaptive,
            residual: true,
            pos_hidden: 16,
            first_head_input: FirstHeadInput::X20,
        }
    }
}

/// Two-layer perceptron from a normalized `(Δx, Δy)` offset to one logit bias per head.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalBias {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl PositionalBias {
    /// `L×2` offsets to one `1×L` bias row per head.
    pub fn forward(&self, g: &mut Graph, offsets: Var, heads: usize) -> Vec<Var> {
        let hidden = self.fc1.forward(g, offsets);
        let hidden = g.gelu(hidden);
        let per_head = self.fc2.forward(g, hidden);
        let t = g.transpose(per_head);
        (0..heads).map(|h| g.slice_rows(t, h, h + 1)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalFusion {
    cfg: GlobalConfig,
    dim: usize,
    pub attn: Option<MultiHeadAttention>,
    pub norm: Option<LayerNorm>,
    pub pos: Option<PositionalBias>,
}

/// Spot geometry for the positional-bias variant. `centroid_centers` holds
/// the rows of the retrieved prototypes, in retrieval order.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialContext {
    pub patch_center: [f64; 2],
    pub centroid_centers: Matrix,
    /// Slide diagonal in pixels; offsets are divided by it.
    pub diagonal: f64,
}

impl SpatialContext {
    pub fn offsets(&self) -> Matrix {
        let mut m = self.centroid_centers.clone();
        for mut row in m.rows_mut() {
            row[0] = (row[0] - self.patch_center[0]) / self.diagonal;
            row[1] = (row[1] - self.patch_center[1]) / self.diagonal;
        }
        m
    }
}

pub struct GlobalOutput {
    /// `1×d`
    pub h: Var,
    /// Per head `1×L` attention weights; empty for mean/sum.
    pub probs: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnrichedFeature {
    pub h: Vec<f64>,
    pub attention: Vec<Vec<f64>>,
}

impl GlobalFusion {
    pub fn new(store: &mut ParamStore, cfg: &GlobalConfig, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let attn = if cfg.aggregation.uses_attention() {
            Some(MultiHeadAttention::new(store, "global.attn", dim, cfg.heads, rng)?)
        } else {
            None
        };
        let norm = (attn.is_some() && cfg.residual).then(|| LayerNorm::new(store, "global.norm", dim));
        let pos = if cfg.aggregation == Aggregation::CrossAttnPos {
            if cfg.pos_hidden == 0 {
                return Err(config_err("pos_hidden must be >= 1"));
            }
            Some(PositionalBias {
                fc1: Linear::new(store, "global.pos.fc1", 2, cfg.pos_hidden, rng),
                fc2: Linear::zeros(store, "global.pos.fc2", cfg.pos_hidden, cfg.heads),
            })
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            dim,
            attn,
            norm,
            pos,
        })
    }

    pub fn config(&self) -> &GlobalConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn aggregation(&self) -> Aggregation {
        self.cfg.aggregation
    }

    /// `f` is `1×d`, `protos` is `L×d`, `offsets` is `L×2` and only read by `cross_attn_pos`.
    pub fn forward(&self, g: &mut Graph, f: Var, protos: Var, offsets: Option<Var>) -> Result<GlobalOutput> {
        let l = g.value(protos).nrows();
        if l == 0 {
            return Err(config_err("empty prototype set"));
        }
        if g.value(protos).ncols() != self.dim || g.value(f).dim() != (1, self.dim) {
            return Err(shape_err(format!(
                "global fusion expects 1×{d} query and L×{d} prototypes",
                d = self.dim
            )));
        }
        match self.cfg.aggregation {
            Aggregation::Mean | Aggregation::Sum => {
                let mut ctx = g.sum_rows(protos);
                if self.cfg.aggregation == Aggregation::Mean {
                    ctx = g.scale(ctx, 1.0 / l as f64);
                }
                Ok(GlobalOutput {
                    h: g.add(f, ctx),
                    probs: Vec::new(),
                })
            }
            Aggregation::CrossAttn | Aggregation::CrossAttnPos => {
                let attn = self.attn.as_ref().expect("attention variants own an attention block");
                let bias = match (&self.pos, offsets) {
                    (Some(pos), Some(off)) => {
                        if g.value(off).dim() != (l, 2) {
                            return Err(shape_err(format!("expected {l}×2 offsets")));
                        }
                        Some(pos.forward(g, off, attn.heads))
                    }
                    (Some(_), None) => return Err(config_err("cross_attn_pos needs spot and centroid centers")),
                    (None, _) => None,
                };
                let a = attn.forward(g, f, protos, bias.as_deref());
                let h = match &self.norm {
                    Some(norm) => {
                        let r = g.add(f, a.out);
                        norm.forward(g, r)
                    }
                    None => a.out,
                };
                Ok(GlobalOutput { h, probs: a.probs })
            }
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if let Some(a) = &self.attn {
            a.linears().iter().for_each(|l| ids.extend(l.param_ids()));
        }
        if let Some(n) = &self.norm {
            ids.extend([n.gamma, n.beta]);
        }
        if let Some(p) = &self.pos {
            ids.extend(p.fc1.param_ids());
            ids.extend(p.fc2.param_ids());
        }
        ids
    }
}

fn row(v: &[f64]) -> Matrix {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row")
}

/// Inference-only enrichment of `f` under the module's aggregation strategy.
pub fn aggregate_context(
    f: &[f64],
    protos: &PrototypeSet,
    ctx: Option<&SpatialContext>,
    module: &GlobalFusion,
    store: &ParamStore,
) -> Result<EnrichedFeature> {
    if protos.is_empty() {
        return Err(config_err("empty prototype set"));
    }
    let mut g = Graph::inference(store);
    let fv = g.constant(row(f));
    let pv = g.constant(protos.prototypes.clone());
    let offsets = match (module.aggregation(), ctx) {
        (Aggregation::CrossAttnPos, Some(c)) => {
            if c.centroid_centers.nrows() != protos.len() {
                return Err(shape_err("one centroid center per prototype required"));
            }
            Some(g.constant(c.offsets()))
        }
        (Aggregation::CrossAttnPos, None) => {
            return Err(config_err("cross_attn_pos needs spot and centroid centers"));
        }
        _ => None,
    };
    let out = module.forward(&mut g, fv, pv, offsets)?;
    Ok(EnrichedFeature {
        h: g.value(out.h).row(0).to_vec(),
        attention: out.probs.iter().map(|&p| g.value(p).row(0).to_vec()).collect(),
    })
}

/// Cross-attention from `f` to its prototypes, with no positional terms.
pub fn local_global_attention(
    f: &[f64],
    protos: &PrototypeSet,
    module: &GlobalFusion,
    store: &ParamStore,
) -> Result<EnrichedFeature> {
    if module.aggregation() != Aggregation::CrossAttn {
        return Err(config_err(format!(
            "local-global attention on a `{}` module",
            module.aggregation().name()
        )));
    }
    aggregate_context(f, protos, None, module, store)
}

/// Three affine heads `d → g` over `e`, `f` and `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleHeads {
    pub mlp1: Linear,
    pub mlp2: Linear,
    pub mlp3: Linear,
}

impl EnsembleHeads {
    /// `mlp2` starts as a copy of the phase-1 head; `mlp1` and `mlp3` start at zero.
    pub fn from_stage1(store: &mut ParamStore, head1: &Linear) -> Self {
        Self {
            mlp1: Linear::zeros(store, "ensemble.mlp1", head1.d_in, head1.d_out),
            mlp2: Linear::copy_of(store, "ensemble.mlp2", head1),
            mlp3: Linear::zeros(store, "ensemble.mlp3", head1.d_in, head1.d_out),
        }
    }

    pub fn zeros(store: &mut ParamStore, d: usize, g: usize) -> Self {
        Self {
            mlp1: Linear::zeros(store, "ensemble.mlp1", d, g),
            mlp2: Linear::zeros(store, "ensemble.mlp2", d, g),
            mlp3: Linear::zeros(store, "ensemble.mlp3", d, g),
        }
    }

    pub fn d_in(&self) -> usize {
        self.mlp1.d_in
    }

    pub fn d_out(&self) -> usize {
        self.mlp1.d_out
    }

    /// `(MLP1(e) + MLP2(f) + MLP3(h)) / 3`
    pub fn forward(&self, g: &mut Graph, e: Var, f: Var, h: Var) -> Var {
        let a = self.mlp1.forward(g, e);
        let b = self.mlp2.forward(g, f);
        let c = self.mlp3.forward(g, h);
        let ab = g.add(a, b);
        let abc = g.add(ab, c);
        g.scale(abc, 1.0 / 3.0)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.mlp1, &self.mlp2, &self.mlp3]
            .iter()
            .flat_map(|l| l.param_ids())
            .collect()
    }
}

pub fn ensemble_predict(e: &[f64], f: &[f64], h: &[f64], heads: &EnsembleHeads, store: &ParamStore) -> Result<Vec<f64>> {
    let d = heads.d_in();
    if e.len() != d || f.len() != d || h.len() != d {
        return Err(shape_err(format!(
            "ensemble expects length {d}, got {}, {}, {}",
            e.len(),
            f.len(),
            h.len()
        )));
    }
    let mut g = Graph::inference(store);
    let (ev, fv, hv) = (g.row_constant(e), g.row_constant(f), g.row_constant(h));
    let out = heads.forward(&mut g, ev, fv, hv);
    Ok(g.value(out).row(0).to_vec())
}

/// `mean((pred − target)²) + γ₂·(1 − cos(f, h))`
pub fn stage2_loss(pred: &[f64], target: &[f64], f: &[f64], h: &[f64], gamma2: f64) -> f64 {
    mean_squared_error(pred, target) + gamma2 * (1.0 - crate::autograd::cosine_similarity(f, h, COSINE_EPS))
}

pub fn stage2_loss_graph(g: &mut Graph, pred: Var, target: Var, f: Var, h: Var, gamma2: f64) -> LossTerms {
    regression_with_alignment(g, pred, target, f, h, gamma2)
}
