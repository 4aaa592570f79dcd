use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Magnification;
use crate::autograd::{Graph, Var};
use crate::error::{config_err, shape_err, Result};
use crate::nn::{apply_lowrank_adapter, normal, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{Matrix, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Side length `p` of the (square) input view.
    pub patch_size: usize,
    /// Side length of one transformer patch token.
    pub vit_patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// When set, every block projection gets a low-rank adapter and the
    /// backbone itself is frozen.
    pub lora: Option<LoraConfig>,
    pub frozen: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 112,
            vit_patch: 16,
            dim: 128,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            lora: None,
            frozen: false,
        }
    }
}

impl EncoderConfig {
    /// Number of patch tokens τ (the [CLS] token is extra).
    pub fn num_patch_tokens(&self) -> usize {
        let n = self.patch_size / self.vit_patch;
        n * n
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.vit_patch == 0 || self.patch_size % self.vit_patch != 0 {
            return Err(config_err(format!(
                "patch size {} is not a multiple of token patch {}",
                self.patch_size, self.vit_patch
            )));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(config_err(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.mlp_ratio == 0 {
            return Err(config_err("mlp_ratio must be positive"));
        }
        Ok(())
    }
}

/// Encoder output: row 0 is the [CLS] token, rows `1..=τ` the patch tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Matrix,
    pub magnification: Magnification,
}

impl TokenSequence {
    pub fn cls(&self) -> Vec<f64> {
        self.tokens.row(0).to_vec()
    }

    pub fn num_patch_tokens(&self) -> usize {
        self.tokens.nrows().saturating_sub(1)
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Anything that maps a normalized `p×p×3` view to a `(τ+1)×d` token matrix
/// whose first row summarizes the view.
pub trait TokenEncoder {
    fn dim(&self) -> usize;
    fn num_patch_tokens(&self) -> usize;
    fn forward(&self, g: &mut Graph, view: &Array3<f64>) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq)]
struct VitBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Small pre-norm vision transformer with a learned [CLS] token and learned
/// absolute position embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct VitEncoder {
    cfg: EncoderConfig,
    patch_embed: Linear,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<VitBlock>,
    norm: LayerNorm,
}

/// Splits a `p×p×3` image into `τ` flattened `vit_patch²·3` rows, raster order.
pub fn patchify(view: &Array3<f64>, vit_patch: usize) -> Matrix {
    let (h, w, c) = view.dim();
    let (ny, nx) = (h / vit_patch, w / vit_patch);
    let mut out = Array2::zeros((ny * nx, vit_patch * vit_patch * c));
    for py in 0..ny {
        for px in 0..nx {
            let row = py * nx + px;
            let mut col = 0;
            for dy in 0..vit_patch {
                for dx in 0..vit_patch {
                    for ch in 0..c {
                        out[[row, col]] = view[[py * vit_patch + dy, px * vit_patch + dx, ch]];
                        col += 1;
                    }
                }
            }
        }
    }
    out
}

impl VitEncoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let tau = cfg.num_patch_tokens();
        let patch_embed = Linear::new(store, "encoder.patch_embed", cfg.vit_patch * cfg.vit_patch * 3, d, rng);
        let cls = store.add("encoder.cls", normal(rng, 1, d, 0.02), true);
        let pos = store.add("encoder.pos", normal(rng, tau + 1, d, 0.02), true);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let name = format!("encoder.block{i}");
            blocks.push(VitBlock {
                ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
                attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, cfg.heads, rng)?,
                ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
                fc1: Linear::new(store, &format!("{name}.fc1"), d, d * cfg.mlp_ratio, rng),
                fc2: Linear::new(store, &format!("{name}.fc2"), d * cfg.mlp_ratio, d, rng),
            });
        }
        let norm = LayerNorm::new(store, "encoder.norm", d);

        if let Some(lora) = cfg.lora {
            store.set_trainable_prefix("encoder.", false);
            for block in &mut blocks {
                for lin in block.attn.linears_mut() {
                    *lin = apply_lowrank_adapter(store, lin, lora.rank, lora.alpha, true, rng)?;
                }
                block.fc1 = apply_lowrank_adapter(store, &block.fc1, lora.rank, lora.alpha, true, rng)?;
                block.fc2 = apply_lowrank_adapter(store, &block.fc2, lora.rank, lora.alpha, true, rng)?;
            }
        }
        if cfg.frozen {
            store.set_trainable_prefix("encoder.", false);
        }
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            cls,
            pos,
            blocks,
            norm,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Every parameter id owned by the encoder, adapters included.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.patch_embed.param_ids();
        ids.push(self.cls);
        ids.push(self.pos);
        for b in &self.blocks {
            for ln in [&b.ln1, &b.ln2] {
                ids.push(ln.gamma);
                ids.push(ln.beta);
            }
            for lin in b.attn.linears() {
                ids.extend(lin.param_ids());
            }
            ids.extend(b.fc1.param_ids());
            ids.extend(b.fc2.param_ids());
        }
        ids.push(self.norm.gamma);
        ids.push(self.norm.beta);
        ids
    }
}

impl TokenEncoder for VitEncoder {
    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn num_patch_tokens(&self) -> usize {
        self.cfg.num_patch_tokens()
    }

    fn forward(&self, g: &mut Graph, view: &Array3<f64>) -> Result<Var> {
        let p = self.cfg.patch_size;
        if view.dim() != (p, p, 3) {
            let (h, w, c) = view.dim();
            return Err(shape_err(format!("encoder expects {p}×{p}×3 views, got {h}×{w}×{c}")));
        }
        let pixels = g.constant(patchify(view, self.cfg.vit_patch));
        let emb = self.patch_embed.forward(g, pixels);
        let cls = g.param(self.cls);
        let x = g.concat_rows(&[cls, emb]);
        let pos = g.param(self.pos);
        let mut x = g.add(x, pos);
        for b in &self.blocks {
            let n = b.ln1.forward(g, x);
            let a = b.attn.forward(g, n, n, None);
            x = g.add(x, a.out);
            let n = b.ln2.forward(g, x);
            let hdn = b.fc1.forward(g, n);
            let hdn = g.gelu(hdn);
            let m = b.fc2.forward(g, hdn);
            x = g.add(x, m);
        }
        Ok(self.norm.forward(g, x))
    }
}

/// Inference-only encoding of one normalized view.
pub fn encode_tokens(
    view: &Array3<f64>,
    encoder: &impl TokenEncoder,
    store: &ParamStore,
    magnification: Magnification,
) -> Result<TokenSequence> {
    let mut g = Graph::inference(store);
    let out = encoder.forward(&mut g, view)?;
    Ok(TokenSequence {
        tokens: g.value(out).clone(),
        magnification,
    })
}
