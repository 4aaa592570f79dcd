//! Layers shared by the encoder, the magnification fusion and the global fusion.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::error::{config_err, Result};
use crate::params::{Matrix, ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-5;

pub(crate) fn xavier_uniform(rng: &mut impl Rng, d_out: usize, d_in: usize) -> Matrix {
    let bound = (6.0 / (d_in + d_out) as f64).sqrt();
    Array2::from_shape_fn((d_out, d_in), |_| rng.random_range(-bound..bound))
}

pub(crate) fn normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LowRankAdapter {
    /// `rank × d_in`, random init.
    pub a: ParamId,
    /// `d_out × rank`, zero init.
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

impl LowRankAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Affine map `y = x·Wᵀ + b` with the weight stored `d_out × d_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub lora: Option<LowRankAdapter>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier_uniform(rng, d_out, d_in), true);
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, d_out)), true);
        Self {
            name: name.to_string(),
            weight,
            bias: Some(bias),
            lora: None,
            d_in,
            d_out,
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Array2::zeros((d_out, d_in)), true);
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, d_out)), true);
        Self {
            name: name.to_string(),
            weight,
            bias: Some(bias),
            lora: None,
            d_in,
            d_out,
        }
    }

    /// New layer whose weight and bias are copies of `source`'s current values.
    pub fn copy_of(store: &mut ParamStore, name: &str, source: &Linear) -> Self {
        let w = store.get(source.weight).clone();
        let weight = store.add(format!("{name}.weight"), w, true);
        let bias = source.bias.map(|b| {
            let v = store.get(b).clone();
            store.add(format!("{name}.bias"), v, true)
        });
        Self {
            name: name.to_string(),
            weight,
            bias,
            lora: None,
            d_in: source.d_in,
            d_out: source.d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let mut y = g.matmul_nt(x, w);
        if let Some(b) = self.bias {
            let b = g.param(b);
            y = g.add_row(y, b);
        }
        if let Some(lora) = &self.lora {
            let a = g.param(lora.a);
            let b = g.param(lora.b);
            let down = g.matmul_nt(x, a);
            let up = g.matmul_nt(down, b);
            let up = g.scale(up, lora.scale());
            y = g.add(y, up);
        }
        y
    }

    /// `W + (alpha/rank)·B·A`, or just `W` without an adapter.
    pub fn merged_weight(&self, store: &ParamStore) -> Matrix {
        let mut w = store.get(self.weight).clone();
        if let Some(lora) = &self.lora {
            let ba = store.get(lora.b).dot(store.get(lora.a));
            w.scaled_add(lora.scale(), &ba);
        }
        w
    }

    /// Plain evaluation through the merged weight, outside any graph.
    pub fn apply(&self, store: &ParamStore, x: &Matrix) -> Matrix {
        let mut y = x.dot(&self.merged_weight(store).t());
        if let Some(b) = self.bias {
            y += store.get(b);
        }
        y
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.weight];
        ids.extend(self.bias);
        if let Some(l) = &self.lora {
            ids.push(l.a);
            ids.push(l.b);
        }
        ids
    }
}

/// Wraps `layer` with a trainable low-rank update. `A` is drawn uniformly in
/// `±1/sqrt(d_in)` and `B` starts at zero, so the adapted map initially equals
/// the base map. With `freeze_base`, only `A` and `B` remain trainable.
pub fn apply_lowrank_adapter(
    store: &mut ParamStore,
    layer: &Linear,
    rank: usize,
    alpha: f64,
    freeze_base: bool,
    rng: &mut impl Rng,
) -> Result<Linear> {
    if rank == 0 || rank > layer.d_in.min(layer.d_out) {
        return Err(config_err(format!(
            "adapter rank {rank} outside [1, {}] for {}",
            layer.d_in.min(layer.d_out),
            layer.name
        )));
    }
    if layer.lora.is_some() {
        return Err(config_err(format!("{} already carries an adapter", layer.name)));
    }
    let bound = 1.0 / (layer.d_in as f64).sqrt();
    let a_init = Array2::from_shape_fn((rank, layer.d_in), |_| rng.random_range(-bound..bound));
    let a = store.add(format!("{}.lora_a", layer.name), a_init, true);
    let b = store.add(format!("{}.lora_b", layer.name), Array2::zeros((layer.d_out, rank)), true);
    if freeze_base {
        store.set_trainable(layer.weight, false);
        if let Some(bias) = layer.bias {
            store.set_trainable(bias, false);
        }
    }
    Ok(Linear {
        lora: Some(LowRankAdapter { a, b, rank, alpha }),
        ..layer.clone()
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Array2::ones((1, dim)), true),
            beta: store.add(format!("{name}.beta"), Array2::zeros((1, dim)), true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

pub struct AttentionOutput {
    pub out: Var,
    /// One `n_query × n_key` row-stochastic matrix per head.
    pub probs: Vec<Var>,
}

/// Scaled dot-product attention with separate query/key/value/output projections.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(config_err(format!("{name}: dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        })
    }

    /// `logit_bias`, when given, holds one `n_query × n_key` additive term per head.
    pub fn forward(&self, g: &mut Graph, query: Var, context: Var, logit_bias: Option<&[Var]>) -> AttentionOutput {
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, context);
        let v = self.v.forward(g, context);
        let dh = self.dim / self.heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, (h + 1) * dh),
                    g.slice_cols(k, h * dh, (h + 1) * dh),
                    g.slice_cols(v, h * dh, (h + 1) * dh),
                )
            };
            let scores = g.matmul_nt(qh, kh);
            let mut scores = g.scale(scores, inv);
            if let Some(bias) = logit_bias {
                scores = g.add(scores, bias[h]);
            }
            let p = g.softmax_rows(scores);
            outs.push(g.matmul(p, vh));
            probs.push(p);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        AttentionOutput {
            out: self.o.forward(g, merged),
            probs,
        }
    }

    pub fn linears(&self) -> [&Linear; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }

    /// Sets value and output projections to identity with zero bias. Query
    /// and key projections are left untouched.
    pub fn set_identity_value_output(&self, store: &mut ParamStore) {
        for lin in [&self.v, &self.o] {
            *store.get_mut(lin.weight) = Array2::eye(self.dim);
            if let Some(b) = lin.bias {
                store.get_mut(b).fill(0.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fresh_adapter_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let base = Linear::new(&mut store, "l", 6, 4, &mut rng);
        let x = normal(&mut rng, 3, 6, 1.0);
        let before = base.apply(&store, &x);
        let adapted = apply_lowrank_adapter(&mut store, &base, 2, 4.0, true, &mut rng).unwrap();
        let mut g = Graph::inference(&store);
        let xv = g.constant(x.clone());
        let y = adapted.forward(&mut g, xv);
        assert_eq!(g.value(y), &before);
    }

    #[test]
    fn adapter_parameter_count_and_freezing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let base = Linear::new(&mut store, "l", 10, 7, &mut rng);
        let adapted = apply_lowrank_adapter(&mut store, &base, 3, 1.0, true, &mut rng).unwrap();
        assert_eq!(store.num_scalars(true), 3 * (10 + 7));
        assert!(!store.is_trainable(adapted.weight));
    }

    #[test]
    fn adapter_rank_range_is_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let base = Linear::new(&mut store, "l", 5, 3, &mut rng);
        assert!(apply_lowrank_adapter(&mut store, &base, 0, 1.0, true, &mut rng).is_err());
        assert!(apply_lowrank_adapter(&mut store, &base, 4, 1.0, true, &mut rng).is_err());
        assert!(apply_lowrank_adapter(&mut store, &base, 3, 1.0, true, &mut rng).is_ok());
    }

    #[test]
    fn merged_weight_reproduces_adapted_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let base = Linear::new(&mut store, "l", 8, 5, &mut rng);
        let adapted = apply_lowrank_adapter(&mut store, &base, 2, 3.0, true, &mut rng).unwrap();
        // Stand-in for trained adapter weights.
        *store.get_mut(adapted.lora.unwrap().b) = normal(&mut rng, 5, 2, 0.5);
        let x = normal(&mut rng, 4, 8, 1.0);

        let mut g = Graph::inference(&store);
        let xv = g.constant(x.clone());
        let y = adapted.forward(&mut g, xv);
        let adapted_out = g.value(y).clone();

        // Independent route: explicit W + (alpha/r)·B·A, then x·Wᵀ + b.
        let lora = adapted.lora.unwrap();
        let (w, a, b) = (store.get(adapted.weight), store.get(lora.a), store.get(lora.b));
        let mut merged = w.clone();
        for i in 0..5 {
            for j in 0..8 {
                let mut s = 0.0;
                for r in 0..2 {
                    s += b[[i, r]] * a[[r, j]];
                }
                merged[[i, j]] += 1.5 * s;
            }
        }
        let bias = store.get(adapted.bias.unwrap());
        for n in 0..4 {
            for i in 0..5 {
                let mut s = bias[[0, i]];
                for j in 0..8 {
                    s += x[[n, j]] * merged[[i, j]];
                }
                let rel = (s - adapted_out[[n, i]]).abs() / s.abs().max(1e-12);
                assert!(rel < 1e-6, "row {n} col {i}: {s} vs {}", adapted_out[[n, i]]);
            }
        }
    }
}
