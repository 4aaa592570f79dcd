//! Criterion-level checks. Each returns a worst-case error or panics.

use super::{max_gradient_error, randn, randomize};
use mmap_core::autograd::Graph;
use mmap_core::encoder::{EncoderConfig, Magnification, TokenSequence};
use mmap_core::globalfusion::{
    local_global_attention, stage2_loss_graph, Aggregation, EnsembleHeads, GlobalConfig, GlobalFusion,
};
use mmap_core::magfusion::{fuse_magnifications, regression_with_alignment, FusionConfig, MagFusion};
use mmap_core::model::{MmapModel, ModelConfig};
use mmap_core::nn::Linear;
use mmap_core::params::{Matrix, ParamStore};
use mmap_core::protobank::{BankConfig, NeighborStrategy, PrototypeSet};
use ndarray::{concatenate, s, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const D: usize = 4;
const TAU: usize = 2;
const G: usize = 3;
const L: usize = 3;
pub const GRADIENT_TOL: f64 = 1e-4;

/// Stage-1 loss over two fusion layers and the phase-1 head.
pub fn stage1_fusion_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = FusionConfig {
        layers: 2,
        heads: 2,
        pre_norm: true,
    };
    let fusion = MagFusion::new(&mut store, &cfg, D, &mut rng).unwrap();
    let head = Linear::new(&mut store, "head1", D, G, &mut rng);
    randomize(&mut store, &mut rng, 0.6);
    let seqs = [0, 1, 2].map(|_| randn(&mut rng, TAU + 1, D));
    let target = randn(&mut rng, 1, G);
    max_gradient_error(&mut store, &|g: &mut Graph| {
        let sv = seqs.clone().map(|m| g.constant(m));
        let out = fusion.forward(g, sv[0], sv[1], sv[2]);
        let pred = head.forward(g, out.f);
        let t = g.constant(target.clone());
        let cls0 = g.slice_rows(sv[0], 0, 1);
        regression_with_alignment(g, pred, t, out.f, cls0, 0.3).total
    })
}

/// Stage-1 loss with the encoder in the graph.
pub fn stage1_encoder_gradient_error() -> f64 {
    let cfg = ModelConfig {
        spot_patch: 8,
        encoder: EncoderConfig {
            patch_size: 8,
            vit_patch: 4,
            dim: D,
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
        global: GlobalConfig::default(),
        bank: BankConfig::default(),
    };
    let mut model = MmapModel::new(&cfg, G, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    randomize(&mut model.store, &mut rng, 0.5);
    let views = [0, 1, 2].map(|_| Array3::from_shape_fn((8, 8, 3), |_| rng.random_range(-1.0..1.0)));
    let target = randn(&mut rng, 1, G);
    let mut store = model.store.clone();
    max_gradient_error(&mut store, &|g: &mut Graph| {
        let n = model.stage1_forward(g, &views).unwrap();
        let t = g.constant(target.clone());
        regression_with_alignment(g, n.pred, t, n.f, n.cls[0], 0.3).total
    })
}

/// Stage-2 loss over global fusion and the ensemble heads.
pub fn stage2_gradient_error(aggregation: Aggregation, residual: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(aggregation as u64 * 2 + residual as u64);
    let mut store = ParamStore::new();
    let cfg = GlobalConfig {
        heads: 2,
        aggregation,
        neighbors: NeighborStrategy::Fixed(L),
        residual,
        pos_hidden: 4,
        ..GlobalConfig::default()
    };
    let global = GlobalFusion::new(&mut store, &cfg, D, &mut rng).unwrap();
    let heads = EnsembleHeads::zeros(&mut store, D, G);
    randomize(&mut store, &mut rng, 0.6);
    let f = randn(&mut rng, 1, D);
    let e = randn(&mut rng, 1, D);
    let protos = randn(&mut rng, L, D);
    let offsets = randn(&mut rng, L, 2) * 0.3;
    let target = randn(&mut rng, 1, G);
    max_gradient_error(&mut store, &|g: &mut Graph| {
        let fv = g.constant(f.clone());
        let ev = g.constant(e.clone());
        let pv = g.constant(protos.clone());
        let ov = (aggregation == Aggregation::CrossAttnPos).then(|| g.constant(offsets.clone()));
        let out = global.forward(g, fv, pv, ov).unwrap();
        let pred = heads.forward(g, ev, fv, out.h);
        let t = g.constant(target.clone());
        stage2_loss_graph(g, pred, t, fv, out.h, 0.3).total
    })
}

/// Largest `|row sum − 1|`; panics on a negative entry.
fn stochastic_gap(m: &Matrix) -> f64 {
    assert!(m.iter().all(|&p| p >= 0.0), "negative attention weight");
    m.rows().into_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max)
}

fn fusion_instance(rng: &mut ChaCha8Rng) -> (ParamStore, MagFusion, [Matrix; 3]) {
    let d = 2 * rng.random_range(1..=4);
    let tau = rng.random_range(1..=6);
    let mut store = ParamStore::new();
    let cfg = FusionConfig {
        layers: rng.random_range(1..=2),
        heads: 2,
        pre_norm: rng.random_bool(0.5),
    };
    let fusion = MagFusion::new(&mut store, &cfg, d, rng).unwrap();
    randomize(&mut store, rng, 0.8);
    let seqs = [0, 1, 2].map(|_| randn(rng, tau + 1, d));
    (store, fusion, seqs)
}

/// Returns `(row-sum gap, permutation gap)` for one random fusion instance.
pub fn fusion_invariants(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (store, fusion, seqs) = fusion_instance(&mut rng);
    let tau = seqs[0].nrows() - 1;
    let ts = seqs.clone().map(|tokens| TokenSequence {
        tokens,
        magnification: Magnification::X5,
    });
    let reference = fuse_magnifications(&ts[0], &ts[1], &ts[2], &fusion, &store).unwrap().f;

    let mut g = Graph::inference(&store);
    let sv = seqs.clone().map(|m| g.constant(m));
    let out = fusion.forward(&mut g, sv[0], sv[1], sv[2]);
    let row_gap = out.probs.iter().flatten().map(|p| stochastic_gap(g.value(*p))).fold(0.0, f64::max);

    let body = concatenate(Axis(0), &[seqs[1].slice(s![1.., ..]), seqs[2].slice(s![1.., ..])]).unwrap();
    let mut order: Vec<usize> = (0..2 * tau).collect();
    order.shuffle(&mut rng);
    let shuffled = concatenate(Axis(0), &[seqs[0].slice(s![..1, ..]), body.select(Axis(0), &order).view()]).unwrap();
    let mut g = Graph::inference(&store);
    let x = g.constant(shuffled);
    let out = fusion.forward_sequence(&mut g, x);
    let perm_gap = g.value(out.f).iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    (row_gap, perm_gap)
}

fn global_instance(rng: &mut ChaCha8Rng, aggregation: Aggregation) -> (ParamStore, GlobalFusion, Vec<f64>, PrototypeSet) {
    let d = 2 * rng.random_range(1..=4);
    let l = rng.random_range(1..=10);
    let mut store = ParamStore::new();
    let cfg = GlobalConfig {
        heads: 2,
        aggregation,
        residual: rng.random_bool(0.5),
        ..GlobalConfig::default()
    };
    let module = GlobalFusion::new(&mut store, &cfg, d, rng).unwrap();
    randomize(&mut store, rng, 0.8);
    let f = randn(rng, 1, d).row(0).to_vec();
    let set = PrototypeSet {
        prototypes: randn(rng, l, d),
        indices: (0..l).collect(),
        similarities: vec![0.0; l],
    };
    (store, module, f, set)
}

/// Row-sum gap of the global attention weights for one random instance.
pub fn global_row_gap(seed: u64, aggregation: Aggregation) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (store, module, f, set) = global_instance(&mut rng, aggregation);
    let mut g = Graph::inference(&store);
    let fv = g.constant(Array2::from_shape_vec((1, f.len()), f).unwrap());
    let pv = g.constant(set.prototypes.clone());
    let offsets = (aggregation == Aggregation::CrossAttnPos).then(|| g.constant(randn(&mut rng, set.len(), 2)));
    let out = module.forward(&mut g, fv, pv, offsets).unwrap();
    assert_eq!(out.probs.len(), 2);
    out.probs.iter().map(|p| stochastic_gap(g.value(*p))).fold(0.0, f64::max)
}

/// Gap in `h` and in the (re-ordered) attention weights after shuffling the prototypes.
pub fn global_permutation_gap(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (store, module, f, set) = global_instance(&mut rng, Aggregation::CrossAttn);
    let a = local_global_attention(&f, &set, &module, &store).unwrap();
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut rng);
    let shuffled = PrototypeSet {
        prototypes: set.prototypes.select(Axis(0), &order),
        indices: order.iter().map(|&i| set.indices[i]).collect(),
        similarities: order.iter().map(|&i| set.similarities[i]).collect(),
    };
    let b = local_global_attention(&f, &shuffled, &module, &store).unwrap();
    let mut gap = a.h.iter().zip(&b.h).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    for (wa, wb) in a.attention.iter().zip(&b.attention) {
        for (r, &i) in order.iter().enumerate() {
            gap = gap.max((wb[r] - wa[i]).abs());
        }
    }
    gap
}

/// Change in `h` when the prototypes are shuffled but the offsets keep their rows.
pub fn positional_permutation_gap(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (store, module, f, set) = global_instance(&mut rng, Aggregation::CrossAttnPos);
    let offsets = randn(&mut rng, set.len(), 2);
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.reverse();
    let h = |protos: Matrix| {
        let mut g = Graph::inference(&store);
        let fv = g.constant(Array2::from_shape_vec((1, f.len()), f.clone()).unwrap());
        let pv = g.constant(protos);
        let ov = g.constant(offsets.clone());
        let out = module.forward(&mut g, fv, pv, Some(ov)).unwrap();
        g.value(out.h).clone()
    };
    let a = h(set.prototypes.clone());
    let b = h(set.prototypes.select(Axis(0), &order));
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
