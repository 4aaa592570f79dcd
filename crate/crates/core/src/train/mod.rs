//! Two-stage optimization: schedules, augmentation, Adam, checkpoints and the
//! stage-1 / stage-2 loops.

mod checkpoint;
mod loops;

use ndarray::{Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::params::{Grads, Matrix, ParamStore};

pub use checkpoint::{Checkpoint, Stage, FORMAT_VERSION};
pub use loops::{banks_for_slides, run_stage1, run_stage2, steps_per_epoch, EpochStats, TrainReport};

/// Environment variable that forces sequential, reproducible training.
pub const DETERMINISTIC_ENV: &str = "MMAP_DETERMINISTIC";

pub fn deterministic_from_env() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Random multiple of 90°.
    pub rotate: bool,
    /// Per-channel multiplicative factor drawn from `[1 − a, 1 + a]`.
    pub jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            rotate: true,
            jitter: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            flip_prob: 0.0,
            rotate: false,
            jitter: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.flip_prob == 0.0 && !self.rotate && self.jitter == 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub gamma1: f64,
    pub gamma2: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Random sub-patch crops during training; center crops otherwise.
    pub random_crops: bool,
    /// Sequential per-spot processing in a fixed order.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-5,
            lr_min: 0.0,
            epochs: 50,
            batch_size: 16,
            gamma1: 0.3,
            gamma2: 0.3,
            seed: 0,
            augment: AugmentConfig::default(),
            random_crops: true,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err("epochs and batch_size must be >= 1"));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(config_err(format!(
                "need 0 <= lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        for (name, v) in [("gamma1", self.gamma1), ("gamma2", self.gamma2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err(format!("{name} must be finite and non-negative")));
            }
        }
        let a = &self.augment;
        if !(0.0..=1.0).contains(&a.flip_prob) || !(0.0..1.0).contains(&a.jitter) {
            return Err(config_err("flip_prob must lie in [0, 1] and jitter in [0, 1)"));
        }
        Ok(())
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π t / epochs))` for `t ∈ [0, epochs]`.
pub fn cosine_lr(t: usize, cfg: &TrainConfig) -> Result<f64> {
    if t > cfg.epochs || cfg.epochs == 0 {
        return Err(config_err(format!("epoch {t} outside the schedule [0, {}]", cfg.epochs)));
    }
    let phase = std::f64::consts::PI * t as f64 / cfg.epochs as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + phase.cos()))
}

pub fn hflip(patch: &Array3<f64>) -> Array3<f64> {
    let mut out = patch.clone();
    out.invert_axis(Axis(1));
    out
}

/// Rotates by `k` quarter turns counter-clockwise.
pub fn rot90(patch: &Array3<f64>, k: usize) -> Array3<f64> {
    let mut out = patch.clone();
    for _ in 0..k % 4 {
        let mut t = out.view();
        t.swap_axes(0, 1);
        let mut t = t.to_owned();
        t.invert_axis(Axis(0));
        out = t;
    }
    out
}

/// Flip, right-angle rotation, then per-channel multiplicative jitter with
/// clamping to `[0, 1]`.
pub fn augment_patch(patch: &Array3<f64>, rng: &mut impl Rng, cfg: &AugmentConfig) -> Array3<f64> {
    let mut out = if cfg.flip_prob > 0.0 && rng.random::<f64>() < cfg.flip_prob {
        hflip(patch)
    } else {
        patch.clone()
    };
    if cfg.rotate {
        out = rot90(&out, rng.random_range(0..4));
    }
    if cfg.jitter > 0.0 {
        let factors: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(1.0 - cfg.jitter..=1.0 + cfg.jitter));
        for ((_, _, c), v) in out.indexed_iter_mut() {
            *v = (*v * factors[c]).clamp(0.0, 1.0);
        }
    }
    out
}

/// Adam without weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Option<Matrix>>,
    v: Vec<Option<Matrix>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Updates every trainable parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (id, g) in grads.iter() {
            if !store.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Matrix::zeros(g.dim()));
            let v = self.v[i].get_or_insert_with(|| Matrix::zeros(g.dim()));
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}
