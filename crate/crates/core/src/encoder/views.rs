//! Multi-magnification view generation.
//!
//! A `p×p` patch at the base magnification is paired with a `p/2` and a
//! `p/4` sub-crop, both resized back to `p×p`. The crops stand in for ×10
//! and ×20 magnification of the same tissue.

use ndarray::{Array3, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropMode {
    Random,
    Center,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Magnification {
    X5,
    X10,
    X20,
}

impl Magnification {
    pub const ALL: [Magnification; 3] = [Magnification::X5, Magnification::X10, Magnification::X20];
}

/// Three `p×p×3` float views of one patch plus the `(row, col)` origins of
/// the two sub-crops inside the parent patch.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiMagViews {
    pub views: [Array3<f64>; 3],
    pub crop_offsets: [(usize, usize); 2],
}

impl MultiMagViews {
    pub fn view(&self, mag: Magnification) -> &Array3<f64> {
        &self.views[mag as usize]
    }
}

/// Pixel values scaled to `[0, 1]`.
pub fn patch_to_float(patch: &Array3<u8>) -> Array3<f64> {
    patch.mapv(|v| f64::from(v) / 255.0)
}

pub fn normalize_imagenet(view: &Array3<f64>) -> Array3<f64> {
    let mut out = view.clone();
    for ((_, _, c), v) in out.indexed_iter_mut() {
        *v = (*v - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
    }
    out
}

/// Bilinear resampling with half-pixel centers; source coordinates are
/// clamped to the image edge.
pub fn resize_bilinear(img: ArrayView3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (in_h, in_w, ch) = img.dim();
    let sy = in_h as f64 / out_h as f64;
    let sx = in_w as f64 / out_w as f64;
    let sample = |dst: usize, scale: f64, n: usize| -> (usize, usize, f64) {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, src - lo as f64)
    };
    let mut out = Array3::zeros((out_h, out_w, ch));
    for y in 0..out_h {
        let (y0, y1, wy) = sample(y, sy, in_h);
        for x in 0..out_w {
            let (x0, x1, wx) = sample(x, sx, in_w);
            for c in 0..ch {
                let top = img[[y0, x0, c]] * (1.0 - wx) + img[[y0, x1, c]] * wx;
                let bottom = img[[y1, x0, c]] * (1.0 - wx) + img[[y1, x1, c]] * wx;
                out[[y, x, c]] = top * (1.0 - wy) + bottom * wy;
            }
        }
    }
    out
}

fn crop_origin(p: usize, sub: usize, mode: CropMode, rng: &mut impl Rng) -> (usize, usize) {
    let span = p - sub;
    match mode {
        CropMode::Center => (span / 2, span / 2),
        CropMode::Random => (rng.random_range(0..=span), rng.random_range(0..=span)),
    }
}

/// Builds the ×5/×10/×20 view triple. `Center` mode ignores `rng`.
pub fn make_multimag_views(patch: &Array3<f64>, mode: CropMode, rng: &mut impl Rng) -> Result<MultiMagViews> {
    let (h, w, c) = patch.dim();
    if h != w || c != 3 {
        return Err(shape_err(format!("expected a square p×p×3 patch, got {h}×{w}×{c}")));
    }
    let p = h;
    if p == 0 || p % 4 != 0 {
        return Err(config_err(format!("patch size {p} is not divisible by 4")));
    }
    let mut offsets = [(0, 0); 2];
    let mut crops = Vec::with_capacity(2);
    for (i, sub) in [p / 2, p / 4].into_iter().enumerate() {
        let (r, col) = crop_origin(p, sub, mode, rng);
        offsets[i] = (r, col);
        let view = patch.slice(ndarray::s![r..r + sub, col..col + sub, ..]);
        crops.push(resize_bilinear(view, p, p));
    }
    let view2 = crops.pop().expect("two crops");
    let view1 = crops.pop().expect("two crops");
    Ok(MultiMagViews {
        views: [patch.clone(), view1, view2],
        crop_offsets: offsets,
    })
}
