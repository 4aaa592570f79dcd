use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DatasetBundle, PreprocessingLog, SlideRecord, Split, SpotRecord};
use crate::error::{config_err, Result};
use crate::params::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthPattern {
    /// Independent random colors per spot.
    Random,
    /// Each slide is split into a left and a right region with distinct base colors.
    Blobs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_slides: usize,
    pub spots_per_slide: usize,
    pub n_genes: usize,
    pub patch_size: usize,
    /// Std of Gaussian noise added on the log scale before rounding to counts.
    pub noise_sigma: f64,
    pub pattern: SynthPattern,
    /// The last `n_test_slides` slides form the test split.
    pub n_test_slides: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_slides: 3,
            spots_per_slide: 100,
            n_genes: 8,
            patch_size: 32,
            noise_sigma: 0.0,
            pattern: SynthPattern::Random,
            n_test_slides: 1,
        }
    }
}

/// `expression = log1p(round(expm1(bias + weights · rgb + σ·ε)))` where `rgb`
/// is the mean colour of the spot's patch scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMap {
    pub feature: String,
    /// `g × 3`
    pub weights: Vec<[f64; 3]>,
    pub bias: Vec<f64>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticMap {
    /// Noise-free log-scale expression for a mean RGB in `[0, 1]`.
    pub fn log_rate(&self, rgb: [f64; 3]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w[0] * rgb[0] + w[1] * rgb[1] + w[2] * rgb[2])
            .collect()
    }
}

/// Mean colour of a patch, scaled to `[0, 1]`.
pub fn mean_rgb(patch: &Array3<u8>) -> [f64; 3] {
    let n = (patch.dim().0 * patch.dim().1) as f64;
    let mut m = [0.0; 3];
    for ((_, _, c), &v) in patch.indexed_iter() {
        m[c] += v as f64;
    }
    m.map(|v| v / n / 255.0)
}

fn color(rng: &mut impl Rng) -> [f64; 3] {
    [0, 1, 2].map(|_| rng.random_range(30.0..225.0))
}

fn jittered(base: [f64; 3], amp: f64, rng: &mut impl Rng) -> [f64; 3] {
    base.map(|v| (v + rng.random_range(-amp..=amp)).clamp(0.0, 255.0))
}

/// Paints one spot: an outer colour with a centred `p/2` square of a second
/// colour, plus small per-pixel noise.
fn paint_spot(image: &mut Array3<u8>, x0: usize, y0: usize, p: usize, outer: [f64; 3], inner: [f64; 3], rng: &mut impl Rng) {
    let lo = p / 4;
    let hi = lo + p / 2;
    for dy in 0..p {
        for dx in 0..p {
            let base = if (lo..hi).contains(&dy) && (lo..hi).contains(&dx) { inner } else { outer };
            for c in 0..3 {
                let v = base[c] + rng.random_range(-6.0..=6.0);
                image[[y0 + dy, x0 + dx, c]] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
}

/// Slides whose spot expression is a known linear function of patch colour.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<DatasetBundle> {
    if cfg.n_slides == 0 || cfg.spots_per_slide == 0 || cfg.n_genes == 0 {
        return Err(config_err("synthetic dataset needs positive slide, spot and gene counts"));
    }
    if cfg.patch_size < 4 || cfg.patch_size % 4 != 0 {
        return Err(config_err(format!("synthetic patch size {} must be a positive multiple of 4", cfg.patch_size)));
    }
    if !(cfg.noise_sigma >= 0.0 && cfg.noise_sigma.is_finite()) {
        return Err(config_err("noise_sigma must be finite and non-negative"));
    }
    if cfg.n_test_slides > cfg.n_slides {
        return Err(config_err("more test slides than slides"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = SyntheticMap {
        feature: "mean_rgb_unit".into(),
        weights: (0..cfg.n_genes)
            .map(|_| [0, 1, 2].map(|_| StandardNormal.sample(&mut rng)))
            .collect(),
        bias: (0..cfg.n_genes).map(|_| rng.random_range(4.0..6.0)).collect(),
        noise_sigma: cfg.noise_sigma,
        seed,
    };
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid std");

    let p = cfg.patch_size;
    let n = cfg.spots_per_slide;
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let margin = p / 2;
    let (h, w) = (rows * p + 2 * margin, cols * p + 2 * margin);

    let mut slides = Vec::with_capacity(cfg.n_slides);
    for i in 0..cfg.n_slides {
        let mut image = Array3::from_shape_fn((h, w, 3), |_| rng.random_range(225..=240u8));
        let blob_colors = [(color(&mut rng), color(&mut rng)), (color(&mut rng), color(&mut rng))];
        let mut spots = Vec::with_capacity(n);
        for k in 0..n {
            let (r, c) = (k / cols, k % cols);
            let (x0, y0) = (margin + c * p, margin + r * p);
            let (outer, inner) = match cfg.pattern {
                SynthPattern::Random => (color(&mut rng), color(&mut rng)),
                SynthPattern::Blobs => {
                    let (o, inn) = blob_colors[usize::from(2 * c >= cols)];
                    (jittered(o, 12.0, &mut rng), jittered(inn, 12.0, &mut rng))
                }
            };
            paint_spot(&mut image, x0, y0, p, outer, inner, &mut rng);
            let rgb = mean_rgb(&image.slice(s![y0..y0 + p, x0..x0 + p, ..]).to_owned());
            let expression = map
                .log_rate(rgb)
                .into_iter()
                .map(|z| {
                    let z = if cfg.noise_sigma > 0.0 { z + noise.sample(&mut rng) } else { z };
                    z.exp_m1().round().max(0.0).ln_1p()
                })
                .collect();
            spots.push(SpotRecord {
                spot_id: format!("{r}x{c}"),
                center: (x0 + p / 2, y0 + p / 2),
                expression,
            });
        }
        slides.push(SlideRecord {
            slide_id: format!("syn{i:02}"),
            patient_id: format!("P{}", i / 2),
            image,
            spots,
            split: if i >= cfg.n_slides - cfg.n_test_slides { Split::Test } else { Split::Train },
        });
    }
    let total = cfg.n_slides * n;
    Ok(DatasetBundle {
        slides,
        gene_names: (0..cfg.n_genes).map(|j| format!("G{j:03}")).collect(),
        preprocessing_log: PreprocessingLog {
            genes_total: cfg.n_genes,
            genes_after_hvg: cfg.n_genes,
            genes_after_min_spots: cfg.n_genes,
            n_hvg: None,
            min_spots: 0,
            spots_total: total,
            spots_skipped_boundary: 0,
            spots_without_coordinates: 0,
            synthetic: Some(map),
        },
    })
}

/// Stacks the per-spot mean RGB features (`S × 3`) and expression (`S × g`) of a bundle.
pub fn color_design(bundle: &DatasetBundle, p: usize) -> Result<(Matrix, Matrix)> {
    let s = bundle.n_spots();
    let mut x = Array2::zeros((s, 3));
    let mut y = Array2::zeros((s, bundle.n_genes()));
    let mut r = 0;
    for slide in &bundle.slides {
        for spot in &slide.spots {
            let rgb = mean_rgb(&super::extract_patch(slide, spot.center, p)?);
            x.row_mut(r).assign(&ndarray::arr1(&rgb));
            y.row_mut(r).assign(&ndarray::arr1(&spot.expression));
            r += 1;
        }
    }
    Ok((x, y))
}
