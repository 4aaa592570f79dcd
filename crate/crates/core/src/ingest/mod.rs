//! Spot-level datasets: on-disk layout, gene selection, patches and synthetic data.
//!
//! ```text
//! root/slides/<slide_id>.png   RGB image
//! root/counts/<slide_id>.tsv   header `spot_id<TAB>gene…`, one row of integer counts per spot
//! root/spots/<slide_id>.tsv    spot_id, x_pixel, y_pixel
//! root/meta.json               {"patients": {slide_id: patient_id}, "test_slides": [...]}
//! root/synthetic.json          generating map (synthetic datasets only)
//! ```

mod genes;
mod io;
mod synth;

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, MmapError, Result};

pub use genes::{normalize_expression, select_genes, GeneSelection};
pub use io::{load_dataset, write_dataset};
pub use synth::{color_design, generate_synthetic, mean_rgb, SynthConfig, SynthPattern, SyntheticMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpotRecord {
    pub spot_id: String,
    /// `(x, y)` pixel position: column, row.
    pub center: (usize, usize),
    /// log1p-normalized expression, one entry per dataset gene.
    pub expression: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlideRecord {
    pub slide_id: String,
    pub patient_id: String,
    /// `h × w × 3`
    pub image: Array3<u8>,
    pub spots: Vec<SpotRecord>,
    pub split: Split,
}

impl SlideRecord {
    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }

    pub fn diagonal(&self) -> f64 {
        (self.height() as f64).hypot(self.width() as f64)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessingLog {
    pub genes_total: usize,
    pub genes_after_hvg: usize,
    pub genes_after_min_spots: usize,
    pub n_hvg: Option<usize>,
    pub min_spots: usize,
    pub spots_total: usize,
    pub spots_skipped_boundary: usize,
    pub spots_without_coordinates: usize,
    pub synthetic: Option<SyntheticMap>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub slides: Vec<SlideRecord>,
    pub gene_names: Vec<String>,
    pub preprocessing_log: PreprocessingLog,
}

impl DatasetBundle {
    pub fn n_genes(&self) -> usize {
        self.gene_names.len()
    }

    pub fn n_spots(&self) -> usize {
        self.slides.iter().map(|s| s.spots.len()).sum()
    }

    pub fn patients(&self) -> BTreeSet<&str> {
        self.slides.iter().map(|s| s.patient_id.as_str()).collect()
    }

    pub fn slides_in(&self, split: Split) -> impl Iterator<Item = &SlideRecord> {
        self.slides.iter().filter(move |s| s.split == split)
    }

    pub fn slide(&self, slide_id: &str) -> Option<&SlideRecord> {
        self.slides.iter().find(|s| s.slide_id == slide_id)
    }

    pub fn summary(&self) -> DatasetSummary {
        DatasetSummary {
            slides: self.slides.len(),
            patients: self.patients().len(),
            spots: self.n_spots(),
            genes: self.n_genes(),
            train_slides: self.slides_in(Split::Train).count(),
            test_slides: self.slides_in(Split::Test).count(),
            spots_per_slide: self.slides.iter().map(|s| (s.slide_id.clone(), s.spots.len())).collect(),
            preprocessing: self.preprocessing_log.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub slides: usize,
    pub patients: usize,
    pub spots: usize,
    pub genes: usize,
    pub train_slides: usize,
    pub test_slides: usize,
    pub spots_per_slide: BTreeMap<String, usize>,
    pub preprocessing: PreprocessingLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    /// Keep this many highly variable genes; `None` keeps every gene in file order.
    pub n_hvg: Option<usize>,
    /// Minimum number of spots with a nonzero count for a gene to be kept.
    pub min_spots: usize,
    /// Patch side length; spots whose window leaves the image are dropped.
    pub patch_size: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            n_hvg: None,
            min_spots: 0,
            patch_size: 112,
        }
    }
}

impl IngestConfig {
    /// Gene filtering used for the HER2-positive breast cancer ST cohort.
    pub fn her2st() -> Self {
        Self {
            n_hvg: Some(1000),
            min_spots: 1000,
            patch_size: 112,
        }
    }
}

/// The `p × p` window `[x − p/2, x + p/2) × [y − p/2, y + p/2)` around `center = (x, y)`.
pub fn extract_patch(slide: &SlideRecord, center: (usize, usize), p: usize) -> Result<Array3<u8>> {
    if p == 0 || p % 2 != 0 {
        return Err(config_err(format!("patch size {p} must be positive and even")));
    }
    let (x, y) = center;
    let half = p / 2;
    if x < half || y < half || x + half > slide.width() || y + half > slide.height() {
        return Err(MmapError::Boundary(format!(
            "{p}×{p} window at ({x}, {y}) leaves the {}×{} image of `{}`",
            slide.height(),
            slide.width(),
            slide.slide_id
        )));
    }
    Ok(slide.image.slice(s![y - half..y + half, x - half..x + half, ..]).to_owned())
}

/// Assigns `Test` to the listed slides and `Train` to the rest.
pub fn split_by_slide(mut bundle: DatasetBundle, test_slide_ids: &BTreeSet<String>) -> Result<DatasetBundle> {
    for id in test_slide_ids {
        if bundle.slide(id).is_none() {
            return Err(config_err(format!("unknown test slide `{id}`")));
        }
    }
    for slide in &mut bundle.slides {
        slide.split = if test_slide_ids.contains(&slide.slide_id) {
            Split::Test
        } else {
            Split::Train
        };
    }
    Ok(bundle)
}
