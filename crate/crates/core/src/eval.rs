//! Test-split metrics and cluster-map rendering.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::ingest::{DatasetBundle, SlideRecord, Split};
use crate::model::PredictStage;
use crate::params::Matrix;
use crate::protobank::fit_kmeans;
use crate::train::{Checkpoint, Stage};

/// Per-gene Pearson correlation across spots (zero-variance columns give 0)
/// and its mean over genes.
pub fn pearson_per_gene(pred: &Matrix, truth: &Matrix) -> Result<(Vec<f64>, f64)> {
    if pred.dim() != truth.dim() {
        return Err(shape_err(format!("prediction {:?} vs truth {:?}", pred.dim(), truth.dim())));
    }
    let (s, g) = pred.dim();
    if s < 2 {
        return Err(config_err(format!("correlation needs at least 2 spots, got {s}")));
    }
    let pcc: Vec<f64> = (0..g)
        .map(|j| {
            let (x, y) = (pred.column(j), truth.column(j));
            let mx = x.sum() / s as f64;
            let my = y.sum() / s as f64;
            let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
            for (a, b) in x.iter().zip(y.iter()) {
                let (dx, dy) = (a - mx, b - my);
                sxy += dx * dy;
                sxx += dx * dx;
                syy += dy * dy;
            }
            if sxx == 0.0 || syy == 0.0 {
                0.0
            } else {
                (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
            }
        })
        .collect();
    let mean = if g == 0 { 0.0 } else { pcc.iter().sum::<f64>() / g as f64 };
    Ok((pcc, mean))
}

/// `(mse, mae)` over all entries.
pub fn compute_errors(pred: &Matrix, truth: &Matrix) -> Result<(f64, f64)> {
    if pred.dim() != truth.dim() {
        return Err(shape_err(format!("prediction {:?} vs truth {:?}", pred.dim(), truth.dim())));
    }
    let n = pred.len() as f64;
    if pred.is_empty() {
        return Err(config_err("no entries to score"));
    }
    let (mut se, mut ae) = (0.0, 0.0);
    for (a, b) in pred.iter().zip(truth.iter()) {
        se += (a - b) * (a - b);
        ae += (a - b).abs();
    }
    Ok((se / n, ae / n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub pcc_per_gene: Vec<f64>,
    pub pcc_mean: f64,
    pub mse: f64,
    pub mae: f64,
    pub n_spots: usize,
    pub n_genes: usize,
    pub config_hash: String,
}

impl MetricsReport {
    pub fn from_predictions(pred: &Matrix, truth: &Matrix, config_hash: &str) -> Result<Self> {
        let (pcc_per_gene, pcc_mean) = pearson_per_gene(pred, truth)?;
        let (mse, mae) = compute_errors(pred, truth)?;
        Ok(Self {
            pcc_per_gene,
            pcc_mean,
            mse,
            mae,
            n_spots: pred.nrows(),
            n_genes: pred.ncols(),
            config_hash: config_hash.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }
}

/// Anything that maps a slide to one prediction row per spot.
pub trait SpotPredictor {
    fn predict_slide(&self, slide: &SlideRecord) -> Result<Matrix>;
}

pub struct CheckpointPredictor<'a> {
    pub checkpoint: &'a Checkpoint,
    pub stage: PredictStage,
}

impl SpotPredictor for CheckpointPredictor<'_> {
    fn predict_slide(&self, slide: &SlideRecord) -> Result<Matrix> {
        self.checkpoint.model.predict_slide(slide, self.stage)
    }
}

/// Stacked predictions and targets of one split, in slide then spot order.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitPredictions {
    pub pred: Matrix,
    pub truth: Matrix,
    /// `(slide_id, spot_id)` per row.
    pub spots: Vec<(String, String)>,
}

pub fn predict_split(predictor: &dyn SpotPredictor, bundle: &DatasetBundle, split: Split) -> Result<SplitPredictions> {
    let slides: Vec<&SlideRecord> = bundle.slides_in(split).collect();
    let n: usize = slides.iter().map(|s| s.spots.len()).sum();
    if n == 0 {
        return Err(config_err(format!("the {split:?} split has no spots")));
    }
    let g = bundle.n_genes();
    let mut pred = Array2::zeros((n, g));
    let mut truth = Array2::zeros((n, g));
    let mut spots = Vec::with_capacity(n);
    let mut r = 0;
    for slide in slides {
        let p = predictor.predict_slide(slide)?;
        if p.dim() != (slide.spots.len(), g) {
            return Err(shape_err(format!(
                "predictor returned {:?} for {} spots × {g} genes",
                p.dim(),
                slide.spots.len()
            )));
        }
        for (i, spot) in slide.spots.iter().enumerate() {
            pred.row_mut(r).assign(&p.row(i));
            truth.row_mut(r).assign(&ndarray::aview1(&spot.expression));
            spots.push((slide.slide_id.clone(), spot.spot_id.clone()));
            r += 1;
        }
    }
    Ok(SplitPredictions { pred, truth, spots })
}

pub fn evaluate_with(predictor: &dyn SpotPredictor, bundle: &DatasetBundle, split: Split, config_hash: &str) -> Result<MetricsReport> {
    let p = predict_split(predictor, bundle, split)?;
    MetricsReport::from_predictions(&p.pred, &p.truth, config_hash)
}

/// Test-split metrics of a checkpoint. Stage-1 checkpoints are only
/// accepted with `allow_stage1` and are scored with the phase-1 head.
pub fn evaluate_model(checkpoint: &Checkpoint, bundle: &DatasetBundle, allow_stage1: bool) -> Result<MetricsReport> {
    let stage = match (checkpoint.stage, allow_stage1) {
        (Stage::Stage2, _) => PredictStage::Full,
        (Stage::Stage1, true) => PredictStage::Stage1,
        (Stage::Stage1, false) => {
            return Err(config_err("stage-1 checkpoint given; pass the stage-1 flag to score its phase-1 head"));
        }
    };
    evaluate_stage(checkpoint, bundle, stage, Split::Test)
}

pub fn evaluate_stage(checkpoint: &Checkpoint, bundle: &DatasetBundle, stage: PredictStage, split: Split) -> Result<MetricsReport> {
    if checkpoint.gene_names != bundle.gene_names {
        return Err(config_err("checkpoint genes differ from the dataset genes"));
    }
    let predictor = CheckpointPredictor { checkpoint, stage };
    evaluate_with(&predictor, bundle, split, &checkpoint.config_hash())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub stage1: MetricsReport,
    pub stage2: MetricsReport,
}

/// Scores a stage-2 checkpoint and its own (frozen) phase-1 head on the test split.
pub fn compare_stages(checkpoint: &Checkpoint, bundle: &DatasetBundle) -> Result<CompareReport> {
    if checkpoint.stage != Stage::Stage2 {
        return Err(config_err("compare mode needs a stage-2 checkpoint"));
    }
    Ok(CompareReport {
        stage1: evaluate_stage(checkpoint, bundle, PredictStage::Stage1, Split::Test)?,
        stage2: evaluate_stage(checkpoint, bundle, PredictStage::Full, Split::Test)?,
    })
}

pub const PALETTE: [[u8; 3]; 12] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
    [0, 0, 128],
    [128, 128, 0],
];

const MAX_MAP_SIDE: f64 = 1024.0;

/// K-means over predicted expression, drawn as one filled disc per spot at
/// its `(x, y)` center. Returns the per-spot labels.
pub fn render_cluster_map(pred: &Matrix, centers: &Matrix, k: usize, seed: u64, out: &Path) -> Result<Vec<usize>> {
    if centers.dim() != (pred.nrows(), 2) {
        return Err(shape_err(format!("expected {}×2 centers", pred.nrows())));
    }
    let labels = fit_kmeans(pred, k, seed)?.assignments;
    let max_x = centers.column(0).fold(0.0f64, |a, &b| a.max(b));
    let max_y = centers.column(1).fold(0.0f64, |a, &b| a.max(b));
    let mut nn = f64::INFINITY;
    for i in 0..centers.nrows() {
        for j in 0..i {
            let d = (centers[[i, 0]] - centers[[j, 0]]).hypot(centers[[i, 1]] - centers[[j, 1]]);
            if d > 0.0 {
                nn = nn.min(d);
            }
        }
    }
    let scale = (MAX_MAP_SIDE / max_x.max(max_y).max(1.0)).min(1.0);
    let radius = if nn.is_finite() { (0.45 * nn * scale).max(1.0) } else { 4.0 };
    let w = ((max_x * scale) + radius).ceil() as u32 + 2;
    let h = ((max_y * scale) + radius).ceil() as u32 + 2;
    let mut img = image::RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]));
    let r = radius.ceil() as i64;
    for (i, &label) in labels.iter().enumerate() {
        let (cx, cy) = (centers[[i, 0]] * scale, centers[[i, 1]] * scale);
        for dy in -r..=r {
            for dx in -r..=r {
                if ((dx * dx + dy * dy) as f64) > radius * radius {
                    continue;
                }
                let (px, py) = (cx.round() as i64 + dx, cy.round() as i64 + dy);
                if px >= 0 && py >= 0 && (px as u32) < w && (py as u32) < h {
                    img.put_pixel(px as u32, py as u32, image::Rgb(PALETTE[label % PALETTE.len()]));
                }
            }
        }
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    img.save_with_format(out, image::ImageFormat::Png)?;
    Ok(labels)
}

pub fn write_labels(spot_ids: &[String], labels: &[usize], out: &Path) -> Result<()> {
    let mut s = String::from("spot_id\tlabel\n");
    for (id, l) in spot_ids.iter().zip(labels) {
        writeln!(s, "{id}\t{l}").expect("string write");
    }
    fs::write(out, s)?;
    Ok(())
}

/// Adjusted Rand index between two labelings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = Array2::<f64>::zeros((ka, kb));
    for (&x, &y) in a.iter().zip(b) {
        table[[x, y]] += 1.0;
    }
    let c2 = |n: f64| n * (n - 1.0) / 2.0;
    let index: f64 = table.iter().map(|&n| c2(n)).sum();
    let rows: f64 = table.sum_axis(Axis(1)).iter().map(|&n| c2(n)).sum();
    let cols: f64 = table.sum_axis(Axis(0)).iter().map(|&n| c2(n)).sum();
    let expected = rows * cols / c2(a.len() as f64);
    let max = 0.5 * (rows + cols);
    if max == expected {
        1.0
    } else {
        (index - expected) / (max - expected)
    }
}
