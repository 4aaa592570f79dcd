use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::genes::{normalize_expression, select_genes};
use super::synth::SyntheticMap;
use super::{split_by_slide, DatasetBundle, IngestConfig, PreprocessingLog, SlideRecord, Split, SpotRecord};
use crate::error::{MmapError, Result};

#[derive(Debug, Default, Serialize, Deserialize)]
struct Meta {
    patients: BTreeMap<String, String>,
    #[serde(default)]
    test_slides: Vec<String>,
}

const SYNTHETIC_FILE: &str = "synthetic.json";

fn parse_err(file: &Path, message: impl Into<String>) -> MmapError {
    MmapError::Parse {
        file: file.display().to_string(),
        message: message.into(),
    }
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(MmapError::DatasetLayout(format!("missing {}", path.display())))
    }
}

fn read_png(path: &Path) -> Result<Array3<u8>> {
    let img = image::ImageReader::open(path)?.with_guessed_format()?.decode()?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw()).expect("rgb buffer"))
}

fn write_png(path: &Path, image: &Array3<u8>) -> Result<()> {
    let (h, w, _) = image.dim();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, image.iter().copied().collect()).expect("rgb buffer");
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

struct CountTable {
    genes: Vec<String>,
    rows: HashMap<String, Vec<f64>>,
}

fn read_counts(path: &Path) -> Result<CountTable> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| parse_err(path, "empty counts file"))?;
    let genes: Vec<String> = header.split('\t').skip(1).map(|g| g.trim().to_string()).collect();
    let mut rows = HashMap::new();
    for (n, line) in lines.enumerate() {
        let mut fields = line.split('\t');
        let spot = fields.next().unwrap_or_default().trim().to_string();
        let values: Vec<f64> = fields
            .map(|v| {
                let v = v.trim();
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| parse_err(path, format!("line {}: `{v}` is not a count", n + 2)))
            })
            .collect::<Result<_>>()?;
        if values.len() != genes.len() {
            return Err(parse_err(
                path,
                format!("line {}: {} values for {} genes", n + 2, values.len(), genes.len()),
            ));
        }
        rows.insert(spot, values);
    }
    Ok(CountTable { genes, rows })
}

fn read_spots(path: &Path) -> Result<Vec<(String, i64, i64)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.iter().all(|f| f.is_empty()) || (n == 0 && fields[0] == "spot_id") {
            continue;
        }
        let [id, x, y] = fields[..] else {
            return Err(parse_err(path, format!("line {}: expected 3 columns", n + 1)));
        };
        let coord = |v: &str| v.parse::<i64>().map_err(|_| parse_err(path, format!("line {}: bad coordinate `{v}`", n + 1)));
        out.push((id.to_string(), coord(x)?, coord(y)?));
    }
    Ok(out)
}

fn slide_ids(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("slides");
    if !dir.is_dir() {
        return Err(MmapError::DatasetLayout(format!("missing {}", dir.display())));
    }
    let mut ids: Vec<String> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(MmapError::DatasetLayout(format!("no slide images in {}", dir.display())));
    }
    Ok(ids)
}

/// Reads, aligns and preprocesses a dataset directory.
pub fn load_dataset(root: &Path, cfg: &IngestConfig) -> Result<DatasetBundle> {
    let meta_path = require(root.join("meta.json"))?;
    let meta: Meta = serde_json::from_str(&fs::read_to_string(&meta_path)?)
        .map_err(|e| parse_err(&meta_path, e.to_string()))?;
    let half = cfg.patch_size / 2;

    let mut gene_index: HashMap<String, usize> = HashMap::new();
    let mut gene_names: Vec<String> = Vec::new();
    struct Pending {
        record: SlideRecord,
        counts: Vec<Vec<(usize, f64)>>,
    }
    let mut pending = Vec::new();
    let mut log = PreprocessingLog {
        n_hvg: cfg.n_hvg,
        min_spots: cfg.min_spots,
        ..PreprocessingLog::default()
    };

    for id in slide_ids(root)? {
        let image = read_png(&root.join("slides").join(format!("{id}.png")))?;
        let counts = read_counts(&require(root.join("counts").join(format!("{id}.tsv")))?)?;
        let coords = read_spots(&require(root.join("spots").join(format!("{id}.tsv")))?)?;
        let patient = meta
            .patients
            .get(&id)
            .cloned()
            .ok_or_else(|| MmapError::DatasetLayout(format!("meta.json has no patient for slide `{id}`")))?;
        let cols: Vec<usize> = counts
            .genes
            .iter()
            .map(|g| {
                *gene_index.entry(g.clone()).or_insert_with(|| {
                    gene_names.push(g.clone());
                    gene_names.len() - 1
                })
            })
            .collect();
        let (h, w, _) = image.dim();
        let mut spots = Vec::new();
        let mut slide_counts = Vec::new();
        let mut seen = BTreeSet::new();
        for (spot_id, x, y) in coords {
            let row = counts.rows.get(&spot_id).ok_or_else(|| {
                MmapError::Alignment(format!("spot `{spot_id}` of slide `{id}` has coordinates but no counts"))
            })?;
            seen.insert(spot_id.clone());
            log.spots_total += 1;
            let inside = x >= half as i64
                && y >= half as i64
                && x + half as i64 <= w as i64
                && y + half as i64 <= h as i64;
            if !inside {
                log.spots_skipped_boundary += 1;
                log::debug!("skipping boundary spot {spot_id} of {id}");
                continue;
            }
            slide_counts.push(cols.iter().copied().zip(row.iter().copied()).collect());
            spots.push(SpotRecord {
                spot_id,
                center: (x as usize, y as usize),
                expression: Vec::new(),
            });
        }
        log.spots_without_coordinates += counts.rows.keys().filter(|k| !seen.contains(*k)).count();
        pending.push(Pending {
            record: SlideRecord {
                slide_id: id,
                patient_id: patient,
                image,
                spots,
                split: Split::Train,
            },
            counts: slide_counts,
        });
    }
    if log.spots_skipped_boundary > 0 {
        log::info!("skipped {} spots whose patch leaves the image", log.spots_skipped_boundary);
    }

    let n_spots: usize = pending.iter().map(|p| p.counts.len()).sum();
    let mut all = Array2::<f64>::zeros((n_spots, gene_names.len()));
    for (r, row) in pending.iter().flat_map(|p| p.counts.iter()).enumerate() {
        for &(c, v) in row {
            all[[r, c]] = v;
        }
    }
    let selection = select_genes(&all, &gene_names, cfg.n_hvg, cfg.min_spots)?;
    log.genes_total = selection.genes_total;
    log.genes_after_hvg = selection.genes_after_hvg;
    log.genes_after_min_spots = selection.genes_after_min_spots;
    let kept = all.select(ndarray::Axis(1), &selection.kept);
    let expr = normalize_expression(&kept)?;

    let mut slides = Vec::with_capacity(pending.len());
    let mut r = 0;
    for mut p in pending {
        for spot in &mut p.record.spots {
            spot.expression = expr.row(r).to_vec();
            r += 1;
        }
        slides.push(p.record);
    }
    let synth_path = root.join(SYNTHETIC_FILE);
    if synth_path.is_file() {
        let map: SyntheticMap = serde_json::from_str(&fs::read_to_string(&synth_path)?)
            .map_err(|e| parse_err(&synth_path, e.to_string()))?;
        log.synthetic = Some(map);
    }
    let bundle = DatasetBundle {
        slides,
        gene_names: selection.kept.iter().map(|&j| gene_names[j].clone()).collect(),
        preprocessing_log: log,
    };
    let test: BTreeSet<String> = meta.test_slides.into_iter().collect();
    split_by_slide(bundle, &test)
}

/// Writes `bundle` in the layout read by [`load_dataset`]. Expression values
/// are converted back to integer counts with `round(expm1(x))`.
pub fn write_dataset(bundle: &DatasetBundle, root: &Path) -> Result<()> {
    for sub in ["slides", "counts", "spots"] {
        fs::create_dir_all(root.join(sub))?;
    }
    let mut meta = Meta::default();
    for slide in &bundle.slides {
        let id = &slide.slide_id;
        write_png(&root.join("slides").join(format!("{id}.png")), &slide.image)?;

        let mut counts = String::from("spot_id");
        for g in &bundle.gene_names {
            write!(counts, "\t{g}").expect("string write");
        }
        counts.push('\n');
        let mut spots = String::from("spot_id\tx_pixel\ty_pixel\n");
        for spot in &slide.spots {
            counts.push_str(&spot.spot_id);
            for &e in &spot.expression {
                write!(counts, "\t{}", e.exp_m1().round().max(0.0) as u64).expect("string write");
            }
            counts.push('\n');
            writeln!(spots, "{}\t{}\t{}", spot.spot_id, spot.center.0, spot.center.1).expect("string write");
        }
        fs::write(root.join("counts").join(format!("{id}.tsv")), counts)?;
        fs::write(root.join("spots").join(format!("{id}.tsv")), spots)?;
        meta.patients.insert(id.clone(), slide.patient_id.clone());
        if slide.split == Split::Test {
            meta.test_slides.push(id.clone());
        }
    }
    fs::write(root.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    if let Some(map) = &bundle.preprocessing_log.synthetic {
        fs::write(root.join(SYNTHETIC_FILE), serde_json::to_string_pretty(map)?)?;
    }
    Ok(())
}
