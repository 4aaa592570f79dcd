//! The `mmap` command line: dataset preparation, both training stages, bank
//! building, evaluation, cluster maps and the ablation grids.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use mmap_core::eval::{compare_stages, evaluate_model, render_cluster_map, write_labels, CheckpointPredictor, SpotPredictor};
use mmap_core::globalfusion::Aggregation;
use mmap_core::ingest::{generate_synthetic, load_dataset, write_dataset, DatasetBundle, Split, SynthPattern};
use mmap_core::model::PredictStage;
use mmap_core::protobank::{NeighborStrategy, PrototypeBank};
use mmap_core::train::{banks_for_slides, deterministic_from_env, run_stage1, run_stage2, Checkpoint, Stage, TrainReport};

use config::{RunConfig, RunManifest};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.json";
pub const COMPARE_FILE: &str = "compare.json";
pub const CLUSTER_MAP_FILE: &str = "cluster_map.png";
pub const LABELS_FILE: &str = "cluster_labels.tsv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const TRAIN_LOG_FILE: &str = "train_log.json";
pub const SUMMARY_FILE: &str = "dataset_summary.json";
pub const BANK_DIR: &str = "banks";

#[derive(Parser, Debug)]
#[command(name = "mmap", version, about = "Multi-magnification spatial gene expression prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load and filter a dataset directory and report its summary.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write a synthetic dataset whose expression is a known function of colour.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        slides: Option<usize>,
        #[arg(long)]
        spots: Option<usize>,
        #[arg(long)]
        genes: Option<usize>,
        #[arg(long)]
        patch: Option<usize>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long, value_enum)]
        pattern: Option<PatternArg>,
        #[arg(long)]
        test_slides: Option<usize>,
    },
    /// Stage 1: encoder, magnification fusion and the phase-1 head.
    Train1 {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        data: PathBuf,
    },
    /// Build prototype banks from a checkpoint's phase-1 embeddings.
    Bank {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// Stage 2: global fusion and ensemble heads on a frozen stage-1 model.
    Train2 {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory written by `bank`; banks are built when omitted.
        #[arg(long)]
        banks: Option<PathBuf>,
        #[arg(long)]
        neighbors: Option<NeighborStrategy>,
        #[arg(long, value_enum)]
        aggregation: Option<AggregationArg>,
    },
    /// Test-split metrics of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Accept a stage-1 checkpoint and score its phase-1 head.
        #[arg(long)]
        stage1: bool,
        /// Also score the phase-1 head of a stage-2 checkpoint.
        #[arg(long)]
        compare: bool,
    },
    /// Cluster predicted expression of one slide and draw the cluster map.
    Viz {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the first test slide.
        #[arg(long)]
        slide: Option<String>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Stage-2 ablation grid over neighbor counts or aggregation strategies.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Shared stage-1 checkpoint; trained from the config when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(clap::Args, Debug, Clone)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    deterministic: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PatternArg {
    Random,
    Blobs,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AggregationArg {
    Mean,
    Sum,
    CrossAttn,
    CrossAttnPos,
}

impl From<AggregationArg> for Aggregation {
    fn from(a: AggregationArg) -> Self {
        match a {
            AggregationArg::Mean => Aggregation::Mean,
            AggregationArg::Sum => Aggregation::Sum,
            AggregationArg::CrossAttn => Aggregation::CrossAttn,
            AggregationArg::CrossAttnPos => Aggregation::CrossAttnPos,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum AxisArg {
    Neighbors,
    Aggregation,
}

pub const NEIGHBOR_GRID: [NeighborStrategy; 5] = [
    NeighborStrategy::Fixed(4),
    NeighborStrategy::Fixed(8),
    NeighborStrategy::Fixed(16),
    NeighborStrategy::Fixed(32),
    NeighborStrategy::Adaptive,
];

pub const AGGREGATION_GRID: [Aggregation; 4] = [
    Aggregation::Mean,
    Aggregation::Sum,
    Aggregation::CrossAttn,
    Aggregation::CrossAttnPos,
];

impl TrainFlags {
    fn apply(&self, cfg: &mut mmap_core::train::TrainConfig) {
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr_max {
            cfg.lr_max = v;
        }
        if let Some(v) = self.lr_min {
            cfg.lr_min = v;
        }
        if self.deterministic {
            cfg.deterministic = true;
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

struct Run {
    name: &'static str,
    common: Common,
    cfg: RunConfig,
    started_at: String,
}

impl Run {
    fn start(name: &'static str, common: Common) -> Result<Self> {
        let mut cfg = RunConfig::load(common.config.as_deref())?;
        if let Some(seed) = common.seed {
            cfg.set_seed(seed);
        }
        if deterministic_from_env() {
            cfg.stage1.deterministic = true;
            cfg.stage2.deterministic = true;
        }
        fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
        Ok(Self {
            name,
            common,
            cfg,
            started_at: now(),
        })
    }

    fn out(&self, file: &str) -> PathBuf {
        self.common.out.join(file)
    }

    fn finish(self) -> Result<()> {
        RunManifest {
            command: self.name.to_string(),
            args: std::env::args().collect(),
            config_path: self.common.config.clone(),
            config: serde_json::to_value(&self.cfg)?,
            seed: self.cfg.seed,
            out_dir: self.common.out.clone(),
            started_at: self.started_at,
            finished_at: now(),
        }
        .write()
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Ingest { common, data } => {
            let run = Run::start("ingest", common)?;
            let bundle = load_dataset(&data, &run.cfg.ingest)?;
            let summary = bundle.summary();
            println!(
                "{} slides, {} patients, {} spots, {} genes",
                summary.slides, summary.patients, summary.spots, summary.genes
            );
            write_json(&run.out(SUMMARY_FILE), &summary)?;
            run.finish()
        }
        Command::Synth {
            common,
            slides,
            spots,
            genes,
            patch,
            sigma,
            pattern,
            test_slides,
        } => {
            let mut run = Run::start("synth", common)?;
            let s = &mut run.cfg.synth;
            s.n_slides = slides.unwrap_or(s.n_slides);
            s.spots_per_slide = spots.unwrap_or(s.spots_per_slide);
            s.n_genes = genes.unwrap_or(s.n_genes);
            s.patch_size = patch.unwrap_or(s.patch_size);
            s.noise_sigma = sigma.unwrap_or(s.noise_sigma);
            s.n_test_slides = test_slides.unwrap_or(s.n_test_slides);
            if let Some(p) = pattern {
                s.pattern = match p {
                    PatternArg::Random => SynthPattern::Random,
                    PatternArg::Blobs => SynthPattern::Blobs,
                };
            }
            let bundle = generate_synthetic(&run.cfg.synth, run.cfg.seed)?;
            write_dataset(&bundle, &run.common.out)?;
            run.finish()
        }
        Command::Train1 { common, train, data } => {
            let mut run = Run::start("train1", common)?;
            train.apply(&mut run.cfg.stage1);
            let bundle = load_dataset(&data, &run.cfg.ingest)?;
            let (ckpt, report) = run_stage1(&bundle, &run.cfg.model, &run.cfg.stage1, &mut |_| {})?;
            save_training(&run, &ckpt, &report)?;
            run.finish()
        }
        Command::Bank {
            common,
            data,
            checkpoint,
            split,
        } => {
            let run = Run::start("bank", common)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let bundle = load_dataset(&data, &run.cfg.ingest)?;
            let split = match split {
                SplitArg::Train => Some(Split::Train),
                SplitArg::Test => Some(Split::Test),
                SplitArg::All => None,
            };
            let banks = banks_for_slides(&ckpt.model, &bundle, split)?;
            let dir = run.out(BANK_DIR);
            fs::create_dir_all(&dir)?;
            for bank in banks.values() {
                bank.save(&dir.join(format!("{}.bank", bank.slide_id)))?;
            }
            run.finish()
        }
        Command::Train2 {
            common,
            train,
            data,
            checkpoint,
            banks,
            neighbors,
            aggregation,
        } => {
            let mut run = Run::start("train2", common)?;
            train.apply(&mut run.cfg.stage2);
            let mut stage1 = load_stage1(&checkpoint)?;
            let global = &mut stage1.model.config.global;
            global.neighbors = neighbors.unwrap_or(global.neighbors);
            global.aggregation = aggregation.map_or(global.aggregation, Into::into);
            run.cfg.model = stage1.model.config.clone();
            let bundle = load_dataset(&data, &run.cfg.ingest)?;
            let banks = banks.as_deref().map(load_banks).transpose()?;
            let (ckpt, report) = run_stage2(&bundle, &stage1, &run.cfg.stage2, banks, &mut |_| {})?;
            save_training(&run, &ckpt, &report)?;
            run.finish()
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            stage1,
            compare,
        } => {
            let run = Run::start("eval", common)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let bundle = load_dataset(&data, &run.cfg.ingest)?;
            let report = evaluate_model(&ckpt, &bundle, stage1)?;
            println!("pcc_mean {:.4} mse {:.4} mae {:.4}", report.pcc_mean, report.mse, report.mae);
            fs::write(run.out(METRICS_FILE), report.to_json())?;
            if compare {
                write_json(&run.out(COMPARE_FILE), &compare_stages(&ckpt, &bundle)?)?;
            }
            run.finish()
        }
        Command::Viz {
            common,
            data,
            checkpoint,
            slide,
            k,
        } => {
            let run = Run::start("viz", common)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let bundle = load_dataset(&data, &run.cfg.ingest)?;
            let slide = match slide.or_else(|| run.cfg.viz.slide.clone()) {
                Some(id) => bundle.slide(&id).with_context(|| format!("no slide `{id}`"))?,
                None => bundle.slides_in(Split::Test).next().context("no test slide to draw")?,
            };
            let stage = match ckpt.stage {
                Stage::Stage1 => PredictStage::Stage1,
                Stage::Stage2 => PredictStage::Full,
            };
            let pred = CheckpointPredictor {
                checkpoint: &ckpt,
                stage,
            }
            .predict_slide(slide)?;
            let centers = ndarray::Array2::from_shape_fn((slide.spots.len(), 2), |(i, j)| {
                let c = slide.spots[i].center;
                if j == 0 { c.0 as f64 } else { c.1 as f64 }
            });
            let k = k.or(run.cfg.viz.k).unwrap_or(5);
            let labels = render_cluster_map(&pred, &centers, k, run.cfg.seed, &run.out(CLUSTER_MAP_FILE))?;
            let ids: Vec<String> = slide.spots.iter().map(|s| s.spot_id.clone()).collect();
            write_labels(&ids, &labels, &run.out(LABELS_FILE))?;
            run.finish()
        }
        Command::Ablate {
            common,
            train,
            data,
            axis,
            checkpoint,
        } => {
            let mut run = Run::start("ablate", common)?;
            train.apply(&mut run.cfg.stage2);
            let bundle = load_dataset(&data, &run.cfg.ingest)?;
            let stage1 = match checkpoint {
                Some(path) => load_stage1(&path)?,
                None => run_stage1(&bundle, &run.cfg.model, &run.cfg.stage1, &mut |_| {})?.0,
            };
            let table = ablate(&bundle, &stage1, &run.cfg.stage2, axis)?;
            fs::write(run.out(ABLATION_FILE), table)?;
            run.finish()
        }
    }
}

fn save_training(run: &Run, ckpt: &Checkpoint, report: &TrainReport) -> Result<()> {
    ckpt.save(&run.out(CHECKPOINT_FILE))?;
    write_json(&run.out(TRAIN_LOG_FILE), report)
}

fn load_stage1(path: &Path) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.stage != Stage::Stage1 {
        bail!("{} is not a stage-1 checkpoint", path.display());
    }
    Ok(ckpt)
}

fn load_banks(dir: &Path) -> Result<BTreeMap<String, PrototypeBank>> {
    if !dir.is_dir() {
        return Err(mmap_core::MmapError::FileNotFound(dir.to_path_buf()).into());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "bank"));
    paths.sort();
    let mut out = BTreeMap::new();
    for p in paths {
        let bank = PrototypeBank::load(&p)?;
        out.insert(bank.slide_id.clone(), bank);
    }
    Ok(out)
}

/// Trains one stage-2 variant per grid point from the shared stage-1 model
/// and returns the CSV table.
pub fn ablate(
    bundle: &DatasetBundle,
    stage1: &Checkpoint,
    train: &mmap_core::train::TrainConfig,
    axis: AxisArg,
) -> Result<String> {
    let variants: Vec<(String, Checkpoint)> = match axis {
        AxisArg::Neighbors => NEIGHBOR_GRID
            .iter()
            .map(|&n| {
                let mut c = stage1.clone();
                c.model.config.global.neighbors = n;
                (n.to_string(), c)
            })
            .collect(),
        AxisArg::Aggregation => AGGREGATION_GRID
            .iter()
            .map(|&a| {
                let mut c = stage1.clone();
                c.model.config.global.aggregation = a;
                (a.name().to_string(), c)
            })
            .collect(),
    };
    let mut csv = String::from("variant,pcc_mean,mse,mae\n");
    for (name, base) in variants {
        let (ckpt, _) = run_stage2(bundle, &base, train, None, &mut |_| {})?;
        let m = evaluate_model(&ckpt, bundle, false)?;
        log::info!("ablation {name}: pcc_mean {:.4} mse {:.4}", m.pcc_mean, m.mse);
        writeln!(csv, "{name},{},{},{}", m.pcc_mean, m.mse, m.mae).expect("string write");
    }
    Ok(csv)
}
