use std::fmt;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::kmeans::fit_kmeans_with;
use crate::container::Container;
use crate::error::{config_err, shape_err, MmapError, Result};
use crate::magfusion::cosine;
use crate::params::Matrix;

/// Spots per cluster before clamping to `[k_min, k_max]`.
pub const SPOTS_PER_CLUSTER: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub max_iter: usize,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            k_min: 32,
            k_max: 80,
            max_iter: super::kmeans::KMEANS_MAX_ITER,
        }
    }
}

/// How many prototypes each patch retrieves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "NeighborRepr", into = "NeighborRepr")]
pub enum NeighborStrategy {
    Fixed(usize),
    /// Half of the slide's cluster count.
    Adaptive,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum NeighborRepr {
    Count(usize),
    Name(String),
}

impl TryFrom<NeighborRepr> for NeighborStrategy {
    type Error = String;

    fn try_from(r: NeighborRepr) -> std::result::Result<Self, String> {
        match r {
            NeighborRepr::Count(0) => Err("neighbor count must be >= 1".into()),
            NeighborRepr::Count(n) => Ok(Self::Fixed(n)),
            NeighborRepr::Name(s) if s == "adaptive" => Ok(Self::Adaptive),
            NeighborRepr::Name(s) => s
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .map(Self::Fixed)
                .ok_or_else(|| format!("expected `adaptive` or a positive count, got `{s}`")),
        }
    }
}

impl From<NeighborStrategy> for NeighborRepr {
    fn from(s: NeighborStrategy) -> Self {
        match s {
            NeighborStrategy::Fixed(n) => NeighborRepr::Count(n),
            NeighborStrategy::Adaptive => NeighborRepr::Name("adaptive".into()),
        }
    }
}

impl std::str::FromStr for NeighborStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::try_from(NeighborRepr::Name(s.to_string()))
    }
}

impl fmt::Display for NeighborStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Fixed(n) => write!(f, "{n}"),
            Self::Adaptive => f.write_str("adaptive"),
        }
    }
}

/// `min(n, clamp(ceil(n / 8), k_min, k_max))`
pub fn choose_cluster_count(n_patches: usize, k_min: usize, k_max: usize) -> usize {
    n_patches.min(n_patches.div_ceil(SPOTS_PER_CLUSTER).clamp(k_min, k_max))
}

/// Adaptive: `max(1, round(K/2))` with halves rounded up. Fixed: `min(L, K)`.
pub fn choose_prototype_count(k: usize, strategy: NeighborStrategy) -> usize {
    match strategy {
        NeighborStrategy::Adaptive => ((0.5 * k as f64).round() as usize).max(1),
        NeighborStrategy::Fixed(l) => l.min(k),
    }
}

/// Per-slide cluster summary of phase-1 fused embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub slide_id: String,
    /// `K × d`
    pub centroids: Matrix,
    /// `K × 2` mean `(x, y)` pixel position of each cluster's members.
    pub centroid_centers: Matrix,
    pub member_counts: Vec<usize>,
    pub seed: u64,
    pub config_hash: String,
}

impl PrototypeBank {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "slide_id": self.slide_id,
            "k": self.k(),
            "seed": self.seed,
            "config_hash": self.config_hash,
        });
        let mut c = Container::new("bank", meta);
        self.push_arrays(&mut c, "");
        c
    }

    pub(crate) fn push_arrays(&self, c: &mut Container, prefix: &str) {
        c.push_matrix(format!("{prefix}centroids"), &self.centroids);
        c.push_matrix(format!("{prefix}centroid_centers"), &self.centroid_centers);
        c.push_i64(
            format!("{prefix}member_counts"),
            self.member_counts.iter().map(|&n| n as i64).collect(),
        );
    }

    pub(crate) fn from_arrays(c: &Container, prefix: &str, slide_id: String, seed: u64, config_hash: String) -> Result<Self> {
        let centroids = c.matrix(&format!("{prefix}centroids"))?;
        let centroid_centers = c.matrix(&format!("{prefix}centroid_centers"))?;
        let member_counts: Vec<usize> = c
            .i64s(&format!("{prefix}member_counts"))?
            .into_iter()
            .map(|n| usize::try_from(n).map_err(|_| MmapError::Checkpoint("negative member count".into())))
            .collect::<Result<_>>()?;
        if centroid_centers.dim() != (centroids.nrows(), 2) || member_counts.len() != centroids.nrows() {
            return Err(MmapError::Checkpoint(format!("bank `{slide_id}` arrays disagree in K")));
        }
        Ok(Self {
            slide_id,
            centroids,
            centroid_centers,
            member_counts,
            seed,
            config_hash,
        })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "bank" {
            return Err(MmapError::Checkpoint(format!("expected a bank file, found `{}`", c.kind)));
        }
        let slide_id = c.meta["slide_id"]
            .as_str()
            .ok_or_else(|| MmapError::Checkpoint("bank without slide_id".into()))?
            .to_string();
        let seed = c.meta["seed"].as_u64().unwrap_or_default();
        let config_hash = c.meta["config_hash"].as_str().unwrap_or_default().to_string();
        Self::from_arrays(c, "", slide_id, seed, config_hash)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// The `L` centroids closest to a query in cosine similarity.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    /// `L × d`
    pub prototypes: Matrix,
    pub indices: Vec<usize>,
    /// Descending.
    pub similarities: Vec<f64>,
}

impl PrototypeSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Ranks every centroid by cosine similarity to `f` (ties to the lower index)
/// and keeps the top `l`.
pub fn retrieve_prototypes(f: &[f64], bank: &PrototypeBank, l: usize) -> Result<PrototypeSet> {
    if l == 0 || l > bank.k() {
        return Err(config_err(format!("cannot retrieve {l} of {} prototypes", bank.k())));
    }
    if f.len() != bank.dim() {
        return Err(shape_err(format!("query length {} but bank dim {}", f.len(), bank.dim())));
    }
    let mut ranked: Vec<(usize, f64)> = bank
        .centroids
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, c)| (i, cosine(f, c.as_slice().expect("standard layout"))))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(l);
    let mut prototypes = Array2::zeros((l, bank.dim()));
    for (r, &(i, _)) in ranked.iter().enumerate() {
        prototypes.row_mut(r).assign(&bank.centroids.row(i));
    }
    Ok(PrototypeSet {
        prototypes,
        indices: ranked.iter().map(|r| r.0).collect(),
        similarities: ranked.iter().map(|r| r.1).collect(),
    })
}

/// Clusters one slide's embeddings (`N × d`) and records per-cluster spot
/// centers (`N × 2`, `(x, y)`) and member counts.
pub fn build_bank(
    embeddings: &Matrix,
    spot_centers: &Matrix,
    slide_id: &str,
    cfg: &BankConfig,
    seed: u64,
) -> Result<PrototypeBank> {
    let n = embeddings.nrows();
    if n == 0 {
        return Err(config_err(format!("slide `{slide_id}` has no embeddings")));
    }
    if spot_centers.dim() != (n, 2) {
        return Err(shape_err(format!(
            "expected {n}×2 spot centers for `{slide_id}`, got {:?}",
            spot_centers.dim()
        )));
    }
    if cfg.k_min == 0 || cfg.k_min > cfg.k_max {
        return Err(config_err(format!("invalid cluster range [{}, {}]", cfg.k_min, cfg.k_max)));
    }
    let k = choose_cluster_count(n, cfg.k_min, cfg.k_max);
    let fit = fit_kmeans_with(embeddings, k, seed, cfg.max_iter)?;
    let mut centers = Array2::<f64>::zeros((k, 2));
    let mut counts = vec![0usize; k];
    for (i, &a) in fit.assignments.iter().enumerate() {
        counts[a] += 1;
        centers[[a, 0]] += spot_centers[[i, 0]];
        centers[[a, 1]] += spot_centers[[i, 1]];
    }
    for (mut row, &c) in centers.rows_mut().into_iter().zip(&counts) {
        row /= c as f64;
    }
    Ok(PrototypeBank {
        slide_id: slide_id.to_string(),
        centroids: fit.centroids,
        centroid_centers: centers,
        member_counts: counts,
        seed,
        config_hash: crate::util::hash_json(cfg),
    })
}
