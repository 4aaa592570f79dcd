use serde::{Deserialize, Serialize};

use crate::error::{config_err, MmapError, Result};
use crate::params::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneSelection {
    /// Kept column indices, highest variance first.
    pub kept: Vec<usize>,
    pub genes_total: usize,
    pub genes_after_hvg: usize,
    pub genes_after_min_spots: usize,
}

fn log1p_variance(counts: &Matrix, gene: usize) -> f64 {
    let col = counts.column(gene);
    let n = col.len() as f64;
    let mean = col.iter().map(|&c| c.ln_1p()).sum::<f64>() / n;
    col.iter().map(|&c| (c.ln_1p() - mean).powi(2)).sum::<f64>() / n
}

/// Ranks genes by the variance of log1p counts across all spots, keeps the
/// top `n_hvg` (ties to the lower index), then drops genes with a nonzero
/// count in fewer than `min_spots` spots. `n_hvg = None` skips the ranking.
pub fn select_genes(counts: &Matrix, gene_names: &[String], n_hvg: Option<usize>, min_spots: usize) -> Result<GeneSelection> {
    let total = counts.ncols();
    if gene_names.len() != total {
        return Err(config_err(format!("{} gene names for {total} count columns", gene_names.len())));
    }
    if counts.iter().any(|&c| c < 0.0 || !c.is_finite()) {
        return Err(MmapError::Domain("counts must be finite and non-negative".into()));
    }
    let ranked: Vec<usize> = match n_hvg {
        None => (0..total).collect(),
        Some(0) => return Err(config_err("n_hvg must be >= 1")),
        Some(n) if n > total => return Err(config_err(format!("n_hvg={n} exceeds the {total} available genes"))),
        Some(n) => {
            let var: Vec<f64> = (0..total).map(|j| log1p_variance(counts, j)).collect();
            let mut order: Vec<usize> = (0..total).collect();
            order.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
            order.truncate(n);
            order
        }
    };
    let after_hvg = ranked.len();
    let kept: Vec<usize> = ranked
        .into_iter()
        .filter(|&j| counts.column(j).iter().filter(|&&c| c > 0.0).count() >= min_spots)
        .collect();
    Ok(GeneSelection {
        genes_total: total,
        genes_after_hvg: after_hvg,
        genes_after_min_spots: kept.len(),
        kept,
    })
}

/// Element-wise `ln(1 + x)`.
pub fn normalize_expression(counts: &Matrix) -> Result<Matrix> {
    if let Some(bad) = counts.iter().find(|&&c| c < 0.0 || c.is_nan()) {
        return Err(MmapError::Domain(format!("cannot log-normalize count {bad}")));
    }
    Ok(counts.mapv(f64::ln_1p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::f64::consts::E;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("g{i}")).collect()
    }

    #[test]
    fn ties_break_by_index() {
        // log1p values per gene: constant, {0, ln 4}, {0, ln 4}.
        let counts = array![[1.0, 0.0, 3.0], [1.0, 3.0, 0.0]];
        let sel = select_genes(&counts, &names(3), Some(2), 0).unwrap();
        assert_eq!(sel.kept, vec![1, 2]);
    }

    #[test]
    fn ranking_and_min_spot_filter() {
        let counts = array![[0.0, 9.0, 1.0, 0.0], [0.0, 0.0, 2.0, 50.0], [4.0, 0.0, 3.0, 0.0]];
        let sel = select_genes(&counts, &names(4), Some(4), 0).unwrap();
        assert_eq!(sel.kept, vec![3, 1, 0, 2]);
        let sel = select_genes(&counts, &names(4), Some(3), 2).unwrap();
        assert_eq!(sel.kept, Vec::<usize>::new());
        let sel = select_genes(&counts, &names(4), None, 3).unwrap();
        assert_eq!(sel.kept, vec![2]);
        assert_eq!((sel.genes_after_hvg, sel.genes_after_min_spots), (4, 1));
    }

    #[test]
    fn all_genes_when_n_hvg_is_gene_count() {
        let counts = array![[1.0, 5.0, 2.0], [7.0, 0.0, 2.0]];
        let mut kept = select_genes(&counts, &names(3), Some(3), 0).unwrap().kept;
        kept.sort();
        assert_eq!(kept, vec![0, 1, 2]);
        assert!(matches!(select_genes(&counts, &names(3), Some(4), 0), Err(MmapError::Config(_))));
    }

    #[test]
    fn log1p_examples() {
        let m = array![[0.0, E - 1.0], [E * E - 1.0, 0.0]];
        let n = normalize_expression(&m).unwrap();
        let want = array![[0.0, 1.0], [2.0, 0.0]];
        for (a, b) in n.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(normalize_expression(&array![[-1.0]]), Err(MmapError::Domain(_))));
    }
}
