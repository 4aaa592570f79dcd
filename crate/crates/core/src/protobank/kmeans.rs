//! Lloyd's k-means with k-means++ seeding.

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Result};
use crate::params::Matrix;

pub const KMEANS_MAX_ITER: usize = 300;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
    /// Inertia after every centroid update.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the k-means++ seeds. The first seed is uniform; each further
/// seed is drawn with probability proportional to its squared distance to
/// the nearest seed so far. If every remaining point coincides with a seed,
/// the lowest unused index is taken.
pub fn kmeans_plus_plus(points: &Matrix, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = points.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.rows().into_iter().map(|p| sq_dist(p, points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut cum = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                cum += w;
                if w > 0.0 && cum > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` just above the final partial sum.
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("positive total"))
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("n >= k")
        };
        chosen.push(next);
        for (i, p) in points.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points.row(next)));
        }
    }
    chosen
}

/// Seed centroids exactly as [`fit_kmeans`] draws them for `seed`.
pub fn kmeans_plus_plus_init(points: &Matrix, k: usize, seed: u64) -> Result<Matrix> {
    check_args(points, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = kmeans_plus_plus(points, k, &mut rng);
    Ok(select_rows(points, &idx))
}

fn select_rows(points: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Array2::zeros((idx.len(), points.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&points.row(i));
    }
    out
}

fn check_args(points: &Matrix, k: usize) -> Result<()> {
    if k == 0 {
        return Err(config_err("k-means needs k >= 1"));
    }
    if points.nrows() < k {
        return Err(config_err(format!("k-means with k={k} on only {} points", points.nrows())));
    }
    Ok(())
}

fn nearest(p: ArrayView1<f64>, centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(p, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn inertia(points: &Matrix, centroids: &Matrix, assignments: &[usize]) -> f64 {
    points
        .rows()
        .into_iter()
        .zip(assignments)
        .map(|(p, &a)| sq_dist(p, centroids.row(a)))
        .sum()
}

/// Recomputes centroids as member means. An empty cluster takes the point
/// farthest from its own (freshly updated) centroid among clusters with more
/// than one member; ties go to the lowest point index.
fn update_centroids(points: &Matrix, centroids: &mut Matrix, assignments: &mut [usize]) {
    let k = centroids.nrows();
    let mean_of = |assignments: &[usize], c: usize| {
        let mut sum = ndarray::Array1::<f64>::zeros(points.ncols());
        let mut n = 0usize;
        for (p, &a) in points.rows().into_iter().zip(assignments.iter()) {
            if a == c {
                sum += &p;
                n += 1;
            }
        }
        (sum, n)
    };
    let mut counts = vec![0usize; k];
    for c in 0..k {
        let (sum, n) = mean_of(assignments, c);
        counts[c] = n;
        if n > 0 {
            centroids.row_mut(c).assign(&(sum / n as f64));
        }
    }
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let mut far = None::<(usize, f64)>;
        for (i, p) in points.rows().into_iter().enumerate() {
            let a = assignments[i];
            if counts[a] <= 1 {
                continue;
            }
            let d = sq_dist(p, centroids.row(a));
            if far.is_none_or(|(_, best)| d > best) {
                far = Some((i, d));
            }
        }
        let Some((i, _)) = far else { break };
        let donor = assignments[i];
        assignments[i] = empty;
        counts[donor] -= 1;
        counts[empty] = 1;
        centroids.row_mut(empty).assign(&points.row(i));
        let (sum, n) = mean_of(assignments, donor);
        centroids.row_mut(donor).assign(&(sum / n as f64));
    }
}

/// Euclidean k-means: k-means++ seeding from `seed`, then Lloyd iterations
/// until assignments stop changing or `max_iter` is reached.
pub fn fit_kmeans_with(points: &Matrix, k: usize, seed: u64, max_iter: usize) -> Result<KMeansFit> {
    let mut centroids = kmeans_plus_plus_init(points, k, seed)?;
    let n = points.nrows();
    let mut assignments = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter {
        let next: Vec<usize> = points.rows().into_iter().map(|p| nearest(p, &centroids).0).collect();
        if next == assignments {
            break;
        }
        assignments = next;
        iterations += 1;
        update_centroids(points, &mut centroids, &mut assignments);
        trace.push(inertia(points, &centroids, &assignments));
    }
    Ok(KMeansFit {
        inertia: inertia(points, &centroids, &assignments),
        centroids,
        assignments,
        inertia_trace: trace,
        iterations,
    })
}

pub fn fit_kmeans(points: &Matrix, k: usize, seed: u64) -> Result<KMeansFit> {
    fit_kmeans_with(points, k, seed, KMEANS_MAX_ITER)
}
