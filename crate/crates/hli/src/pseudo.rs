//! Pseudo-label generation: K-means over L2-normalized embeddings.
//!
//! Lloyd's algorithm with k-means++ seeding. Iterates to an assignment
//! fixpoint (or a max-iteration cap); empty clusters are re-seeded to the
//! point farthest from its currently assigned centroid.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::TargetView;
use crate::error::{HliError, Result};

#[derive(Debug, Clone)]
pub struct PseudoLabeling {
    pub assignments: Vec<usize>,
    /// M_t x D cluster centers.
    pub centroids: Array2<f64>,
    /// Sum of squared distances of each point to its centroid.
    pub inertia: f64,
    pub epoch: usize,
}

fn l2_normalize_rows(x: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    out
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
}

/// K-means++ seeding from the given RNG.
fn kmeans_pp_init(points: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (n, d) = points.dim();
    let mut centroids = Array2::<f64>::zeros((k, d));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut dist2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i).as_slice().unwrap(), centroids.row(0).as_slice().unwrap()))
        .collect();
    for c in 1..k {
        let total: f64 = dist2.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d2) in dist2.iter().enumerate() {
                r -= d2;
                if r <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        centroids.row_mut(c).assign(&points.row(next));
        for i in 0..n {
            let d2 = sq_dist(
                points.row(i).as_slice().unwrap(),
                centroids.row(c).as_slice().unwrap(),
            );
            if d2 < dist2[i] {
                dist2[i] = d2;
            }
        }
    }
    centroids
}

pub const KMEANS_MAX_ITERS: usize = 100;

/// Cluster target embeddings into `m_t` pseudo identities.
pub fn cluster_targets(embeddings: &ArrayView2<f64>, m_t: usize, seed: u64) -> Result<PseudoLabeling> {
    let (n, _d) = embeddings.dim();
    if m_t < 1 || n < m_t {
        return Err(HliError::Clustering(format!(
            "need N >= M_t >= 1, got N={n}, M_t={m_t}"
        )));
    }
    if embeddings.iter().any(|v| !v.is_finite()) {
        return Err(HliError::Clustering("non-finite embeddings".into()));
    }
    let points = l2_normalize_rows(embeddings);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(&points, m_t, &mut rng);
    let mut assignments = vec![usize::MAX; n];

    for _ in 0..KMEANS_MAX_ITERS {
        // Assignment step.
        let mut changed = false;
        for i in 0..n {
            let p = points.row(i);
            let p = p.as_slice().unwrap();
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..m_t {
                let d2 = sq_dist(p, centroids.row(c).as_slice().unwrap());
                if d2 < best_d {
                    best_d = d2;
                    best = c;
                }
            }
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
        }

        // Update step.
        let mut counts = vec![0usize; m_t];
        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        for i in 0..n {
            counts[assignments[i]] += 1;
            let mut row = sums.row_mut(assignments[i]);
            row += &points.row(i);
        }
        for c in 0..m_t {
            if counts[c] > 0 {
                let mut row = sums.row_mut(c);
                row.mapv_inplace(|v| v / counts[c] as f64);
                centroids.row_mut(c).assign(&sums.row(c));
            } else {
                // Re-seed to the point farthest from its own centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(
                            points.row(a).as_slice().unwrap(),
                            centroids.row(assignments[a]).as_slice().unwrap(),
                        );
                        let db = sq_dist(
                            points.row(b).as_slice().unwrap(),
                            centroids.row(assignments[b]).as_slice().unwrap(),
                        );
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centroids.row_mut(c).assign(&points.row(far));
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let inertia: f64 = (0..n)
        .map(|i| {
            sq_dist(
                points.row(i).as_slice().unwrap(),
                centroids.row(assignments[i]).as_slice().unwrap(),
            )
        })
        .sum();
    Ok(PseudoLabeling {
        assignments,
        centroids,
        inertia,
        epoch: 0,
    })
}

/// Overwrite the pseudo labels on a target view from a labeling.
pub fn relabel_dataset(targets: &mut TargetView, labeling: &PseudoLabeling) -> Result<()> {
    if targets.len() != labeling.assignments.len() {
        return Err(HliError::ShapeMismatch(format!(
            "{} assignments for {} target samples",
            labeling.assignments.len(),
            targets.len()
        )));
    }
    targets.set_pseudo_labels(labeling.assignments.clone())
}
