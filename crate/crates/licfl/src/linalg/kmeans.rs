//! Seeded k-means over matrix rows with k-means++ initialization.

use super::Matrix;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MAX_ITERS: usize = 300;

/// Clusters the rows of `points` into `k` groups.
///
/// Deterministic for a fixed seed: k-means++ seeding draws from a ChaCha
/// stream, nearest-centroid ties break toward the lowest centroid index, and
/// empty clusters are repaired by donating the point farthest from its
/// current centroid.
pub fn kmeans(points: &Matrix, k: usize, seed: u64) -> Result<Vec<usize>> {
    kmeans_trace(points, k, seed).map(|(labels, _)| labels)
}

/// Same as [`kmeans`] but also returns the clustering objective (sum of
/// squared distances to assigned centroids) after every iteration.
pub fn kmeans_trace(points: &Matrix, k: usize, seed: u64) -> Result<(Vec<usize>, Vec<f64>)> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::contract("kmeans requires k >= 1"));
    }
    if k > n {
        return Err(Error::contract(format!(
            "kmeans requires k <= number of rows, got k={k} with {n} rows"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seeds(points, k, &mut rng);
    let mut labels = vec![0usize; n];
    let mut objective_trace = Vec::new();

    for _ in 0..MAX_ITERS {
        let prev = labels.clone();

        // Assignment; strict `<` keeps ties on the lowest centroid index.
        for (i, label) in labels.iter_mut().enumerate() {
            let mut best = f64::INFINITY;
            let mut best_j = 0;
            for (j, c) in centroids.iter().enumerate() {
                let d = sq_distance(points.row(i), c);
                if d < best {
                    best = d;
                    best_j = j;
                }
            }
            *label = best_j;
        }

        repair_empty_clusters(points, &centroids, &mut labels, k);

        // Centroid update.
        for (j, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == j).collect();
            debug_assert!(!members.is_empty());
            for v in centroid.iter_mut() {
                *v = 0.0;
            }
            for &i in &members {
                for (cv, pv) in centroid.iter_mut().zip(points.row(i)) {
                    *cv += pv;
                }
            }
            let inv = 1.0 / members.len() as f64;
            for v in centroid.iter_mut() {
                *v *= inv;
            }
        }

        objective_trace.push(
            (0..n)
                .map(|i| sq_distance(points.row(i), &centroids[labels[i]]))
                .sum(),
        );

        if labels == prev {
            break;
        }
    }

    Ok((labels, objective_trace))
}

/// k-means++: first seed uniform, then each next seed with probability
/// proportional to the squared distance to the nearest chosen seed.
fn plus_plus_seeds(points: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.rows();
    let first = rng.gen_range(0..n);
    let mut chosen = vec![first];
    let mut centroids = vec![points.row(first).to_vec()];

    while centroids.len() < k {
        let d2: Vec<f64> = (0..n)
            .map(|i| {
                centroids
                    .iter()
                    .map(|c| sq_distance(points.row(i), c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            // All remaining points coincide with a seed; take the lowest
            // index not yet chosen.
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(idx);
        centroids.push(points.row(idx).to_vec());
    }
    centroids
}

/// Moves the point farthest from its centroid into each empty cluster.
/// Donor clusters must keep at least one member; ties pick the lowest
/// point index.
fn repair_empty_clusters(
    points: &Matrix,
    centroids: &[Vec<f64>],
    labels: &mut [usize],
    k: usize,
) {
    let n = labels.len();
    for empty in 0..k {
        if labels.iter().any(|&l| l == empty) {
            continue;
        }
        let mut counts = vec![0usize; k];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let mut farthest: Option<(usize, f64)> = None;
        for i in 0..n {
            if counts[labels[i]] < 2 {
                continue;
            }
            let d = sq_distance(points.row(i), &centroids[labels[i]]);
            let better = match farthest {
                None => true,
                Some((_, best)) => d > best,
            };
            if better {
                farthest = Some((i, d));
            }
        }
        if let Some((i, _)) = farthest {
            labels[i] = empty;
        }
    }
}

fn sq_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
