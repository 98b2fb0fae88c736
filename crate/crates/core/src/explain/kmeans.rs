use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Background;
use crate::error::{Error, Result};

pub const MAX_LLOYD_ITERATIONS: usize = 100;

#[derive(Debug, Clone)]
pub struct KMeans {
    pub background: Background,
    pub assignments: Vec<usize>,
    /// Inertia after each assignment step, then once more after the final update.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeans {
    pub fn inertia(&self) -> f64 {
        *self.inertia_trace.last().unwrap_or(&0.0)
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn plus_plus(points: &ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut centroids = Array2::zeros((k, points.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = points.rows().into_iter().map(|p| sq_dist(p, points.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            // Guard against the float walk ending on an already-chosen point.
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&d| d > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, p) in points.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centroids.row(c)));
        }
    }
    centroids
}

fn assign(points: &ArrayView2<f64>, centroids: &Array2<f64>, labels: &mut [usize]) -> (bool, f64) {
    let mut changed = false;
    let mut inertia = 0.0;
    for (i, p) in points.rows().into_iter().enumerate() {
        let (mut best, mut best_d) = (0, f64::INFINITY);
        for (c, centroid) in centroids.rows().into_iter().enumerate() {
            let d = sq_dist(p, centroid);
            if d < best_d {
                best = c;
                best_d = d;
            }
        }
        if labels[i] != best {
            labels[i] = best;
            changed = true;
        }
        inertia += best_d;
    }
    (changed, inertia)
}

fn total_inertia(points: &ArrayView2<f64>, centroids: &Array2<f64>, labels: &[usize]) -> f64 {
    points
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(p, &c)| sq_dist(p, centroids.row(c)))
        .sum()
}

/// Move the farthest point of a multi-member cluster into each empty cluster,
/// then set every centroid to the mean of its members.
fn update(points: &ArrayView2<f64>, centroids: &mut Array2<f64>, labels: &mut [usize]) {
    let k = centroids.nrows();
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    for e in 0..k {
        if counts[e] > 0 {
            continue;
        }
        let far = points
            .rows()
            .into_iter()
            .enumerate()
            .filter(|(i, _)| counts[labels[*i]] > 1)
            .map(|(i, p)| (i, sq_dist(p, centroids.row(labels[i]))))
            .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            });
        if let Some((i, _)) = far {
            counts[labels[i]] -= 1;
            labels[i] = e;
            counts[e] = 1;
            centroids.row_mut(e).assign(&points.row(i));
        }
    }
    let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
    for (p, &l) in points.rows().into_iter().zip(labels.iter()) {
        let mut row = sums.row_mut(l);
        row += &p;
    }
    for c in 0..k {
        if counts[c] > 0 {
            let mean = &sums.row(c) / counts[c] as f64;
            centroids.row_mut(c).assign(&mean);
        }
    }
}

/// k-means++ seeding followed by Lloyd iterations until the assignment is a
/// fixpoint or [`MAX_LLOYD_ITERATIONS`] is reached.
pub fn kmeans(points: ArrayView2<f64>, k: usize, seed: u64) -> Result<KMeans> {
    let n = points.nrows();
    if k == 0 || n < k {
        return Err(Error::TooFewPoints { n, k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus(&points, k, &mut rng);
    let mut labels = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_LLOYD_ITERATIONS {
        iterations += 1;
        let (changed, inertia) = assign(&points, &centroids, &mut labels);
        trace.push(inertia);
        if !changed {
            converged = true;
            break;
        }
        update(&points, &mut centroids, &mut labels);
    }
    if !converged {
        update(&points, &mut centroids, &mut labels);
        trace.push(total_inertia(&points, &centroids, &labels));
    }
    let mut counts = vec![0usize; k];
    for &l in &labels {
        counts[l] += 1;
    }
    // Clusters can only stay empty when the data has fewer than k distinct points.
    let keep: Vec<usize> = (0..k).filter(|&c| counts[c] > 0).collect();
    let centroids = centroids.select(ndarray::Axis(0), &keep);
    let weights = keep.iter().map(|&c| counts[c] as f64 / n as f64).collect();
    if keep.len() < k {
        let remap: std::collections::HashMap<usize, usize> = keep.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        for l in &mut labels {
            *l = remap[l];
        }
    }
    Ok(KMeans {
        background: Background { centroids, weights },
        assignments: labels,
        inertia_trace: trace,
        iterations,
        converged,
    })
}
