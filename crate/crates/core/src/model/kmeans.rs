//! Lloyd's k-means with k-means++ seeding and restarts. Used on the
//! autoencoder latents to produce the cluster task's assignments.

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::seeding::derive_seed;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_RESTARTS: usize = 10;
const MAX_ITERS: usize = 300;
const SHIFT_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct KMeansResult {
    /// Cluster index per input row.
    pub assignments: Vec<usize>,
    /// k x d centroid matrix.
    pub centroids: Matrix,
    /// Sum of squared distances to assigned centroids.
    pub inertia: f64,
    /// Lloyd iterations run by the winning restart.
    pub n_iters: usize,
    /// Inertia after each assignment step of the winning restart.
    pub inertia_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Distance to the nearest centroid and its index, lowest index on ties.
fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(data: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = data.rows();
    let mut centroids = Matrix::zeros(k, data.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(data.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), data.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(data.row(pick));
        for i in 0..n {
            let d = sq_dist(data.row(i), data.row(pick));
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

fn lloyd(data: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> KMeansResult {
    let n = data.rows();
    let d = data.cols();
    let mut centroids = plus_plus_init(data, k, rng);
    let mut assignments = vec![0usize; n];
    let mut trace = Vec::new();
    let mut iters = 0;
    for _ in 0..MAX_ITERS {
        iters += 1;
        let mut inertia = 0.0;
        for i in 0..n {
            let (c, dist) = nearest(data.row(i), &centroids);
            assignments[i] = c;
            inertia += dist;
        }
        trace.push(inertia);

        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assignments[i]] += 1;
            for (s, v) in sums.row_mut(assignments[i]).iter_mut().zip(data.row(i)) {
                *s += v;
            }
        }
        let mut next = Matrix::zeros(k, d);
        for c in 0..k {
            if counts[c] > 0 {
                for (o, s) in next.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *o = s / counts[c] as f64;
                }
            }
        }
        // Empty clusters grab the costliest remaining point; each point
        // can only be stolen once per iteration.
        let mut stolen = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far = (0usize, -1.0);
            for i in 0..n {
                if stolen[i] {
                    continue;
                }
                let dist = sq_dist(data.row(i), centroids.row(assignments[i]));
                if dist > far.1 {
                    far = (i, dist);
                }
            }
            stolen[far.0] = true;
            next.row_mut(c).copy_from_slice(data.row(far.0));
        }

        let shift = (0..k)
            .map(|c| sq_dist(centroids.row(c), next.row(c)).sqrt())
            .fold(0.0_f64, f64::max);
        centroids = next;
        if shift < SHIFT_TOL {
            break;
        }
    }
    let mut inertia = 0.0;
    for i in 0..n {
        let (c, dist) = nearest(data.row(i), &centroids);
        assignments[i] = c;
        inertia += dist;
    }
    KMeansResult {
        assignments,
        centroids,
        inertia,
        n_iters: iters,
        inertia_trace: trace,
    }
}

/// Best-inertia k-means over `restarts` seeded initializations.
pub fn kmeans(data: &Matrix, k: usize, seed: u64, restarts: usize) -> Result<KMeansResult> {
    let n = data.rows();
    if k < 2 || k >= n {
        return Err(Error::Domain(format!(
            "k={k} must satisfy 2 <= k < n={n}"
        )));
    }
    if restarts == 0 {
        return Err(Error::Domain("restarts must be >= 1".into()));
    }
    let mut best: Option<KMeansResult> = None;
    for r in 0..restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("kmeans.restart{r}")));
        let run = lloyd(data, k, &mut rng);
        if best.as_ref().map_or(true, |b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}
