//! K-means clustering with seeded k-means++ initialization.
//!
//! Used to turn acoustic feature frames into discrete codes. Runs are fully
//! deterministic for a given seed: initialization draws from a keyed stream,
//! assignment breaks ties toward the lowest centroid index, and empty
//! clusters reseed to the point farthest from its assigned centroid.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{sq_dist, Tensor};

/// A learned codebook: `k` centroids of dimension `d`.
#[derive(Debug, Clone)]
pub struct Codebook {
    /// Centroid matrix, shape [k, d].
    pub centroids: Tensor,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centroids.shape()[1]
    }

    /// Nearest-centroid code for every row of `frames` (ties break low).
    pub fn assign(&self, frames: &Tensor) -> Result<Vec<usize>> {
        if frames.cols() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "assign",
                expected: vec![self.k(), self.dim()],
                got: frames.shape().to_vec(),
            });
        }
        Ok((0..frames.rows()).map(|i| self.nearest(frames.row(i)).0).collect())
    }

    /// Index and squared distance of the nearest centroid.
    pub fn nearest(&self, point: &[f64]) -> (usize, f64) {
        let mut best = (0usize, f64::INFINITY);
        for c in 0..self.k() {
            let d = sq_dist(point, self.centroids.row(c));
            if d < best.1 {
                best = (c, d);
            }
        }
        best
    }
}

/// Per-run diagnostics.
#[derive(Debug, Clone)]
pub struct KmeansReport {
    /// Total within-cluster squared distance after each Lloyd iteration.
    pub inertia_per_iter: Vec<f64>,
    /// Iterations actually run.
    pub iterations: usize,
    /// True when the relative inertia improvement fell below the tolerance.
    pub converged: bool,
}

impl KmeansReport {
    pub fn final_inertia(&self) -> f64 {
        self.inertia_per_iter.last().copied().unwrap_or(f64::INFINITY)
    }
}

/// Total squared distance from each row of `frames` to its nearest centroid.
pub fn inertia(book: &Codebook, frames: &Tensor) -> Result<f64> {
    if frames.cols() != book.dim() {
        return Err(Error::ShapeMismatch {
            op: "inertia",
            expected: vec![frames.rows(), book.dim()],
            got: frames.shape().to_vec(),
        });
    }
    Ok((0..frames.rows()).map(|i| book.nearest(frames.row(i)).1).sum())
}

/// K-means++ seeding: first centroid uniform, the rest sampled with
/// probability proportional to squared distance from the nearest chosen one.
pub fn kmeans_pp_init(data: &Tensor, k: usize, stream: &mut Stream) -> Result<Tensor> {
    let (n, d) = (data.rows(), data.cols());
    if n < k {
        return Err(Error::InsufficientData { needed: k, got: n });
    }
    let mut centroids = Vec::with_capacity(k * d);
    let first = stream.below(n);
    centroids.extend_from_slice(data.row(first));
    let mut dist2: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), data.row(first))).collect();
    for _ in 1..k {
        let total: f64 = dist2.iter().sum();
        let next = if total > 0.0 {
            stream.weighted(&dist2)
        } else {
            // All remaining mass at distance zero (duplicate points).
            stream.below(n)
        };
        centroids.extend_from_slice(data.row(next));
        let start = centroids.len() - d;
        let new_c: Vec<f64> = centroids[start..].to_vec();
        for (i, dd) in dist2.iter_mut().enumerate() {
            *dd = dd.min(sq_dist(data.row(i), &new_c));
        }
    }
    Tensor::matrix(k, d, centroids)
}

/// Full k-means run: k-means++ init, Lloyd iterations until the relative
/// inertia improvement drops below `tol` or `max_iter` is reached.
pub fn kmeans(
    data: &Tensor,
    k: usize,
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<(Codebook, Vec<usize>, KmeansReport)> {
    let mut stream = Stream::open(seed, "kmeans-init", &[k as u64]);
    let init = kmeans_pp_init(data, k, &mut stream)?;
    kmeans_with_init(data, init, max_iter, tol)
}

/// Lloyd iterations from explicit starting centroids.
pub fn kmeans_with_init(
    data: &Tensor,
    init: Tensor,
    max_iter: usize,
    tol: f64,
) -> Result<(Codebook, Vec<usize>, KmeansReport)> {
    let (n, d) = (data.rows(), data.cols());
    let k = init.rows();
    if init.cols() != d {
        return Err(Error::ShapeMismatch {
            op: "kmeans_with_init",
            expected: vec![k, d],
            got: init.shape().to_vec(),
        });
    }
    if n < k {
        return Err(Error::InsufficientData { needed: k, got: n });
    }

    let mut book = Codebook { centroids: init };
    let mut assignments = vec![0usize; n];
    let mut report =
        KmeansReport { inertia_per_iter: Vec::new(), iterations: 0, converged: false };

    for _ in 0..max_iter {
        // Assignment step.
        let mut inertia = 0.0;
        for i in 0..n {
            let (c, dd) = book.nearest(data.row(i));
            assignments[i] = c;
            inertia += dd;
        }

        // Update step: means of assigned points.
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(data.row(i)) {
                *s += v;
            }
        }
        // Empty clusters reseed to the point farthest from its centroid.
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .max_by(|&a, &b| {
                    let da = sq_dist(data.row(a), book.centroids.row(assignments[a]));
                    let db = sq_dist(data.row(b), book.centroids.row(assignments[b]));
                    da.partial_cmp(&db).expect("finite distances")
                })
                .expect("n >= 1");
            let old = assignments[far];
            counts[old] -= 1;
            for (s, v) in sums[old * d..(old + 1) * d].iter_mut().zip(data.row(far)) {
                *s -= v;
            }
            assignments[far] = c;
            counts[c] = 1;
            sums[c * d..(c + 1) * d].copy_from_slice(data.row(far));
        }
        let cm = book.centroids.make_mut();
        for c in 0..k {
            for j in 0..d {
                cm[c * d + j] = sums[c * d + j] / counts[c] as f64;
            }
        }

        report.iterations += 1;
        let improved = report
            .inertia_per_iter
            .last()
            .map(|prev| (prev - inertia) > tol * prev.abs().max(1.0))
            .unwrap_or(true);
        report.inertia_per_iter.push(inertia);
        if !improved {
            report.converged = true;
            break;
        }
    }
    // Final assignments against the final centroids.
    for i in 0..n {
        assignments[i] = book.nearest(data.row(i)).0;
    }
    Ok((book, assignments, report))
}
