//! Topic clustering: Lloyd's k-means from k-means++ seeds, nearest-centroid
//! assignment, and a PCA projection for plotting.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::RecordId;
use crate::embedding::{squared_distance, EmbeddingVector};

pub const DEFAULT_CLUSTERS: usize = 120;
pub const DEFAULT_MAX_ITERS: usize = 300;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum ClusteringError {
    #[error("cluster count must be positive")]
    ZeroClusters,
    #[error("cannot form {m} clusters from {n} vectors")]
    TooManyClusters { m: usize, n: usize },
    #[error("vector {index} has dimension {found}, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, found: usize },
    #[error("invalid k-means parameters: {0}")]
    InvalidParams(String),
    #[error("need at least {needed} vectors, got {got}")]
    TooFewVectors { needed: usize, got: usize },
    #[error("projection export: {0}")]
    Export(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansParams {
    pub m: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            m: DEFAULT_CLUSTERS,
            seed: 0,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
        }
    }
}

impl KMeansParams {
    pub fn new(m: usize, seed: u64) -> Self {
        Self {
            m,
            seed,
            ..Self::default()
        }
    }
}

/// Fitted partition of the vectors into `m` clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centroids: Vec<EmbeddingVector>,
    /// Cluster index for each input vector, by position.
    pub assignments: Vec<usize>,
    pub m: usize,
    /// Within-cluster sum of squared distances at the final state.
    pub objective: f64,
    pub iterations_run: usize,
    /// Objective after each Lloyd iteration.
    pub objective_trace: Vec<f64>,
}

impl ClusterModel {
    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, EmbeddingVector::dim)
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.m];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    /// Positions assigned to each cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.m];
        for (pos, &a) in self.assignments.iter().enumerate() {
            out[a].push(pos);
        }
        out
    }
}

fn check_dims(vectors: &[EmbeddingVector]) -> Result<usize, ClusteringError> {
    let dim = vectors.first().map_or(0, EmbeddingVector::dim);
    for (index, v) in vectors.iter().enumerate() {
        if v.dim() != dim {
            return Err(ClusteringError::DimensionMismatch {
                index,
                expected: dim,
                found: v.dim(),
            });
        }
    }
    Ok(dim)
}

fn nearest(centroids: &[Vec<f64>], v: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let d = squared_distance(c, v);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Index of the nearest centroid by squared Euclidean distance; ties go to
/// the lowest index.
pub fn assign(model: &ClusterModel, v: &EmbeddingVector) -> Result<usize, ClusteringError> {
    if v.dim() != model.dim() {
        return Err(ClusteringError::DimensionMismatch {
            index: 0,
            expected: model.dim(),
            found: v.dim(),
        });
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in model.centroids.iter().enumerate() {
        let d = squared_distance(c.values(), v.values());
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    Ok(best)
}

fn kmeans_plus_plus(points: &[&[f64]], m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centers = vec![points[first].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, points[first])).collect();
    while centers.len() < m {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                acc += d;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total has a positive entry")
        } else {
            // Every remaining point coincides with a center.
            chosen.iter().position(|c| !c).expect("m <= n")
        };
        chosen[pick] = true;
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(p, points[pick]));
        }
        centers.push(points[pick].to_vec());
    }
    centers
}

fn means(points: &[&[f64]], assignments: &[usize], m: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut sums = vec![vec![0.0; dim]; m];
    let mut counts = vec![0usize; m];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p.iter()) {
            *s += x;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            let inv = c as f64;
            s.iter_mut().for_each(|x| *x /= inv);
        }
    }
    (sums, counts)
}

/// Means of the current assignment, moving the point farthest from its own
/// centroid into each empty cluster until none is empty.
fn means_with_repair(points: &[&[f64]], assignments: &mut [usize], m: usize, dim: usize) -> Vec<Vec<f64>> {
    loop {
        let (centroids, counts) = means(points, assignments, m, dim);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return centroids;
        };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            let a = assignments[i];
            if counts[a] < 2 {
                continue;
            }
            let d = squared_distance(p, &centroids[a]);
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        let i = far.expect("m <= n leaves a cluster with two or more points");
        assignments[i] = empty;
    }
}

fn sse(points: &[&[f64]], assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| squared_distance(p, &centroids[a]))
        .sum()
}

/// Lloyd's algorithm from k-means++ seeds.
///
/// Stops when no centroid moves by `tol` or more (Euclidean) or after
/// `max_iters` iterations. On return the centroids are the means of the
/// stored assignment and `objective` is that assignment's SSE.
pub fn kmeans_fit(vectors: &[EmbeddingVector], params: &KMeansParams) -> Result<ClusterModel, ClusteringError> {
    let n = vectors.len();
    let m = params.m;
    if m == 0 {
        return Err(ClusteringError::ZeroClusters);
    }
    if m > n {
        return Err(ClusteringError::TooManyClusters { m, n });
    }
    if !(params.tol > 0.0) {
        return Err(ClusteringError::InvalidParams("tol must be > 0".into()));
    }
    if params.max_iters == 0 {
        return Err(ClusteringError::InvalidParams("max_iters must be >= 1".into()));
    }
    let dim = check_dims(vectors)?;
    let points: Vec<&[f64]> = vectors.iter().map(EmbeddingVector::values).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let mut centroids = kmeans_plus_plus(&points, m, &mut rng);
    let mut assignments: Vec<usize> = points.par_iter().map(|p| nearest(&centroids, p)).collect();
    let mut trace = Vec::new();
    let mut iterations_run = 0;
    loop {
        iterations_run += 1;
        let updated = means_with_repair(&points, &mut assignments, m, dim);
        trace.push(sse(&points, &assignments, &updated));
        let movement = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        if movement < params.tol || iterations_run >= params.max_iters {
            break;
        }
        assignments = points.par_iter().map(|p| nearest(&centroids, p)).collect();
    }

    Ok(ClusterModel {
        centroids: centroids.into_iter().map(EmbeddingVector::new).collect(),
        assignments,
        m,
        objective: *trace.last().expect("at least one iteration"),
        iterations_run,
        objective_trace: trace,
    })
}

/// Projects onto the top two principal components of the mean-centred data.
///
/// Each component's sign is fixed so that its largest-magnitude loading is
/// positive. Rank-deficient input yields zeros on the missing axes.
pub fn project_2d(vectors: &[EmbeddingVector]) -> Result<Vec<(f64, f64)>, ClusteringError> {
    if vectors.len() < 2 {
        return Err(ClusteringError::TooFewVectors {
            needed: 2,
            got: vectors.len(),
        });
    }
    let dim = check_dims(vectors)?;
    let n = vectors.len();
    let mut x = DMatrix::<f64>::from_fn(n, dim, |i, j| vectors[i].values()[j]);
    let mean = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }
    let cov = (x.transpose() * &x) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut axes = Vec::with_capacity(2);
    for &k in order.iter().take(2) {
        let mut axis = eig.eigenvectors.column(k).clone_owned();
        let lead = axis.iter().copied().fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if lead < 0.0 {
            axis.neg_mut();
        }
        axes.push(axis);
    }
    let coord = |i: usize, a: usize| axes.get(a).map_or(0.0, |axis| x.row(i).dot(&axis.transpose()));
    Ok((0..n).map(|i| (coord(i, 0), coord(i, 1))).collect())
}

/// Writes `record_id, cluster, px, py` rows.
pub fn write_projection_csv(
    path: &Path,
    ids: &[RecordId],
    model: &ClusterModel,
    coords: &[(f64, f64)],
) -> Result<(), ClusteringError> {
    let err = |e: &dyn std::fmt::Display| ClusteringError::Export(format!("{}: {e}", path.display()));
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["record_id", "cluster", "px", "py"]).map_err(|e| err(&e))?;
        for ((id, &cluster), (px, py)) in ids.iter().zip(&model.assignments).zip(coords) {
            w.write_record([id.as_str(), &cluster.to_string(), &px.to_string(), &py.to_string()])
                .map_err(|e| err(&e))?;
        }
        w.flush().map_err(|e| err(&e))?;
    }
    crate::fsio::write_atomic(path, &buf).map_err(|e| err(&e))
}
