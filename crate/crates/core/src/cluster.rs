//! Spherical k-means over document embeddings, and the elbow scan used to
//! pick the number of clusters.
//!
//! Rows are L2-normalized before fitting and the objective is the sum of
//! squared Euclidean distances between normalized rows and their centroids.
//! Centroids are plain (unnormalized) means of their members.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::embed::{dot, l2_norm, squared_euclidean, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MODEL_MAGIC: &[u8; 8] = b"DQGKMC01";

/// Number of clusters used when no elbow scan is requested.
pub const DEFAULT_K: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Stop once the relative objective drop of an iteration is at most this.
    pub tol: f64,
    pub seed: u64,
    pub restarts: usize,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            max_iters: 100,
            tol: 1e-4,
            seed: 0,
            restarts: 3,
        }
    }
}

impl ClusteringConfig {
    pub fn with_k(k: usize) -> Self {
        Self {
            k,
            ..Self::default()
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("K must be at least 1".into()));
        }
        if self.k > n {
            return Err(Error::InvalidConfig(format!(
                "K = {} exceeds the {n} available documents",
                self.k
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidConfig("restarts must be at least 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::InvalidConfig("tol must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansModel<F> {
    k: usize,
    dim: usize,
    centroids: Vec<F>,
    assignments: Vec<usize>,
    inertia: f64,
    /// Objective after every assignment step of the winning restart.
    history: Vec<f64>,
}

impl<F: Scalar> KMeansModel<F> {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, c: usize) -> &[F] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn centroids(&self) -> impl Iterator<Item = &[F]> {
        self.centroids.chunks_exact(self.dim)
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn inertia(&self) -> f64 {
        self.inertia
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    /// Ordinals of each cluster's members, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &a) in self.assignments.iter().enumerate() {
            out[a].push(i);
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * (self.centroids.len() + self.assignments.len()));
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.centroids {
            out.extend_from_slice(&v.to_single().to_le_bytes());
        }
        for &a in &self.assignments {
            out.extend_from_slice(&(a as u32).to_le_bytes());
        }
        out
    }

    /// Parses a persisted model and recomputes its inertia against `x`.
    pub fn from_bytes(bytes: &[u8], x: &EmbeddingMatrix<F>) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MODEL_MAGIC {
            return Err(Error::Format("missing DQGKMC01 header".into()));
        }
        let k = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let centroid_bytes = k * dim * 4;
        let rest = &bytes[16..];
        if rest.len() < centroid_bytes || !(rest.len() - centroid_bytes).is_multiple_of(4) {
            return Err(Error::SizeMismatch(format!(
                "model body of {} bytes does not fit K={k}, d={dim}",
                rest.len()
            )));
        }
        let centroids: Vec<F> = rest[..centroid_bytes]
            .chunks_exact(4)
            .map(|c| F::from_single(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let assignments: Vec<usize> = rest[centroid_bytes..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        if let Some(&bad) = assignments.iter().find(|&&a| a >= k) {
            return Err(Error::Validation(format!("assignment {bad} out of range for K={k}")));
        }
        if x.dim() != dim || x.rows() != assignments.len() {
            return Err(Error::Alignment(format!(
                "model covers {}x{dim} but embeddings are {}x{}",
                assignments.len(),
                x.rows(),
                x.dim()
            )));
        }
        let normalized = x.normalized();
        let inertia = objective(&normalized, &centroids, dim, &assignments);
        Ok(Self {
            k,
            dim,
            centroids,
            assignments,
            inertia,
            history: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, x: &EmbeddingMatrix<F>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, x)
    }
}

/// Fits spherical k-means; the best of `cfg.restarts` seeded runs wins.
///
/// Row distance computations run on the current rayon pool. Reductions are
/// sequential in row order, so the result does not depend on thread count.
pub fn kmeans_fit<F: Scalar>(x: &EmbeddingMatrix<F>, cfg: &ClusteringConfig) -> Result<KMeansModel<F>> {
    cfg.validate(x.rows())?;
    let normalized = x.normalized();
    let mut best: Option<KMeansModel<F>> = None;
    for restart in 0..cfg.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(restart as u64);
        let model = lloyd(&normalized, cfg, &mut rng);
        log::debug!(
            "k-means restart {restart}: K={} inertia={} after {} steps",
            cfg.k,
            model.inertia,
            model.history.len()
        );
        if best.as_ref().is_none_or(|b| model.inertia < b.inertia) {
            best = Some(model);
        }
    }
    Ok(best.expect("restarts >= 1"))
}

fn lloyd<F: Scalar>(x: &EmbeddingMatrix<F>, cfg: &ClusteringConfig, rng: &mut ChaCha8Rng) -> KMeansModel<F> {
    let (n, dim, k) = (x.rows(), x.dim(), cfg.k);
    let mut centroids = plus_plus_init(x, k, rng);
    let (mut assignments, mut dists) = assign(x, &centroids, dim);
    repair_empty(x, &mut centroids, &mut assignments, &mut dists, k);
    let mut current = sum_ordered(&dists);
    let mut history = vec![current];

    for _ in 0..cfg.max_iters {
        let updated = means(x, &assignments, k, dim);
        let updated_cost = objective(x, &updated, dim, &assignments);
        // Recomputing the means can only raise the objective through rounding,
        // which means the fit has already converged.
        if updated_cost > current {
            break;
        }
        centroids = updated;
        let (next, mut next_dists) = assign(x, &centroids, dim);
        let changed = next != assignments;
        assignments = next;
        repair_empty(x, &mut centroids, &mut assignments, &mut next_dists, k);
        let previous = current;
        current = sum_ordered(&next_dists);
        dists = next_dists;
        history.push(current);
        if !changed || previous - current <= cfg.tol * previous {
            break;
        }
    }
    debug_assert_eq!(assignments.len(), n);
    let _ = dists;
    KMeansModel {
        k,
        dim,
        centroids,
        assignments,
        inertia: current,
        history,
    }
}

fn plus_plus_init<F: Scalar>(x: &EmbeddingMatrix<F>, k: usize, rng: &mut ChaCha8Rng) -> Vec<F> {
    let n = x.rows();
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen.push(first);
    taken[first] = true;
    let mut d2: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| squared_euclidean(x.row(i), x.row(first)).as_f64())
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // Every remaining point coincides with a chosen centre.
            let free: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen.push(next);
        taken[next] = true;
        let row = x.row(next);
        d2.par_iter_mut().enumerate().for_each(|(i, d)| {
            let dn = squared_euclidean(x.row(i), row).as_f64();
            if dn < *d {
                *d = dn;
            }
        });
    }
    chosen.iter().flat_map(|&i| x.row(i).iter().copied()).collect()
}

fn assign<F: Scalar>(x: &EmbeddingMatrix<F>, centroids: &[F], dim: usize) -> (Vec<usize>, Vec<F>) {
    (0..x.rows())
        .into_par_iter()
        .map(|i| nearest(x.row(i), centroids, dim))
        .unzip()
}

fn nearest<F: Scalar>(row: &[F], centroids: &[F], dim: usize) -> (usize, F) {
    let mut best = (0, F::infinity());
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_euclidean(row, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn repair_empty<F: Scalar>(
    x: &EmbeddingMatrix<F>,
    centroids: &mut [F],
    assignments: &mut [usize],
    dists: &mut [F],
    k: usize,
) {
    let dim = x.dim();
    let mut sizes = vec![0usize; k];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        // Farthest point whose cluster can spare it.
        let mut far: Option<usize> = None;
        for i in 0..assignments.len() {
            if sizes[assignments[i]] < 2 {
                continue;
            }
            if far.is_none_or(|f| dists[i] > dists[f]) {
                far = Some(i);
            }
        }
        let Some(p) = far else { break };
        sizes[assignments[p]] -= 1;
        sizes[empty] += 1;
        assignments[p] = empty;
        dists[p] = F::zero();
        centroids[empty * dim..(empty + 1) * dim].copy_from_slice(x.row(p));
    }
}

fn means<F: Scalar>(x: &EmbeddingMatrix<F>, assignments: &[usize], k: usize, dim: usize) -> Vec<F> {
    let mut sums = vec![F::zero(); k * dim];
    let mut counts = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(x.row(i)) {
            *s = *s + v;
        }
    }
    for (c, &count) in counts.iter().enumerate() {
        let denom = F::of(count.max(1) as f64);
        sums[c * dim..(c + 1) * dim].iter_mut().for_each(|s| *s = *s / denom);
    }
    sums
}

fn objective<F: Scalar>(x: &EmbeddingMatrix<F>, centroids: &[F], dim: usize, assignments: &[usize]) -> f64 {
    let dists: Vec<F> = (0..x.rows())
        .into_par_iter()
        .map(|i| {
            let a = assignments[i];
            squared_euclidean(x.row(i), &centroids[a * dim..(a + 1) * dim])
        })
        .collect();
    sum_ordered(&dists)
}

fn sum_ordered<F: Scalar>(values: &[F]) -> f64 {
    values.iter().fold(0.0, |acc, v| acc + v.as_f64())
}

fn cosine_or_zero<F: Scalar>(u: &[F], v: &[F]) -> f64 {
    let denom = l2_norm(u) * l2_norm(v);
    if denom == F::zero() {
        return 0.0;
    }
    (dot(u, v) / denom).as_f64().clamp(-1.0, 1.0)
}

/// Sum over rows of `1 - cosine(row, nearest centroid)`, where nearest is
/// judged by cosine rather than by the stored assignment.
pub fn cosine_sse<F: Scalar>(x: &EmbeddingMatrix<F>, model: &KMeansModel<F>) -> f64 {
    let per_row: Vec<f64> = (0..x.rows())
        .into_par_iter()
        .map(|i| {
            let row = x.row(i);
            let best = model
                .centroids()
                .map(|c| cosine_or_zero(row, c))
                .fold(f64::NEG_INFINITY, f64::max);
            (1.0 - best).max(0.0)
        })
        .collect();
    per_row.iter().sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElbowScan {
    /// `(K, cosine SSE)` in scan order.
    pub points: Vec<(usize, f64)>,
    /// K with the largest discrete second difference, if there are interior points.
    pub knee: Option<usize>,
}

impl ElbowScan {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("K,sse\n");
        for (k, sse) in &self.points {
            let _ = writeln!(out, "{k},{sse}");
        }
        out
    }
}

/// Fits one model per K and reports the knee of the SSE curve.
pub fn elbow_scan<F: Scalar>(
    x: &EmbeddingMatrix<F>,
    k_values: &[usize],
    cfg: &ClusteringConfig,
) -> Result<ElbowScan> {
    if k_values.is_empty() {
        return Err(Error::InvalidConfig("elbow scan needs at least one K".into()));
    }
    if k_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig("elbow scan K values must be strictly ascending".into()));
    }
    let mut points = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let model = kmeans_fit(x, &ClusteringConfig { k, ..cfg.clone() })?;
        let sse = cosine_sse(x, &model);
        log::info!("elbow K={k} inertia={} sse={sse}", model.inertia());
        points.push((k, sse));
    }
    Ok(ElbowScan {
        knee: knee(&points),
        points,
    })
}

/// Interior K maximizing `sse[i-1] - 2 sse[i] + sse[i+1]`; first wins ties.
pub fn knee(points: &[(usize, f64)]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for w in points.windows(3) {
        let curvature = w[0].1 - 2.0 * w[1].1 + w[2].1;
        if best.is_none_or(|(_, b)| curvature > b) {
            best = Some((w[1].0, curvature));
        }
    }
    best.map(|(k, _)| k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[&[f64]]) -> EmbeddingMatrix<f64> {
        EmbeddingMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn cfg(k: usize) -> ClusteringConfig {
        ClusteringConfig {
            k,
            seed: 11,
            ..ClusteringConfig::default()
        }
    }

    #[test]
    fn k_one_is_mean_of_normalized_rows() {
        let x = matrix(&[&[2.0, 0.0], &[0.0, 3.0], &[1.0, 1.0]]);
        let m = kmeans_fit(&x, &cfg(1)).unwrap();
        assert!(m.assignments().iter().all(|&a| a == 0));
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let expected = [(1.0 + h) / 3.0, (1.0 + h) / 3.0];
        for (a, b) in m.centroid(0).iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let x = matrix(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0], &[1.0, 1.0, 0.0]]);
        let m = kmeans_fit(&x, &cfg(4)).unwrap();
        assert!(m.inertia() <= 1e-10);
        let mut seen = m.assignments().to_vec();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3]);
        assert!(cosine_sse(&x, &m) < 1e-6);
    }

    #[test]
    fn invalid_k() {
        let x = matrix(&[&[1.0, 0.0]]);
        assert!(matches!(kmeans_fit(&x, &cfg(0)), Err(Error::InvalidConfig(_))));
        assert!(matches!(kmeans_fit(&x, &cfg(2)), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn identical_rows_with_more_clusters_than_distinct_points() {
        let x = matrix(&[&[1.0, 1.0][..]; 5]);
        let m = kmeans_fit(&x, &cfg(3)).unwrap();
        assert!(m.cluster_sizes().iter().all(|&s| s >= 1));
        assert!(cosine_sse(&x, &m) < 1e-6);
    }

    #[test]
    fn cosine_sse_hand_fixture() {
        // Centroids (1,0) and (0,1); rows (1,0), (1,1), (0,2), (-1,1).
        // Contributions: 0, 1 - 1/sqrt2, 0, 1 - 1/sqrt2.
        let x = matrix(&[&[1.0, 0.0], &[1.0, 1.0], &[0.0, 2.0], &[-1.0, 1.0]]);
        let model = KMeansModel {
            k: 2,
            dim: 2,
            centroids: vec![1.0, 0.0, 0.0, 1.0],
            assignments: vec![0, 0, 1, 1],
            inertia: 0.0,
            history: vec![],
        };
        let expected = 2.0 * (1.0 - std::f64::consts::FRAC_1_SQRT_2);
        assert!((cosine_sse(&x, &model) - expected).abs() < 1e-6);
    }

    #[test]
    fn knee_rule() {
        let pts = [(1, 10.0), (2, 6.0), (3, 1.0), (4, 0.8), (5, 0.7)];
        assert_eq!(knee(&pts), Some(3));
        assert_eq!(knee(&pts[..2]), None);
    }

    #[test]
    fn single_k_scan_on_distinct_points() {
        let x = matrix(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.2]]);
        let scan = elbow_scan(&x, &[3], &cfg(1)).unwrap();
        assert_eq!(scan.points.len(), 1);
        assert_eq!(scan.points[0].0, 3);
        assert!(scan.points[0].1.abs() < 1e-6);
        assert_eq!(scan.knee, None);
        assert!(scan.to_csv().starts_with("K,sse\n3,"));
    }

    #[test]
    fn model_bytes_round_trip() {
        let x = matrix(&[&[1.0, 0.0], &[0.9, 0.1], &[0.0, 1.0], &[0.1, 0.9]]);
        let m = kmeans_fit(&x, &cfg(2)).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..8], MODEL_MAGIC);
        let back = KMeansModel::from_bytes(&bytes, &x).unwrap();
        assert_eq!(back.assignments(), m.assignments());
        assert_eq!(back.to_bytes(), bytes);
        assert!((back.inertia() - m.inertia()).abs() < 1e-6);
    }
}
