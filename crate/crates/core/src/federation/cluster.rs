//! Pooling, K-means++ seeding, Lloyd iterations and synchronization.

use serde::{Deserialize, Serialize};

use super::ClientUpload;
use crate::datamodel::{EmbeddingMatrix, Stage};
use crate::numerics::{Matrix, Rng};
use crate::{Error, Result};

/// Uploads stacked in client order, with the row range of each domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled {
    pub points: Matrix<f32>,
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub domain: String,
    pub offset: usize,
    pub len: usize,
}

impl Pooled {
    pub fn global_index(&self, domain: &str, local: usize) -> Option<usize> {
        self.segments
            .iter()
            .find(|s| s.domain == domain && local < s.len)
            .map(|s| s.offset + local)
    }
}

pub fn pool(uploads: &[ClientUpload]) -> Result<Pooled> {
    let first = uploads
        .first()
        .ok_or_else(|| Error::Protocol("no uploads to pool".into()))?;
    let dim = first.embeddings.dim();
    let mut data = Vec::new();
    let mut segments = Vec::with_capacity(uploads.len());
    let mut offset = 0;
    for u in uploads {
        if u.embeddings.stage != Stage::Encrypted {
            return Err(Error::Protocol(format!("upload '{}' is not encrypted", u.domain)));
        }
        if u.embeddings.dim() != dim {
            return Err(Error::Protocol(format!(
                "upload '{}' has dim {}, expected {dim}",
                u.domain,
                u.embeddings.dim()
            )));
        }
        if segments.iter().any(|s: &Segment| s.domain == u.domain) {
            return Err(Error::Protocol(format!("duplicate upload for '{}'", u.domain)));
        }
        data.extend_from_slice(u.embeddings.values.data());
        segments.push(Segment {
            domain: u.domain.clone(),
            offset,
            len: u.embeddings.rows(),
        });
        offset += u.embeddings.rows();
    }
    Ok(Pooled {
        points: Matrix::new(offset, dim, data)?,
        segments,
    })
}

fn dist_sq(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn check_k(t: usize, k: usize) -> Result<()> {
    if k == 0 || k > t {
        return Err(Error::config("k", format!("need 1 <= k <= {t}, got {k}")));
    }
    Ok(())
}

/// K-means++ seeding. Returns the chosen point indices in draw order.
pub fn kmeanspp_indices(points: &Matrix<f32>, k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let t = points.rows();
    check_k(t, k)?;
    let mut chosen = vec![rng.below(t)];
    let mut d2: Vec<f64> = (0..t)
        .map(|i| dist_sq(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.uniform() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    u -= w;
                    if u < 0.0 {
                        break;
                    }
                }
            }
            pick.expect("positive total has a positive weight")
        } else {
            // Remaining points all coincide with chosen ones.
            let free: Vec<usize> = (0..t).filter(|i| !chosen.contains(i)).collect();
            free[rng.below(free.len())]
        };
        chosen.push(next);
        for (i, w) in d2.iter_mut().enumerate() {
            *w = w.min(dist_sq(points.row(i), points.row(next)));
        }
        d2[next] = 0.0;
    }
    Ok(chosen)
}

pub fn kmeanspp_init(points: &Matrix<f32>, k: usize, rng: &mut Rng) -> Result<Matrix<f32>> {
    let idx = kmeanspp_indices(points, k, rng)?;
    points.select_rows(&idx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub k: usize,
    pub max_iter: usize,
    pub tol: f64,
    /// Independent seedings; the run with the lowest final inertia wins.
    pub n_init: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k: 90,
            max_iter: 300,
            tol: 1e-4,
            n_init: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidTable {
    pub centroids: Matrix<f32>,
    /// Cluster of each pooled row.
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each assignment step, starting with the seeding.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl CentroidTable {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }
}

/// Nearest centroid of every point; ties go to the lowest cluster index.
pub fn assign(points: &Matrix<f32>, centroids: &Matrix<f32>) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let labels = points
        .iter_rows()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (c, row) in centroids.iter_rows().enumerate() {
                let d = dist_sq(p, row);
                if d < best.1 {
                    best = (c, d);
                }
            }
            inertia += best.1;
            best.0
        })
        .collect();
    (labels, inertia)
}

pub fn inertia_of(points: &Matrix<f32>, centroids: &Matrix<f32>, labels: &[usize]) -> f64 {
    points
        .iter_rows()
        .zip(labels)
        .map(|(p, &c)| dist_sq(p, centroids.row(c)))
        .sum()
}

/// Means of the assigned points, summed in point order. Empty clusters are
/// reseeded at the point farthest from its current centroid, which moves
/// that point into the empty cluster.
fn update_means(points: &Matrix<f32>, old: &Matrix<f32>, labels: &mut [usize]) -> Matrix<f32> {
    let (k, dim) = old.shape();
    let mut counts = vec![0usize; k];
    for &c in labels.iter() {
        counts[c] += 1;
    }
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let far = (0..points.rows())
            .filter(|&i| counts[labels[i]] > 1)
            .max_by(|&a, &b| {
                let da = dist_sq(points.row(a), old.row(labels[a]));
                let db = dist_sq(points.row(b), old.row(labels[b]));
                da.total_cmp(&db).then(b.cmp(&a))
            });
        if let Some(i) = far {
            counts[labels[i]] -= 1;
            labels[i] = empty;
            counts[empty] = 1;
        }
    }
    let mut sums = vec![0.0f64; k * dim];
    for (p, &c) in points.iter_rows().zip(labels.iter()) {
        for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(p) {
            *s += v as f64;
        }
    }
    let mut out = Matrix::zeros(k, dim);
    for c in 0..k {
        if counts[c] == 0 {
            out.row_mut(c).copy_from_slice(old.row(c));
            continue;
        }
        let n = counts[c] as f64;
        for (o, s) in out.row_mut(c).iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
            *o = (s / n) as f32;
        }
    }
    out
}

/// Lloyd iterations from K-means++ seeds, restarted `n_init` times.
///
/// Stops when the labels are stable or no centroid moved by `tol` or more;
/// the returned assignment is always the nearest-centroid assignment for the
/// returned centroids.
pub fn cluster(points: &Matrix<f32>, cfg: &ClusterConfig, rng: &mut Rng) -> Result<CentroidTable> {
    if cfg.max_iter == 0 {
        return Err(Error::config("max_iter", "must be at least 1"));
    }
    if !(cfg.tol > 0.0) {
        return Err(Error::config("tol", format!("must be positive, got {}", cfg.tol)));
    }
    if cfg.n_init == 0 {
        return Err(Error::config("n_init", "must be at least 1"));
    }
    let mut best: Option<CentroidTable> = None;
    for _ in 0..cfg.n_init {
        let run = lloyd(points, cfg, rng)?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("n_init >= 1"))
}

fn lloyd(points: &Matrix<f32>, cfg: &ClusterConfig, rng: &mut Rng) -> Result<CentroidTable> {
    let mut centroids = kmeanspp_init(points, cfg.k, rng)?;
    let (mut labels, inertia) = assign(points, &centroids);
    let mut history = vec![inertia];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iter {
        let mut moved_labels = labels.clone();
        let next = update_means(points, &centroids, &mut moved_labels);
        let shift = next
            .iter_rows()
            .zip(centroids.iter_rows())
            .map(|(a, b)| dist_sq(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        let (fresh, inertia) = assign(points, &centroids);
        history.push(inertia);
        iterations += 1;
        let stable = fresh == labels;
        labels = fresh;
        if stable || shift < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(CentroidTable {
        inertia: *history.last().expect("seeded"),
        centroids,
        assignments: labels,
        inertia_history: history,
        iterations,
        converged,
    })
}

/// Replace every row with its centroid, split back into domains.
pub fn synchronize(table: &CentroidTable, pooled: &Pooled) -> Result<Vec<(String, EmbeddingMatrix)>> {
    pooled
        .segments
        .iter()
        .map(|s| {
            let ids = &table.assignments[s.offset..s.offset + s.len];
            let rows = table.centroids.select_rows(ids)?;
            Ok((s.domain.clone(), EmbeddingMatrix::new(Stage::Synchronized, rows)?))
        })
        .collect()
}

/// Lowest inertia over every assignment of `points` to at most `k` clusters.
/// Exponential; meant for tiny test oracles.
pub fn brute_force_inertia(points: &Matrix<f32>, k: usize) -> f64 {
    let n = points.rows();
    let total = k.pow(n as u32);
    let mut best = f64::INFINITY;
    let mut labels = vec![0; n];
    for code in 0..total {
        let mut c = code;
        for l in labels.iter_mut() {
            *l = c % k;
            c /= k;
        }
        let mut sse = 0.0;
        for cl in 0..k {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == cl).collect();
            if members.is_empty() {
                continue;
            }
            let dim = points.cols();
            let mut mean = vec![0.0f64; dim];
            for &i in &members {
                for (m, &v) in mean.iter_mut().zip(points.row(i)) {
                    *m += v as f64;
                }
            }
            mean.iter_mut().for_each(|m| *m /= members.len() as f64);
            for &i in &members {
                sse += points
                    .row(i)
                    .iter()
                    .zip(&mean)
                    .map(|(&v, m)| (v as f64 - m).powi(2))
                    .sum::<f64>();
            }
        }
        best = best.min(sse);
    }
    best
}
