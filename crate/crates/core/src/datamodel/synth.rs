//! Synthetic stand-ins for real item text embeddings and interaction data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    write_embeddings, write_interactions, write_items, Catalog, EmbeddingMatrix, InteractionLog,
    Stage,
};
use crate::numerics::{Matrix, Rng};
use crate::Result;

/// Shape of a synthetic embedding table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dim: usize,
    /// Every row is rescaled to this Euclidean norm.
    pub norm_target: f64,
    /// Number of planted clusters; 0 for i.i.d. rows.
    pub clusters: usize,
    /// Within-cluster spread relative to the (unit) cluster centres.
    pub spread: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            dim: 768,
            norm_target: 1.0,
            clusters: 0,
            spread: 0.1,
        }
    }
}

/// Unit-norm cluster centres, one per row.
pub fn cluster_centres(count: usize, dim: usize, rng: &mut Rng) -> Matrix<f32> {
    let mut m = Matrix::randn(count, dim, 1.0, rng);
    for r in 0..count {
        normalise(m.row_mut(r), 1.0);
    }
    m
}

fn normalise(row: &mut [f32], target: f64) {
    let n = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if n > 0.0 {
        let s = (target / n) as f32;
        row.iter_mut().for_each(|v| *v *= s);
    }
}

/// Embedding row for a member of a cluster centred at `centre`.
fn planted_row(centre: &[f32], spread: f64, norm_target: f64, rng: &mut Rng) -> Vec<f32> {
    let per_coord = spread / (centre.len() as f64).sqrt();
    let mut row: Vec<f32> = centre
        .iter()
        .map(|&c| c + (rng.normal() * per_coord) as f32)
        .collect();
    normalise(&mut row, norm_target);
    row
}

/// Raw synthetic embeddings for `n` items plus the planted cluster label of
/// each row (item `i` belongs to cluster `i % clusters`). Without planted
/// clusters every label is 0.
pub fn synth_embeddings(n: usize, spec: &SynthSpec, rng: &mut Rng) -> (EmbeddingMatrix, Vec<usize>) {
    let mut values = Matrix::zeros(n, spec.dim);
    let mut labels = vec![0; n];
    if spec.clusters == 0 {
        for r in 0..n {
            for v in values.row_mut(r) {
                *v = rng.normal() as f32;
            }
            normalise(values.row_mut(r), spec.norm_target);
        }
    } else {
        let centres = cluster_centres(spec.clusters, spec.dim, rng);
        for (r, label) in labels.iter_mut().enumerate() {
            *label = r % spec.clusters;
            let row = planted_row(centres.row(*label), spec.spread, spec.norm_target, rng);
            values.row_mut(r).copy_from_slice(&row);
        }
    }
    let emb = EmbeddingMatrix::new(Stage::Raw, values).expect("synthetic rows are finite");
    (emb, labels)
}

/// Parameters of the two-domain benchmark fixture: shared semantic clusters
/// across domains and first-order Markov user sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub items_per_domain: usize,
    pub users_per_domain: usize,
    pub clusters: usize,
    pub dim: usize,
    pub spread: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability of moving to the item's fixed successor; otherwise the
    /// next item is drawn from the successor cluster.
    pub follow: f64,
    /// Zipf exponent of item popularity for non-successor draws.
    pub zipf: f64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            items_per_domain: 200,
            users_per_domain: 1000,
            clusters: 20,
            dim: 64,
            spread: 0.4,
            min_len: 6,
            max_len: 12,
            follow: 0.8,
            zipf: 1.0,
        }
    }
}

/// One domain of a synthetic fixture.
#[derive(Debug, Clone)]
pub struct FixtureDomain {
    pub catalog: Catalog,
    pub logs: Vec<InteractionLog>,
    pub raw: EmbeddingMatrix,
    /// Planted semantic cluster of each item.
    pub labels: Vec<usize>,
    /// Fixed Markov successor of each item.
    pub successor: Vec<usize>,
}

/// Build a two-domain fixture. Both domains draw their item embeddings
/// around the same cluster centres, and cluster `c` always transitions to
/// cluster `c + 1 (mod clusters)` in both domains.
pub fn cross_domain_fixture(spec: &FixtureSpec, names: [&str; 2], seed: u64) -> Vec<FixtureDomain> {
    let root = Rng::new(seed);
    let centres = cluster_centres(spec.clusters, spec.dim, &mut root.fork(1));
    names
        .iter()
        .enumerate()
        .map(|(d, name)| fixture_domain(spec, name, &centres, root.fork(100 + d as u64)))
        .collect()
}

fn fixture_domain(spec: &FixtureSpec, name: &str, centres: &Matrix<f32>, rng: Rng) -> FixtureDomain {
    let n = spec.items_per_domain;
    let c = spec.clusters;
    let mut emb_rng = rng.fork(1);
    let mut struct_rng = rng.fork(2);
    let mut seq_rng = rng.fork(3);

    let mut catalog = Catalog::new(name);
    let mut labels = Vec::with_capacity(n);
    let mut values = Matrix::zeros(n, spec.dim);
    for i in 0..n {
        let label = i % c;
        labels.push(label);
        catalog
            .push(
                format!("{name}:{i}"),
                format!("{name} item {i}"),
                format!("topic {label}"),
            )
            .expect("fresh ids");
        let row = planted_row(centres.row(label), spec.spread, 1.0, &mut emb_rng);
        values.row_mut(i).copy_from_slice(&row);
    }
    let members: Vec<Vec<usize>> = (0..c)
        .map(|k| (0..n).filter(|&i| labels[i] == k).collect())
        .collect();
    let popularity: Vec<f64> = {
        let mut ranks: Vec<usize> = (0..n).collect();
        struct_rng.shuffle(&mut ranks);
        let mut p = vec![0.0; n];
        for (rank, &i) in ranks.iter().enumerate() {
            p[i] = 1.0 / ((rank + 1) as f64).powf(spec.zipf);
        }
        p
    };
    let successor: Vec<usize> = (0..n)
        .map(|i| {
            let next = &members[(labels[i] + 1) % c];
            next[struct_rng.below(next.len())]
        })
        .collect();

    let draw = |pool: &[usize], rng: &mut Rng| -> usize {
        let total: f64 = pool.iter().map(|&i| popularity[i]).sum();
        let mut u = rng.uniform() * total;
        for &i in pool {
            u -= popularity[i];
            if u <= 0.0 {
                return i;
            }
        }
        *pool.last().expect("non-empty pool")
    };
    let all: Vec<usize> = (0..n).collect();
    let logs = (0..spec.users_per_domain)
        .map(|u| {
            let len = spec.min_len + seq_rng.below(spec.max_len - spec.min_len + 1);
            let mut seq = vec![draw(&all, &mut seq_rng)];
            while seq.len() < len {
                let cur = *seq.last().expect("non-empty");
                let next = if seq_rng.uniform() < spec.follow {
                    successor[cur]
                } else {
                    draw(&members[(labels[cur] + 1) % c], &mut seq_rng)
                };
                seq.push(next);
            }
            InteractionLog {
                user_id: format!("{name}-u{u}"),
                sequence: seq,
                domain: name.to_string(),
            }
        })
        .collect();
    FixtureDomain {
        catalog,
        logs,
        raw: EmbeddingMatrix::new(Stage::Raw, values).expect("finite"),
        labels,
        successor,
    }
}

impl FixtureDomain {
    /// Write `items.jsonl`, `interactions.jsonl` and `raw.sfub` under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
        write_items(&dir.join("items.jsonl"), &self.catalog)?;
        write_interactions(&dir.join("interactions.jsonl"), &self.logs, &self.catalog)?;
        write_embeddings(&dir.join("raw.sfub"), &self.raw)
    }
}
