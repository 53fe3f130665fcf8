//! Client-side encryption of item text embeddings: Gaussian perturbation
//! followed by nearest-neighbour replacement, plus the similarity audit that
//! measures how far the uploaded rows drifted from the originals.

use serde::{Deserialize, Serialize};

use crate::datamodel::{EmbeddingMatrix, Stage};
use crate::numerics::{Matrix, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    /// Standard deviation of the per-coordinate noise.
    pub sigma: f64,
    pub seed: u64,
}

impl PerturbationConfig {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(Error::config("sigma", format!("must be finite and >= 0, got {sigma}")));
        }
        Ok(Self { sigma, seed })
    }
}

/// Cosine similarities with the diagonal shifted down by 2.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTable {
    pub scores: Matrix<f32>,
}

impl SimilarityTable {
    /// Column of the row maximum; ties go to the lowest index.
    pub fn argmax(&self, row: usize) -> usize {
        let r = self.scores.row(row);
        let mut best = 0;
        for (j, &v) in r.iter().enumerate() {
            if v > r[best] {
                best = j;
            }
        }
        best
    }
}

/// Encrypted rows plus the client-local replacement map. Only `rows` ever
/// leaves the client.
#[derive(Debug, Clone, PartialEq)]
pub struct EncryptedEmbeddings {
    pub rows: EmbeddingMatrix,
    pub replacement_map: Vec<usize>,
}

/// Add i.i.d. N(0, σ²) noise to every coordinate of a raw table.
pub fn perturb(emb: &EmbeddingMatrix, cfg: &PerturbationConfig) -> Result<EmbeddingMatrix> {
    emb.expect_stage(Stage::Raw)?;
    if !emb.values.is_finite() {
        return Err(Error::Input("raw embeddings contain non-finite values".into()));
    }
    let mut values = emb.values.clone();
    if cfg.sigma > 0.0 {
        let mut rng = Rng::new(cfg.seed);
        for v in values.data_mut() {
            *v += (rng.normal() * cfg.sigma) as f32;
        }
    }
    EmbeddingMatrix::new(Stage::Perturbed, values)
}

fn norms(m: &Matrix<f32>) -> Vec<f64> {
    m.iter_rows()
        .map(|r| r.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt())
        .collect()
}

fn cosine(a: &[f32], b: &[f32], na: f64, nb: f64) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    d / (na * nb)
}

/// `R[j][j'] = cos(p'_j, p'_j') − 2·[j = j']`.
pub fn masked_similarity(emb: &EmbeddingMatrix) -> Result<SimilarityTable> {
    emb.expect_stage(Stage::Perturbed)?;
    let n = emb.rows();
    if n == 0 {
        return Err(Error::Degenerate("no items to compare".into()));
    }
    let ns = norms(&emb.values);
    if let Some(j) = ns.iter().position(|&v| v == 0.0) {
        return Err(Error::Degenerate(format!("row {j} has zero norm")));
    }
    let mut scores = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let c = cosine(emb.row(i), emb.row(j), ns[i], ns[j]).clamp(-1.0, 1.0);
            if i == j {
                scores.set(i, i, (c - 2.0) as f32);
            } else {
                scores.set(i, j, c as f32);
                scores.set(j, i, c as f32);
            }
        }
    }
    Ok(SimilarityTable { scores })
}

/// Replace each row by the perturbed row of its most similar other item.
pub fn similarity_replace(
    emb: &EmbeddingMatrix,
    table: &SimilarityTable,
) -> Result<EncryptedEmbeddings> {
    emb.expect_stage(Stage::Perturbed)?;
    let n = emb.rows();
    if n < 2 {
        return Err(Error::NoNeighbor(n));
    }
    if table.scores.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "similarity table {:?} for {n} items",
            table.scores.shape()
        )));
    }
    let replacement_map: Vec<usize> = (0..n).map(|j| table.argmax(j)).collect();
    let values = emb.values.select_rows(&replacement_map)?;
    Ok(EncryptedEmbeddings {
        rows: EmbeddingMatrix::new(Stage::Encrypted, values)?,
        replacement_map,
    })
}

/// Perturb, score and replace in one step.
pub fn encrypt(raw: &EmbeddingMatrix, cfg: &PerturbationConfig) -> Result<EncryptedEmbeddings> {
    let perturbed = perturb(raw, cfg)?;
    let table = masked_similarity(&perturbed)?;
    similarity_replace(&perturbed, &table)
}

/// Mean over items of `cos(raw_j, enc_j)`.
pub fn audit_similarity(raw: &EmbeddingMatrix, enc: &EmbeddingMatrix) -> Result<f64> {
    if raw.values.shape() != enc.values.shape() {
        return Err(Error::Dimension(format!(
            "raw {:?} vs encrypted {:?}",
            raw.values.shape(),
            enc.values.shape()
        )));
    }
    let n = raw.rows();
    if n == 0 {
        return Err(Error::Degenerate("no items to audit".into()));
    }
    let (na, nb) = (norms(&raw.values), norms(&enc.values));
    if na.iter().chain(&nb).any(|&v| v == 0.0) {
        return Err(Error::Degenerate("zero-norm row in audit".into()));
    }
    let total: f64 = (0..n)
        .map(|j| cosine(raw.row(j), enc.row(j), na[j], nb[j]))
        .sum();
    Ok(total / n as f64)
}

/// What the audit compares the raw table against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditTarget {
    /// Final uploaded rows (noise and replacement).
    Encrypted,
    /// Noisy rows before replacement.
    NoiseOnly,
}

/// Mean audit similarity of `encrypt(raw, σ)` for each σ, averaged over
/// `seeds` independent noise draws.
pub fn audit_sweep(
    raw: &EmbeddingMatrix,
    sigmas: &[f64],
    seeds: &[u64],
    target: AuditTarget,
) -> Result<Vec<(f64, f64)>> {
    sigmas
        .iter()
        .map(|&sigma| {
            let mut total = 0.0;
            for &seed in seeds {
                let cfg = PerturbationConfig::new(sigma, seed)?;
                let enc = match target {
                    AuditTarget::Encrypted => encrypt(raw, &cfg)?.rows,
                    AuditTarget::NoiseOnly => perturb(raw, &cfg)?,
                };
                total += audit_similarity(raw, &enc)?;
            }
            Ok((sigma, total / seeds.len().max(1) as f64))
        })
        .collect()
}
