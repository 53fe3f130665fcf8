//! One-shot server round: pool the encrypted uploads, cluster them, and
//! hand every client its centroid-substituted table.

mod cluster;
pub mod transport;
mod wire;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use cluster::{
    assign, brute_force_inertia, cluster, inertia_of, kmeanspp_indices, kmeanspp_init, pool,
    synchronize, CentroidTable, ClusterConfig, Pooled, Segment,
};
pub use wire::{
    decode_message, encode_message, ClientUpload, MessageType, SyncResponse, MESSAGE_MAGIC,
    PROTOCOL_VERSION,
};

use crate::numerics::Rng;
use crate::{Error, Result};

/// Candidate cluster counts for the k sweep.
pub const K_GRID: [usize; 15] = [10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110, 120, 130, 140, 150];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    pub cluster: ClusterConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub k: usize,
    pub inertia: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Items per cluster, for each domain.
    pub occupancy: BTreeMap<String, Vec<usize>>,
    /// Clusters holding items from more than one domain.
    pub shared_clusters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub responses: Vec<SyncResponse>,
    pub table: CentroidTable,
    pub report: RoundReport,
}

/// Cluster and synchronize already-decoded uploads.
pub fn run_round(uploads: &[ClientUpload], cfg: &ServerConfig) -> Result<RoundOutcome> {
    if uploads.len() == 1 {
        log::warn!("federated round with a single client; clustering one domain only");
    }
    let pooled = pool(uploads)?;
    let mut rng = Rng::new(cfg.seed);
    let table = cluster(&pooled.points, &cfg.cluster, &mut rng)?;
    let synced = synchronize(&table, &pooled)?;
    let k = table.k();
    let mut occupancy = BTreeMap::new();
    let mut domains_per_cluster = vec![0usize; k];
    for s in &pooled.segments {
        let mut counts = vec![0usize; k];
        for &c in &table.assignments[s.offset..s.offset + s.len] {
            counts[c] += 1;
        }
        for (d, &n) in domains_per_cluster.iter_mut().zip(&counts) {
            *d += usize::from(n > 0);
        }
        occupancy.insert(s.domain.clone(), counts);
    }
    let report = RoundReport {
        k,
        inertia: table.inertia,
        iterations: table.iterations,
        converged: table.converged,
        occupancy,
        shared_clusters: domains_per_cluster.iter().filter(|&&d| d > 1).count(),
    };
    let responses = synced
        .into_iter()
        .map(|(domain, embeddings)| SyncResponse { domain, embeddings })
        .collect();
    Ok(RoundOutcome {
        responses,
        table,
        report,
    })
}

/// Server side of a round over raw message bytes. Every upload is decoded
/// before any clustering starts, so a malformed message aborts the round
/// without partial output.
pub fn serve_round(messages: &[Vec<u8>], cfg: &ServerConfig) -> Result<(Vec<Vec<u8>>, RoundOutcome)> {
    let uploads = messages
        .iter()
        .map(|m| ClientUpload::from_bytes(m))
        .collect::<Result<Vec<_>>>()?;
    let outcome = run_round(&uploads, cfg)?;
    let replies = outcome
        .responses
        .iter()
        .map(SyncResponse::to_bytes)
        .collect::<Result<Vec<_>>>()?;
    Ok((replies, outcome))
}

/// Inertia of a full round for each k in `ks` (values above the item count
/// are skipped).
pub fn k_sweep(uploads: &[ClientUpload], ks: &[usize], seed: u64, base: &ClusterConfig) -> Result<Vec<(usize, f64)>> {
    let pooled = pool(uploads)?;
    let mut out = Vec::new();
    for &k in ks {
        if k > pooled.points.rows() {
            continue;
        }
        let cfg = ClusterConfig { k, ..*base };
        let t = cluster(&pooled.points, &cfg, &mut Rng::new(seed))?;
        out.push((k, t.inertia));
    }
    if out.is_empty() {
        return Err(Error::config("k", "no grid value fits the pooled item count"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{EmbeddingMatrix, Stage};
    use crate::numerics::Matrix;

    fn upload(domain: &str, rows: usize, seed: u64) -> ClientUpload {
        let m = Matrix::randn(rows, 4, 1.0, &mut Rng::new(seed));
        ClientUpload::new(domain, EmbeddingMatrix::new(Stage::Encrypted, m).unwrap()).unwrap()
    }

    fn server(k: usize) -> ServerConfig {
        ServerConfig {
            cluster: ClusterConfig { k, ..Default::default() },
            seed: 7,
        }
    }

    #[test]
    fn k_equal_t_returns_uploads() {
        let ups = [upload("a", 5, 1), upload("b", 3, 2)];
        let out = run_round(&ups, &server(8)).unwrap();
        for (u, r) in ups.iter().zip(&out.responses) {
            assert_eq!(u.embeddings.values, r.embeddings.values);
            assert_eq!(r.embeddings.stage, Stage::Synchronized);
        }
        assert_eq!(out.report.inertia, 0.0);
    }

    #[test]
    fn k_one_makes_every_row_equal() {
        let out = run_round(&[upload("a", 5, 1), upload("b", 3, 2)], &server(1)).unwrap();
        let first = out.responses[0].embeddings.row(0).to_vec();
        for r in &out.responses {
            assert!(r.embeddings.values.iter_rows().all(|row| row == first.as_slice()));
        }
        assert_eq!(out.report.shared_clusters, 1);
        assert_eq!(out.report.occupancy["a"], vec![5]);
    }

    #[test]
    fn single_client_round_is_allowed() {
        let out = run_round(&[upload("a", 6, 1)], &server(2)).unwrap();
        assert_eq!(out.responses.len(), 1);
    }

    #[test]
    fn tampered_upload_aborts_round() {
        let good = upload("a", 4, 1).to_bytes().unwrap();
        let mut bad = upload("b", 4, 2).to_bytes().unwrap();
        bad[1] = b'!';
        assert!(matches!(serve_round(&[good.clone(), bad], &server(2)), Err(Error::Protocol(_))));
        let (replies, _) = serve_round(&[good], &server(2)).unwrap();
        assert_eq!(SyncResponse::from_bytes(&replies[0]).unwrap().domain, "a");
    }

    #[test]
    fn sweep_reports_each_k() {
        let ups = [upload("a", 60, 1), upload("b", 50, 2)];
        let ks = [70, 80, 90, 100, 200];
        let s = k_sweep(&ups, &ks, 3, &ClusterConfig::default()).unwrap();
        assert_eq!(s.iter().map(|p| p.0).collect::<Vec<_>>(), vec![70, 80, 90, 100]);
        for w in s.windows(2) {
            assert!(w[1].1 <= w[0].1 + 1e-9);
        }
    }
}
