use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;
use crate::{Error, Result};

pub const EMBEDDING_MAGIC: [u8; 4] = *b"SFUB";
pub const EMBEDDING_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 1;

/// Processing stage of an item text embedding table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Raw = 0,
    Perturbed = 1,
    Encrypted = 2,
    Synchronized = 3,
}

impl Stage {
    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Stage::Raw),
            1 => Ok(Stage::Perturbed),
            2 => Ok(Stage::Encrypted),
            3 => Ok(Stage::Synchronized),
            t => Err(Error::Format(format!("unknown stage tag {t}"))),
        }
    }

    pub fn tag(self) -> u8 {
        self as u8
    }
}

/// One embedding row per item index, tagged with its processing stage.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub stage: Stage,
    pub values: Matrix<f32>,
}

impl EmbeddingMatrix {
    pub fn new(stage: Stage, values: Matrix<f32>) -> Result<Self> {
        if !values.is_finite() {
            return Err(Error::Input("embedding table contains non-finite values".into()));
        }
        Ok(Self { stage, values })
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.values.row(i)
    }

    pub fn expect_stage(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(Error::Input(format!(
                "expected {stage:?} embeddings, got {:?}",
                self.stage
            )));
        }
        Ok(())
    }
}

/// `SFUB` | version u32 | rows u32 | dim u32 | stage u8 | rows×dim f32, all LE.
pub fn encode_embeddings(emb: &EmbeddingMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + emb.values.len() * 4);
    out.extend_from_slice(&EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&(emb.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(emb.dim() as u32).to_le_bytes());
    out.push(emb.stage.tag());
    for v in emb.values.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "{} bytes is shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if bytes[..4] != EMBEDDING_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != EMBEDDING_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let rows = u32_at(8) as usize;
    let dim = u32_at(12) as usize;
    let stage = Stage::from_tag(bytes[16])?;
    let expected = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format("shape overflows".into()))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "header claims {rows}x{dim} ({expected} bytes), file has {}",
            bytes.len()
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(EmbeddingMatrix {
        stage,
        values: Matrix::new(rows, dim, data)?,
    })
}

pub fn write_embeddings(path: &Path, emb: &EmbeddingMatrix) -> Result<()> {
    std::fs::write(path, encode_embeddings(emb)).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes)
}
