//! Message framing shared by the in-process and socket transports.
//!
//! ```text
//! "SFM1" | type u8 | version u32 | label_len u16 | label | SFUB payload
//! ```

use crate::datamodel::{decode_embeddings, encode_embeddings, EmbeddingMatrix, Stage};
use crate::{Error, Result};

pub const MESSAGE_MAGIC: [u8; 4] = *b"SFM1";
pub const PROTOCOL_VERSION: u32 = 1;
const FIXED_LEN: usize = 4 + 1 + 4 + 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageType {
    Upload = 1,
    Sync = 2,
}

impl MessageType {
    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(Self::Upload),
            2 => Ok(Self::Sync),
            t => Err(Error::Protocol(format!("unknown message type {t}"))),
        }
    }

    fn stage(self) -> Stage {
        match self {
            Self::Upload => Stage::Encrypted,
            Self::Sync => Stage::Synchronized,
        }
    }
}

/// What a client sends to the server: its label and encrypted rows, nothing
/// else.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpload {
    pub domain: String,
    pub embeddings: EmbeddingMatrix,
    pub version: u32,
}

impl ClientUpload {
    pub fn new(domain: impl Into<String>, embeddings: EmbeddingMatrix) -> Result<Self> {
        embeddings
            .expect_stage(Stage::Encrypted)
            .map_err(|e| Error::Protocol(e.to_string()))?;
        Ok(Self {
            domain: domain.into(),
            embeddings,
            version: PROTOCOL_VERSION,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode_message(MessageType::Upload, &self.domain, &self.embeddings)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (domain, embeddings) = decode_message(MessageType::Upload, bytes)?;
        Ok(Self {
            domain,
            embeddings,
            version: PROTOCOL_VERSION,
        })
    }
}

/// Server reply for one domain: the centroid-substituted table.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncResponse {
    pub domain: String,
    pub embeddings: EmbeddingMatrix,
}

impl SyncResponse {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode_message(MessageType::Sync, &self.domain, &self.embeddings)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (domain, embeddings) = decode_message(MessageType::Sync, bytes)?;
        Ok(Self { domain, embeddings })
    }
}

pub fn encode_message(kind: MessageType, label: &str, emb: &EmbeddingMatrix) -> Result<Vec<u8>> {
    if emb.stage != kind.stage() {
        return Err(Error::Protocol(format!(
            "{kind:?} message needs {:?} rows, got {:?}",
            kind.stage(),
            emb.stage
        )));
    }
    let label_len = u16::try_from(label.len())
        .map_err(|_| Error::Protocol(format!("domain label of {} bytes", label.len())))?;
    let payload = encode_embeddings(emb);
    let mut out = Vec::with_capacity(FIXED_LEN + label.len() + payload.len());
    out.extend_from_slice(&MESSAGE_MAGIC);
    out.push(kind as u8);
    out.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    out.extend_from_slice(&label_len.to_le_bytes());
    out.extend_from_slice(label.as_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_message(expected: MessageType, bytes: &[u8]) -> Result<(String, EmbeddingMatrix)> {
    if bytes.len() < FIXED_LEN {
        return Err(Error::Protocol(format!("message of {} bytes is truncated", bytes.len())));
    }
    if bytes[..4] != MESSAGE_MAGIC {
        return Err(Error::Protocol(format!("bad magic {:?}", &bytes[..4])));
    }
    let kind = MessageType::from_tag(bytes[4])?;
    if kind != expected {
        return Err(Error::Protocol(format!("expected {expected:?} message, got {kind:?}")));
    }
    let version = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes"));
    if version != PROTOCOL_VERSION {
        return Err(Error::Protocol(format!("unsupported protocol version {version}")));
    }
    let label_len = u16::from_le_bytes(bytes[9..11].try_into().expect("2 bytes")) as usize;
    let rest = &bytes[FIXED_LEN..];
    if rest.len() < label_len {
        return Err(Error::Protocol("label runs past end of message".into()));
    }
    let label = std::str::from_utf8(&rest[..label_len])
        .map_err(|_| Error::Protocol("domain label is not UTF-8".into()))?
        .to_string();
    let emb = decode_embeddings(&rest[label_len..]).map_err(|e| Error::Protocol(e.to_string()))?;
    if emb.stage != kind.stage() {
        return Err(Error::Protocol(format!("payload stage {:?} in {kind:?} message", emb.stage)));
    }
    Ok((label, emb))
}
