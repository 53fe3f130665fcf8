//! Versioned binary checkpoints: a 4-byte kind magic, format version,
//! a JSON header describing the model configuration, then named tensors.
//!
//! ```text
//! magic[4] | version u32 | header_len u32 | header (UTF-8 JSON)
//! | tensor_count u32 | { name_len u16 | name | rows u32 | cols u32
//! | trainable u8 | rows*cols f32 LE }*
//! ```

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{Matrix, ParamStore, ParamTensor};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode<H: Serialize>(kind: [u8; 4], header: &H, store: &ParamStore) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(16 + header.len() + store.num_scalars() * 4);
    out.extend_from_slice(&kind);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
        out.push(u8::from(p.trainable));
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
}

pub fn decode<H: DeserializeOwned>(kind: [u8; 4], bytes: &[u8]) -> Result<(H, ParamStore)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != kind {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&kind)
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header: H = serde_json::from_slice(r.take(hlen)?)?;
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let nlen = r.u16()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let trainable = r.take(1)?[0] != 0;
        let raw = r.take(rows * cols * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        store.push(ParamTensor::new(name, Matrix::new(rows, cols, data)?, trainable));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((header, store))
}

pub fn save<H: Serialize>(path: &Path, kind: [u8; 4], header: &H, store: &ParamStore) -> Result<()> {
    let bytes = encode(kind, header, store)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<H: DeserializeOwned>(path: &Path, kind: [u8; 4]) -> Result<(H, ParamStore)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(kind, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn round_trip_preserves_bits_and_flags() {
        let mut rng = Rng::new(3);
        let mut store = ParamStore::new();
        store.add("a", Matrix::randn(3, 4, 1.0, &mut rng));
        let b = store.add("b.bias", Matrix::zeros(1, 0));
        store.get_mut(b).trainable = false;
        let bytes = encode(*b"TEST", &vec![1u32, 2], &store).unwrap();
        let (h, back): (Vec<u32>, _) = decode(*b"TEST", &bytes).unwrap();
        assert_eq!(h, vec![1, 2]);
        assert_eq!(back.fingerprint(), store.fingerprint());
        assert!(!back.get(b).trainable);
        assert!(decode::<Vec<u32>>(*b"NOPE", &bytes).is_err());
        assert!(decode::<Vec<u32>>(*b"TEST", &bytes[..bytes.len() - 1]).is_err());
    }
}
