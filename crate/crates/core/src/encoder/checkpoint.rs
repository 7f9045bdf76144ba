//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `QARCKPT\0`, `u32` version, `u32` header
//! length + JSON header, `u32` tensor count, then per tensor `u32` name length,
//! name bytes, `u64` rows, `u64` cols and `rows * cols` `f64` values. A SHA-256
//! digest of everything before it closes the file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamStore};

pub const MAGIC: &[u8; 8] = b"QARCKPT\0";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
/// Guards allocation when a corrupted header claims an absurd size.
const MAX_ELEMENTS: u64 = 1 << 28;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    /// Model family, e.g. `"teacher"` or `"student"`.
    pub kind: String,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn encode_checkpoint(store: &ParamStore, header: &CheckpointHeader) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(header)?;
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, m) in store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParamStore, CheckpointHeader)> {
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
        return Err(Error::Checkpoint("file too short".into()));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = r.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        if store.find(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
        let rows = r.u64()?;
        let cols = r.u64()?;
        let n = rows
            .checked_mul(cols)
            .filter(|&n| n <= MAX_ELEMENTS)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
        let raw = r.take(n as usize * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.add(name, Matrix::from_vec(rows as usize, cols as usize, data));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok((store, header))
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, header: &CheckpointHeader) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, encode_checkpoint(store, header)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointHeader)> {
    decode_checkpoint(&fs::read(path)?)
}

/// Rejects a checkpoint whose vocabulary size differs from the runtime one.
pub fn check_vocab(header: &CheckpointHeader, vocab_size: usize) -> Result<()> {
    if header.encoder.vocab_size != vocab_size {
        return Err(Error::config(format!(
            "checkpoint vocab_size {} does not match runtime vocabulary of {vocab_size}",
            header.encoder.vocab_size
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, EncoderConfig};

    fn sample() -> (ParamStore, CheckpointHeader) {
        let cfg = EncoderConfig { d_model: 8, n_layers: 1, n_heads: 2, ffn_width: 8, ..EncoderConfig::toy(12) };
        let p = init_params(&cfg, 4).unwrap();
        let header = CheckpointHeader { kind: "encoder".into(), encoder: cfg, extra: serde_json::json!({"a": 1}) };
        (p.store, header)
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let (store, header) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &store, &header).unwrap();
        let (loaded, h) = load_checkpoint(&path).unwrap();
        assert_eq!(h, header);
        assert_eq!(loaded.checksum(), store.checksum());
        assert_eq!(loaded.shapes(), store.shapes());
    }

    #[test]
    fn corruption_is_detected() {
        let (store, header) = sample();
        let bytes = encode_checkpoint(&store, &header).unwrap();
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(decode_checkpoint(&flipped), Err(Error::Checkpoint(_))));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 5]), Err(Error::Checkpoint(_))));
        assert!(matches!(decode_checkpoint(b"nope"), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn vocab_mismatch_is_configuration_error() {
        let (_, header) = sample();
        assert!(check_vocab(&header, 12).is_ok());
        assert!(matches!(check_vocab(&header, 13), Err(Error::Configuration(_))));
    }
}
