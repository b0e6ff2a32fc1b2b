//! Versioned binary parameter checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! b"DAGAMCKP"  u32 version  u64 header_len  header JSON
//! u32 blocks, then per block:
//!   u32 name_len  name  u32 rank  u64 dims[rank]  f64 values[prod(dims)]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::config::ExperimentConfig;
use crate::error::{DagamError, Result};
use crate::io::dataset::atomic_write;
use crate::model::{Architecture, ModelParams};

pub const MAGIC: &[u8; 8] = b"DAGAMCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Echo stored ahead of the parameter blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub architecture: Architecture,
    pub classes: Vec<String>,
    pub config: ExperimentConfig,
}

pub fn encode_checkpoint(header: &CheckpointHeader, params: &ModelParams) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.params().len() as u32).to_le_bytes());
    for p in params.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                DagamError::load(
                    self.path,
                    None,
                    format!("truncated checkpoint at byte {}", self.pos),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self, n: u64) -> Result<usize> {
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| DagamError::load(self.path, None, format!("implausible length {n}")))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(CheckpointHeader, ModelParams)> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(8)? != MAGIC {
        return Err(DagamError::load(path, None, "not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(DagamError::load(
            path,
            None,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let hlen = r.u64()?;
    let hlen = r.len(hlen)?;
    let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| DagamError::load(path, None, format!("bad header: {e}")))?;
    let blocks = r.u32()?;
    let mut named = Vec::with_capacity(blocks as usize);
    for _ in 0..blocks {
        let nlen = r.u32()? as u64;
        let nlen = r.len(nlen)?;
        let name = String::from_utf8(r.take(nlen)?.to_vec())
            .map_err(|_| DagamError::load(path, None, "parameter name is not UTF-8"))?;
        let rank = r.u32()? as u64;
        let rank = r.len(rank)?;
        let shape = (0..rank)
            .map(|_| r.u64().and_then(|d| r.len(d)))
            .collect::<Result<Vec<_>>>()?;
        let count = shape.iter().product::<usize>();
        let raw = r.take(
            count
                .checked_mul(8)
                .ok_or_else(|| DagamError::load(path, None, "block too large"))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let value = Tensor::new(shape, data)
            .map_err(|e| DagamError::load(path, None, format!("block {name}: {e}")))?;
        named.push((name, value));
    }
    if r.pos != bytes.len() {
        return Err(DagamError::load(
            path,
            None,
            "trailing bytes after the last block",
        ));
    }
    let params = ModelParams::from_named(&header.architecture, named)
        .map_err(|e| DagamError::load(path, None, e.to_string()))?;
    Ok((header, params))
}

pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, params: &ModelParams) -> Result<()> {
    atomic_write(path, &encode_checkpoint(header, params))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ModelParams)> {
    let bytes = std::fs::read(path).map_err(|e| DagamError::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> (CheckpointHeader, ModelParams) {
        let cfg = ExperimentConfig {
            gcn_width: 4,
            ..ExperimentConfig::default()
        };
        let arch = cfg.architecture(3);
        let params = ModelParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let header = CheckpointHeader {
            architecture: arch,
            classes: vec!["a".into(), "b".into(), "c".into()],
            config: cfg,
        };
        (header, params)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (h, p) = sample();
        let bytes = encode_checkpoint(&h, &p);
        assert_eq!(&bytes[..8], MAGIC);
        let (h2, p2) = decode_checkpoint(&bytes, Path::new("m.ckpt")).unwrap();
        assert_eq!(h2, h);
        assert_eq!(p2, p);
        assert_eq!(encode_checkpoint(&h2, &p2), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (h, p) = sample();
        let bytes = encode_checkpoint(&h, &p);
        let path = Path::new("m.ckpt");
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3], path).is_err());
        let mut wrong = bytes.clone();
        wrong[8] = 7;
        assert!(decode_checkpoint(&wrong, path)
            .unwrap_err()
            .to_string()
            .contains("version 7"));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra, path).is_err());
        assert!(decode_checkpoint(b"hello", path).is_err());
    }
}
