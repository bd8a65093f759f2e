//! Checkpoint file: 8-byte magic `NRSCKPT1`, a little-endian `u32` JSON
//! header length, the JSON metadata, then every parameter group in fixed
//! order (block weights then bias for each block, head weights, head bias),
//! row-major little-endian `f64`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelError, ScorerParams};
use crate::embed::{PoolingSpec, ProviderConfig};

pub const MAGIC: &[u8; 8] = b"NRSCKPT1";
const MAGIC_PREFIX: &[u8; 7] = b"NRSCKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub input_dim: usize,
    pub k: usize,
    pub window: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub pooling: PoolingSpec,
    pub seed: u64,
    /// Training phases completed, in order.
    #[serde(default)]
    pub phases: Vec<String>,
    #[serde(default)]
    pub provider: Option<ProviderConfig>,
}

impl CheckpointMeta {
    pub fn for_params(params: &ScorerParams, k: usize, window: usize, pooling: PoolingSpec, seed: u64) -> Self {
        Self {
            input_dim: params.input_dim(),
            k,
            window,
            hidden: params.hidden(),
            blocks: params.num_blocks(),
            pooling,
            seed,
            phases: Vec::new(),
            provider: None,
        }
    }

    fn check(&self) -> Result<(), ModelError> {
        let expected = self.pooling.input_dim(self.k, self.window);
        if expected != self.input_dim {
            return Err(ModelError::Shape(format!(
                "input_dim {} inconsistent with k={} window={} pooling={:?} (expected {expected})",
                self.input_dim, self.k, self.window, self.pooling
            )));
        }
        if let Some(p) = &self.provider {
            if p.dim() != self.k {
                return Err(ModelError::Shape(format!("provider dimension {} != k {}", p.dim(), self.k)));
            }
        }
        if self.hidden == 0 || self.blocks == 0 {
            return Err(ModelError::Shape("hidden and blocks must be positive".into()));
        }
        Ok(())
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &ScorerParams, meta: &CheckpointMeta) -> Result<(), ModelError> {
    if meta.input_dim != params.input_dim() || meta.hidden != params.hidden() || meta.blocks != params.num_blocks() {
        return Err(ModelError::Shape("metadata does not describe these parameters".into()));
    }
    meta.check()?;
    let header = serde_json::to_vec(meta).map_err(|e| ModelError::Meta(e.to_string()))?;
    let len = u32::try_from(header.len()).map_err(|_| ModelError::Meta("header too large".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&header)?;
    for s in params.slices() {
        for x in s {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ScorerParams, CheckpointMeta), ModelError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return if MAGIC.starts_with(&bytes) {
            Err(ModelError::Truncated("missing magic".into()))
        } else {
            Err(ModelError::BadMagic)
        };
    }
    if &bytes[..8] != MAGIC {
        if &bytes[..7] == MAGIC_PREFIX {
            return Err(ModelError::Version(String::from_utf8_lossy(&bytes[..8]).into_owned()));
        }
        return Err(ModelError::BadMagic);
    }
    let len_bytes: [u8; 4] = bytes
        .get(8..12)
        .ok_or_else(|| ModelError::Truncated("missing header length".into()))?
        .try_into()
        .expect("4-byte slice");
    let len = u32::from_le_bytes(len_bytes) as usize;
    let header = bytes
        .get(12..12 + len)
        .ok_or_else(|| ModelError::Truncated(format!("header of {len} bytes incomplete")))?;
    let meta: CheckpointMeta = serde_json::from_slice(header).map_err(|e| ModelError::Meta(e.to_string()))?;
    meta.check()?;

    let mut params = ScorerParams::zeros(meta.input_dim, meta.hidden, meta.blocks)?;
    let payload = &bytes[12 + len..];
    let expected = params.param_count() * 8;
    if payload.len() != expected {
        if payload.len() % 8 != 0 {
            return Err(ModelError::Truncated(format!(
                "payload of {} bytes is not a whole number of f64 values",
                payload.len()
            )));
        }
        return Err(ModelError::Shape(format!(
            "metadata implies {} parameters, payload holds {}",
            params.param_count(),
            payload.len() / 8
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    for s in params.slices_mut() {
        for x in s.iter_mut() {
            *x = values.next().expect("length checked");
        }
    }
    if !params.is_finite() {
        return Err(ModelError::Shape("non-finite parameter in payload".into()));
    }
    Ok((params, meta))
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ScorerParams, meta: &CheckpointMeta) -> Result<(), ModelError> {
    write_checkpoint(BufWriter::new(File::create(path)?), params, meta)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ScorerParams, CheckpointMeta), ModelError> {
    read_checkpoint(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn sample() -> (ScorerParams, CheckpointMeta) {
        let p = init_params(16, 8, 3, 5).unwrap();
        let mut meta = CheckpointMeta::for_params(&p, 4, 2, PoolingSpec::default(), 5);
        meta.phases = vec!["utterance".into()];
        meta.provider = Some(ProviderConfig::Hashed {
            k: 4,
            seed: 1,
            alpha: 0.7,
        });
        (p, meta)
    }

    fn encode(p: &ScorerParams, m: &CheckpointMeta) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, p, m).unwrap();
        buf
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let (p, m) = sample();
        let (q, n) = read_checkpoint(encode(&p, &m).as_slice()).unwrap();
        assert_eq!(m, n);
        for (a, b) in p.slices().iter().zip(q.slices()) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn corrupt_magic() {
        let (p, m) = sample();
        let mut buf = encode(&p, &m);
        buf[7] = b'2';
        assert!(matches!(read_checkpoint(buf.as_slice()), Err(ModelError::Version(_))));
        buf[0] = b'X';
        assert!(matches!(read_checkpoint(buf.as_slice()), Err(ModelError::BadMagic)));
    }

    #[test]
    fn truncated_payload() {
        let (p, m) = sample();
        let buf = encode(&p, &m);
        assert!(matches!(read_checkpoint(&buf[..buf.len() - 3]), Err(ModelError::Truncated(_))));
        assert!(matches!(read_checkpoint(&buf[..10]), Err(ModelError::Truncated(_))));
        assert!(matches!(read_checkpoint(&buf[..4]), Err(ModelError::Truncated(_))));
    }

    #[test]
    fn meta_payload_shape_mismatch() {
        // Meta claims a 256-wide input, payload was written for 128.
        let small = init_params(128, 8, 3, 0).unwrap();
        let meta_small = CheckpointMeta::for_params(&small, 64, 0, PoolingSpec::default(), 0);
        let buf = encode(&small, &meta_small);
        let len = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        let payload = &buf[12 + len..];
        let big_meta = CheckpointMeta { input_dim: 256, window: 2, ..meta_small };
        let header = serde_json::to_vec(&big_meta).unwrap();
        let mut forged = MAGIC.to_vec();
        forged.extend((header.len() as u32).to_le_bytes());
        forged.extend(header);
        forged.extend(payload);
        assert!(matches!(read_checkpoint(forged.as_slice()), Err(ModelError::Shape(_))));
    }

    #[test]
    fn inconsistent_meta_rejected() {
        let (p, mut m) = sample();
        m.window = 3;
        let mut buf = Vec::new();
        assert!(matches!(write_checkpoint(&mut buf, &p, &m), Err(ModelError::Shape(_))));
    }
}
