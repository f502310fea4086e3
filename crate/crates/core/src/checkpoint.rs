//! Binary checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! b"PTCKPT\0\0"  u32 version  u32 n  n bytes of JSON header {spec, dims}
//! u32 tensor count, then per tensor:
//!   u32 name length, name, u32 ndim, ndim × u64 dims, numel × f64 bits
//! 32-byte SHA-256 of everything above
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{InputDims, ModelSpec, RewardModel};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PTCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    dims: InputDims,
}

pub fn to_bytes(model: &RewardModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let header = serde_json::to_vec(&Header {
        spec: model.spec.clone(),
        dims: model.dims,
    })?;
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<RewardModel> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum);
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let n = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(n)?)?;
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
        params.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    // The stored tensors must be exactly what the stored config builds.
    let fresh = RewardModel::new(header.spec.clone(), header.dims, 0)?;
    let layout = |p: &ParamStore| p.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect::<Vec<_>>();
    if layout(&fresh.params) != layout(&params) {
        return Err(Error::Config("checkpoint tensors do not match its model config".into()));
    }
    Ok(RewardModel {
        spec: header.spec,
        dims: header.dims,
        params,
    })
}

pub fn save(model: &RewardModel, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &to_bytes(model)?)
}

pub fn load(path: impl AsRef<Path>) -> Result<RewardModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Loads and checks the model against the dimensions the caller will feed.
pub fn load_expecting(path: impl AsRef<Path>, dims: InputDims) -> Result<RewardModel> {
    let m = load(path)?;
    if m.dims != dims {
        return Err(Error::Config(format!(
            "checkpoint expects state_dim {} / action_dim {}, got {} / {}",
            m.dims.state_dim, m.dims.action_dim, dims.state_dim, dims.action_dim
        )));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MlpConfig, TransformerConfig};

    fn tiny() -> RewardModel {
        let spec = ModelSpec::Pt(TransformerConfig {
            embed_dim: 8,
            num_heads: 2,
            segment_len: 4,
            ..TransformerConfig::default()
        });
        RewardModel::new(spec, InputDims { state_dim: 2, action_dim: 4 }, 5).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = tiny();
        let back = from_bytes(&to_bytes(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let mut bytes = to_bytes(&tiny()).unwrap();
        let i = bytes.len() / 2;
        bytes[i] ^= 1;
        assert!(matches!(from_bytes(&bytes), Err(Error::Checksum)));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut bytes = to_bytes(&tiny()).unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        let body = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..body]);
        bytes[body..].copy_from_slice(&digest);
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::Version { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn config_must_match_tensors() {
        let mut m = RewardModel::new(
            ModelSpec::Mr(MlpConfig { hidden: vec![4] }),
            InputDims { state_dim: 2, action_dim: 4 },
            0,
        )
        .unwrap();
        m.spec = ModelSpec::Mr(MlpConfig { hidden: vec![5] });
        assert!(matches!(from_bytes(&to_bytes(&m).unwrap()), Err(Error::Config(_))));
    }
}
