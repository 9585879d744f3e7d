//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "LXCK" | version u32
//! pair count u32 | (key str, value str)*        model config
//! blob count u32 | (name str, dtype u8, rank u32, dims u64*, data)*
//! ```
//!
//! A `str` is a u32 byte length followed by UTF-8. The only dtype is
//! `0 = f64`, stored as raw little-endian bits so the round trip is exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"LXCK";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let pairs = model.config().to_pairs();
    out.extend_from_slice(&(pairs.len() as u32).to_le_bytes());
    for (k, v) in &pairs {
        put_str(&mut out, k);
        put_str(&mut out, v);
    }
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.params().iter() {
        put_str(&mut out, name);
        out.push(DTYPE_F64);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.offset,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.offset < n {
            return self.fail(format!("truncated while reading {what}"));
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn str(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let start = self.offset;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            offset: start,
            message: format!("{what} is not UTF-8"),
        })
    }
}

/// Decodes a checkpoint. Nothing is constructed unless the whole file parses.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, offset: 0 };
    if r.take(4, "magic")? != MAGIC {
        r.offset = 0;
        return r.fail("bad magic");
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let n_pairs = r.u32("config size")?;
    let mut pairs = Vec::new();
    for _ in 0..n_pairs {
        let k = r.str("config key")?;
        let v = r.str("config value")?;
        pairs.push((k, v));
    }
    let header_end = r.offset;
    let config = ModelConfig::from_pairs(&pairs).map_err(|e| Error::Format {
        offset: header_end,
        message: e.to_string(),
    })?;
    let n_blobs = r.u32("blob count")?;
    let mut named = Vec::new();
    for _ in 0..n_blobs {
        let name = r.str("blob name")?;
        let dtype_at = r.offset;
        let dtype = r.take(1, "dtype")?[0];
        if dtype != DTYPE_F64 {
            r.offset = dtype_at;
            return r.fail(format!("unknown dtype {dtype} for {name}"));
        }
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let Some(bytes) = numel.and_then(|n| n.checked_mul(8)) else {
            return r.fail(format!("shape {shape:?} of {name} overflows"));
        };
        let raw = r.take(bytes, "tensor data")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        named.push((name, Tensor::new(data, &shape)?));
    }
    if r.offset != bytes.len() {
        return r.fail("trailing bytes");
    }
    // parameters are fully overwritten; the seed only fixes the layout
    let mut model = Model::new(config, 0)?;
    model.load_named(named)?;
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        Model::new(
            ModelConfig {
                layers: 2,
                d_model: 8,
                heads: 2,
                d_ff: 16,
                max_len: 6,
                vocab_size: 12,
                share_off_ramps: false,
                dropout: 0.1,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model();
        let back = from_bytes(&to_bytes(&m)).unwrap();
        assert!(back.bitwise_eq(&m));
        assert_eq!(back.config(), m.config());
    }

    #[test]
    fn truncation_is_a_format_error() {
        let bytes = to_bytes(&model());
        for cut in [0, 3, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            match from_bytes(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = to_bytes(&model());
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
        let mut bytes = to_bytes(&model());
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(from_bytes(&bytes), Err(Error::Version { found: 7, expected: 1 })));
    }

    #[test]
    fn trailing_garbage_rejected() {
        let mut bytes = to_bytes(&model());
        bytes.push(0);
        assert!(matches!(from_bytes(&bytes), Err(Error::Format { .. })));
    }
}
