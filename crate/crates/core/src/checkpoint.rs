//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic[4] | version u32 | meta_len u32 | meta (JSON) | n u32
//! n x { name_len u32 | name | layer_len u32 | layer | trainable u8 | ndim u32 | dims u64[ndim] }
//! n x f64[len] value blobs
//! crc32 u32 over everything above
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{DenseTensor, Param, ParamStore};

pub const VERSION: u32 = 1;

/// A decoded checkpoint: JSON metadata plus the parameter table.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub magic: [u8; 4],
    pub meta: String,
    pub params: ParamStore,
}

pub fn encode(magic: &[u8; 4], meta: &str, params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.layer.len() as u32).to_le_bytes());
        out.extend_from_slice(p.layer.as_bytes());
        out.push(u8::from(p.trainable));
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for p in params.params() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::ChecksumFailed)?;
        if end > self.buf.len() {
            return Err(Error::ChecksumFailed);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::IncompatibleCheckpoint("non-utf8 string".into()))
    }
}

pub fn decode(bytes: &[u8], expected_magic: &[u8; 4]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != expected_magic {
        let got = bytes.get(..4.min(bytes.len())).unwrap_or(&[]);
        return Err(Error::IncompatibleCheckpoint(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(expected_magic),
            String::from_utf8_lossy(got)
        )));
    }
    if bytes.len() < 12 {
        return Err(Error::ChecksumFailed);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(Error::ChecksumFailed);
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::IncompatibleCheckpoint(format!("version {version}, expected {VERSION}")));
    }
    let meta = r.string()?;
    let n = r.u32()? as usize;
    let mut headers = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.string()?;
        let layer = r.string()?;
        let trainable = r.take(1)?[0] != 0;
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        headers.push((name, layer, trainable, dims));
    }
    let mut params = Vec::with_capacity(n);
    for (name, layer, trainable, dims) in headers {
        let len: usize = dims.iter().product();
        let raw = r.take(len * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let value = DenseTensor::new(dims, data)
            .map_err(|e| Error::IncompatibleCheckpoint(format!("tensor {name}: {e}")))?;
        params.push(Param {
            name,
            layer,
            value,
            trainable,
        });
    }
    if r.pos != body.len() {
        return Err(Error::IncompatibleCheckpoint("trailing bytes".into()));
    }
    Ok(Checkpoint {
        magic: *expected_magic,
        meta,
        params: ParamStore::from_params(params),
    })
}

pub fn save(path: &Path, magic: &[u8; 4], meta: &str, params: &ParamStore) -> Result<()> {
    std::fs::write(path, encode(magic, meta, params))?;
    Ok(())
}

pub fn load(path: &Path, magic: &[u8; 4]) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    decode(&bytes, magic)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", "l0", DenseTensor::matrix(2, 2, vec![1.0, -0.0, 1e-300, 3.5]).unwrap(), true);
        s.add("b", "l1", DenseTensor::vector(vec![0.1]).unwrap(), false);
        s
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = store();
        let bytes = encode(b"TST1", "{\"k\":1}", &s);
        let c = decode(&bytes, b"TST1").unwrap();
        assert_eq!(c.meta, "{\"k\":1}");
        assert!(c.params.bitwise_eq(&s));
        assert!(!c.params.param(1).trainable);
        assert_eq!(c.params.param(1).layer, "l1");
    }

    #[test]
    fn truncation_and_corruption_fail_checksum() {
        let bytes = encode(b"TST1", "{}", &store());
        assert!(matches!(decode(&bytes[..bytes.len() - 9], b"TST1"), Err(Error::ChecksumFailed)));
        let mut bad = bytes.clone();
        bad[30] ^= 0xff;
        assert!(matches!(decode(&bad, b"TST1"), Err(Error::ChecksumFailed)));
    }

    #[test]
    fn wrong_magic_and_version_are_incompatible() {
        let bytes = encode(b"TST1", "{}", &store());
        assert!(matches!(decode(&bytes, b"XXX1"), Err(Error::IncompatibleCheckpoint(_))));
        let mut v2 = bytes[..bytes.len() - 4].to_vec();
        v2[4] = 2;
        let crc = crc32fast::hash(&v2);
        v2.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode(&v2, b"TST1"), Err(Error::IncompatibleCheckpoint(_))));
    }
}
