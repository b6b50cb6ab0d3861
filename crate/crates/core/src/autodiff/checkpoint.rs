//! Named-tensor checkpoint container.
//!
//! Layout (all integers u32 little-endian):
//!
//! ```text
//! "XHCKPT1\0" | count | count x { name_len | name (UTF-8) | rank | extents... | f32 LE data }
//! ```
//!
//! An optional JSON header travels as the first record under the reserved
//! name `__header__`: a rank-1 record whose payload bytes are the UTF-8 text
//! padded with spaces to a multiple of four.

use std::collections::BTreeMap;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"XHCKPT1\0";
pub const HEADER_RECORD: &str = "__header__";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub header: Option<String>,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl Checkpoint {
    pub fn new(header: Option<String>) -> Self {
        Checkpoint {
            header,
            tensors: BTreeMap::new(),
        }
    }

    pub fn header_json(&self) -> Result<Option<serde_json::Value>> {
        self.header
            .as_deref()
            .map(|h| serde_json::from_str(h).map_err(|e| Error::config(format!("checkpoint header: {e}"))))
            .transpose()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, self.tensors.len() + usize::from(self.header.is_some()));
        if let Some(h) = &self.header {
            let mut bytes = h.as_bytes().to_vec();
            while bytes.len() % 4 != 0 || bytes.is_empty() {
                bytes.push(b' ');
            }
            put_u32(&mut out, HEADER_RECORD.len());
            out.extend_from_slice(HEADER_RECORD.as_bytes());
            put_u32(&mut out, 1);
            put_u32(&mut out, bytes.len() / 4);
            out.extend_from_slice(&bytes);
        }
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank());
            for &e in t.shape() {
                put_u32(&mut out, e);
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint; `origin` only labels error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format(origin, "missing XHCKPT1 magic"));
        }
        let count = r.u32()?;
        let mut ckpt = Checkpoint::default();
        for _ in 0..count {
            let name_len = r.u32()?;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(origin, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()?);
            }
            let numel: usize = shape.iter().product();
            let payload = r.take(numel.checked_mul(4).ok_or_else(|| Error::format(origin, "record too large"))?)?;
            if name == HEADER_RECORD {
                let text = std::str::from_utf8(payload)
                    .map_err(|_| Error::format(origin, "header is not UTF-8"))?;
                ckpt.header = Some(text.trim_end_matches(' ').to_string());
                continue;
            }
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::format(origin, format!("{name}: {e}")))?;
            if ckpt.tensors.insert(name.clone(), t).is_some() {
                return Err(Error::format(origin, format!("duplicate tensor {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format(origin, "trailing bytes after last record"));
        }
        Ok(ckpt)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.origin, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_matches_the_documented_bytes() {
        let mut c = Checkpoint::new(None);
        c.tensors.insert("w".into(), Tensor::new(vec![2], vec![1.0f32, -2.0]).unwrap());
        let b = c.to_bytes();
        let mut expected = b"XHCKPT1\0".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(b'w');
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(b, expected);
    }

    #[test]
    fn header_survives_round_trip() {
        let mut c = Checkpoint::new(Some(r#"{"kind":"base","x":1}"#.into()));
        c.tensors.insert("a.b".into(), Tensor::new(vec![1, 3], vec![0.5f32, 1.5, -0.0]).unwrap());
        let back = Checkpoint::from_bytes(&c.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.header_json().unwrap().unwrap()["kind"], "base");
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let c = Checkpoint::new(None);
        let mut b = c.to_bytes();
        b[0] = b'Y';
        assert!(Checkpoint::from_bytes(&b, Path::new("m")).is_err());
        let mut c = Checkpoint::new(None);
        c.tensors.insert("w".into(), Tensor::zeros(&[4]));
        let b = c.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1], Path::new("m")).is_err());
    }
}
