//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! | field              | size            | notes                           |
//! |--------------------|-----------------|---------------------------------|
//! | magic              | 8               | `PFLDCKPT`                      |
//! | version            | u32             | currently 1                     |
//! | width multiplier   | f32             |                                 |
//! | landmark count     | u32             |                                 |
//! | scheme id          | u16 len + bytes | UTF-8, e.g. `68`                |
//! | metadata count     | u32             |                                 |
//! | metadata entries   |                 | u16 key len, key, u32 value len, value |
//! | entry count        | u32             |                                 |
//! | entries            |                 | see below                       |
//!
//! Each entry is: u16 name length, UTF-8 name, u8 kind (0 trainable,
//! 1 statistic), u8 rank, `rank` u32 dimensions, then the raw f32 values in
//! row-major order. Round trips are bit-exact.

use std::path::Path;

use super::params::{EntryKind, ParamStore};
use super::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PFLDCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointHeader {
    pub width: f32,
    pub num_landmarks: u32,
    pub scheme: String,
    /// Free-form key/value pairs (training progress, configuration echo).
    pub metadata: Vec<(String, String)>,
}

impl CheckpointHeader {
    pub fn new(width: f32, num_landmarks: u32, scheme: impl Into<String>) -> Self {
        Self {
            width,
            num_landmarks,
            scheme: scheme.into(),
            metadata: Vec::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        let key = key.into();
        let value = value.into();
        match self.metadata.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.metadata.push((key, value)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore,
}

fn put_str16(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len =
        u16::try_from(s.len()).map_err(|_| Error::Checkpoint(format!("string too long: {s}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn new(header: CheckpointHeader, params: ParamStore) -> Self {
        Self { header, params }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out =
            Vec::with_capacity(64 + self.params.parameter_count() * 4 + self.params.len() * 48);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.header.width.to_le_bytes());
        out.extend_from_slice(&self.header.num_landmarks.to_le_bytes());
        put_str16(&mut out, &self.header.scheme)?;
        out.extend_from_slice(&(self.header.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.header.metadata {
            put_str16(&mut out, k)?;
            out.extend_from_slice(&(v.len() as u32).to_le_bytes());
            out.extend_from_slice(v.as_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, e) in self.params.iter() {
            put_str16(&mut out, name)?;
            out.push(e.kind.code());
            let shape = e.tensor.shape();
            let rank = u8::try_from(shape.len())
                .map_err(|_| Error::Checkpoint(format!("rank too large for `{name}`")))?;
            out.push(rank);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let width = f32::from_le_bytes(r.array()?);
        let num_landmarks = r.u32()?;
        let scheme = r.str16()?;
        let meta_count = r.u32()? as usize;
        let mut metadata = Vec::with_capacity(meta_count.min(1024));
        for _ in 0..meta_count {
            let k = r.str16()?;
            let len = r.u32()? as usize;
            let v = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("metadata value is not UTF-8".into()))?;
            metadata.push((k, v));
        }
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.str16()?;
            let kind = EntryKind::from_code(r.u8()?)
                .ok_or_else(|| Error::Checkpoint(format!("bad entry kind for `{name}`")))?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Checkpoint("entry too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params
                .insert(name, kind, Tensor::from_vec(&shape, data)?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            header: CheckpointHeader {
                width,
                num_landmarks,
                scheme,
                metadata,
            },
            params,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
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
            .ok_or_else(|| Error::Checkpoint("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn str16(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.array()?) as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

/// Size in bytes of `params` in the container format with a minimal header.
pub fn serialized_size(params: &ParamStore) -> usize {
    let header = 8 + 4 + 4 + 4 + (2 + 2) + 4 + 4;
    header
        + params
            .iter()
            .map(|(name, e)| {
                2 + name.len() + 1 + 1 + 4 * e.tensor.shape().len() + 4 * e.tensor.len()
            })
            .sum::<usize>()
}

pub fn parameter_count(params: &ParamStore) -> usize {
    params.parameter_count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut p = ParamStore::new();
        p.insert(
            "a.weight",
            EntryKind::Trainable,
            Tensor::from_vec(&[2, 3], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, -0.0, 7.0]).unwrap(),
        )
        .unwrap();
        p.insert(
            "a.running_var",
            EntryKind::Statistic,
            Tensor::filled(&[3], 0.5),
        )
        .unwrap();
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut header = CheckpointHeader::new(0.25, 68, "68");
        header.set_meta("iteration", "12");
        let ck = Checkpoint::new(header, sample_store());
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.header.meta("iteration"), Some("12"));
        let (a, b) = (
            ck.params.get("a.weight").unwrap(),
            back.params.get("a.weight").unwrap(),
        );
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn serialized_size_matches_minimal_encoding() {
        let p = sample_store();
        let ck = Checkpoint::new(CheckpointHeader::new(1.0, 68, "68"), p.clone());
        assert_eq!(serialized_size(&p), ck.to_bytes().unwrap().len());
        assert_eq!(parameter_count(&ParamStore::new()), 0);
    }

    #[test]
    fn rejects_corruption() {
        let ck = Checkpoint::new(CheckpointHeader::new(1.0, 68, "68"), sample_store());
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
