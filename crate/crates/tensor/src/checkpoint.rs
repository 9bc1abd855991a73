//! Tensor checkpoint container.
//!
//! All integers little-endian:
//!
//! ```text
//! offset  size        field
//! 0       4           magic "BLNK"
//! 4       4           format version (u32, currently 1)
//! 8       4           metadata length M (u32)
//! 12      M           metadata, UTF-8 (free-form structured text; may be empty)
//! ..      4           tensor count (u32)
//! then per tensor:
//!         4           name length L (u32)
//!         L           name, UTF-8
//!         4           rank R (u32)
//!         8*R         extents (u64 each)
//!         4*prod      values, f32, row-major
//! ```
//!
//! Trailing bytes are rejected. Files are written to a temporary sibling and
//! renamed into place, so a reader never sees a partial checkpoint.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BLNK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub tensors: IndexMap<String, Tensor<f32>>,
}

pub fn encode<'a>(
    metadata: &str,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> Vec<u8> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(metadata.len() as u32).to_le_bytes());
    out.extend_from_slice(metadata.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Little-endian cursor that reports the byte offset of every failure.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn error(&self, detail: impl Into<String>) -> NnError {
        NnError::Parse {
            offset: self.offset(),
            detail: detail.into(),
        }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.error(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let at = self.offset();
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| NnError::Parse {
            offset: at,
            detail: format!("{what} is not valid UTF-8"),
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(NnError::Parse {
            offset: 0,
            detail: "bad magic, expected \"BLNK\"".into(),
        });
    }
    let version = r.u32("version")?;
    if version > CHECKPOINT_VERSION || version == 0 {
        return Err(NnError::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let metadata = r.string("metadata")?;
    let count = r.u32("tensor count")?;
    let mut tensors = IndexMap::new();
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.u64("extent")?;
            if d == 0 {
                return Err(r.error(format!("zero extent in tensor {name}")));
            }
            shape.push(d as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&l| l.checked_mul(4).is_some_and(|b| b <= r.remaining()))
            .ok_or_else(|| r.error(format!("tensor {name} extents {shape:?} exceed file size")))?;
        let raw = r.take(len * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors.contains_key(&name) {
            return Err(r.error(format!("duplicate tensor name {name}")));
        }
        tensors.insert(name, Tensor::from_parts(shape, data));
    }
    if r.remaining() != 0 {
        return Err(r.error("trailing bytes after last tensor"));
    }
    Ok(Checkpoint { metadata, tensors })
}

/// Writes `bytes` to `path` through a temporary sibling file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| NnError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".partial-{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io)
}

pub fn save<'a>(
    path: &Path,
    metadata: &str,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> Result<()> {
    write_atomic(path, &encode(metadata, tensors))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|source| NnError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let a = Tensor::new(&[2, 2], vec![1.0f32, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap();
        let b = Tensor::new(&[3], vec![0.1f32, 0.2, 0.3]).unwrap();
        encode("preset = \"desk\"\n", [("a", &a), ("layer.b", &b)])
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let bytes = sample();
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.metadata, "preset = \"desk\"\n");
        assert_eq!(ck.tensors.keys().collect::<Vec<_>>(), ["a", "layer.b"]);
        let re = encode(&ck.metadata, ck.tensors.iter().map(|(k, v)| (k.as_str(), v)));
        assert_eq!(re, bytes);
        assert_eq!(ck.tensors["a"].data()[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn byte_layout() {
        let bytes = sample();
        assert_eq!(&bytes[0..4], b"BLNK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let p = 12 + meta_len;
        assert_eq!(u32::from_le_bytes(bytes[p..p + 4].try_into().unwrap()), 2);
        // first entry: name "a", rank 2, extents 2 and 2
        assert_eq!(u32::from_le_bytes(bytes[p + 4..p + 8].try_into().unwrap()), 1);
        assert_eq!(bytes[p + 8], b'a');
        assert_eq!(u32::from_le_bytes(bytes[p + 9..p + 13].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[p + 13..p + 21].try_into().unwrap()), 2);
    }

    #[test]
    fn rejects_bad_magic_and_newer_version() {
        let mut bytes = sample();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(NnError::Parse { offset: 0, .. })));
        let mut bytes = sample();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(NnError::UnsupportedVersion { found: 2, .. })));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample();
        let cut = &bytes[..bytes.len() - 3];
        match decode(cut) {
            Err(NnError::Parse { offset, .. }) => assert!(offset > 12 && (offset as usize) < cut.len()),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn atomic_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.blnk");
        let t = Tensor::from_fn(&[4, 3], |i| i as f32 * 0.25);
        save(&path, "", [("w", &t)]).unwrap();
        let ck = load(&path).unwrap();
        assert_eq!(ck.tensors["w"], t);
        let leftovers = fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(leftovers, 1);
    }
}
