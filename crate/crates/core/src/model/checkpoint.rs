//! `SOTC` container: named f64 tensors plus a textual metadata block.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SOTC" | version u32 | meta_len u64 | payload_len u64
//! metadata (UTF-8, `key = value` lines, keys sorted)
//! payload (row-major f64 tensors, concatenated)
//! CRC-32 u32 over every preceding byte
//! ```
//!
//! Each tensor has a directory line `tensor.<name> = <rows>,<cols>,<offset>`
//! in the metadata, with `offset` counted in bytes from the payload start.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::numerics::Tensor2D;

pub const MAGIC: &[u8; 4] = b"SOTC";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;
const TENSOR_PREFIX: &str = "tensor.";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    /// Free-form metadata; `tensor.*` keys are reserved for the directory.
    pub meta: BTreeMap<String, String>,
    /// Tensors in payload order.
    pub tensors: Vec<(String, Tensor2D)>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        let mut c = Self::default();
        c.set("kind", kind);
        c
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str, CheckpointError> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CheckpointError::MissingKey(key.to_string()))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| CheckpointError::Metadata(format!("cannot parse `{key}` = `{raw}`")))
    }

    pub fn kind(&self) -> &str {
        self.meta.get("kind").map_or("", String::as_str)
    }

    pub fn expect_kind(&self, expected: &str) -> Result<(), CheckpointError> {
        if self.kind() != expected {
            return Err(CheckpointError::WrongKind {
                expected: expected.to_string(),
                found: self.kind().to_string(),
            });
        }
        Ok(())
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor2D) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor2D, CheckpointError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
    }

    pub fn has_tensor(&self, name: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n == name)
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = self.meta.clone();
        if let Some(k) = meta.keys().find(|k| k.starts_with(TENSOR_PREFIX)) {
            return Err(Error::invalid(format!(
                "metadata key `{k}` uses the reserved tensor prefix"
            )));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let key = format!("{TENSOR_PREFIX}{name}");
            if meta.contains_key(&key) {
                return Err(Error::invalid(format!("duplicate tensor name `{name}`")));
            }
            meta.insert(key, format!("{},{},{}", t.rows(), t.cols(), offset));
            offset += t.len() * 8;
        }
        let mut text = String::new();
        for (k, v) in &meta {
            if k.is_empty() || k.contains(" = ") || k.contains('\n') || v.contains('\n') {
                return Err(Error::invalid(format!("metadata entry `{k}` cannot be encoded")));
            }
            text.push_str(k);
            text.push_str(" = ");
            text.push_str(v);
            text.push('\n');
        }
        let payload_len = offset;
        let mut out = Vec::with_capacity(HEADER_LEN + text.len() + payload_len + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(&(payload_len as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for (_, t) in &self.tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 {
            return Err(CheckpointError::Truncated {
                needed: HEADER_LEN + 4,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic { found: magic });
        }
        if bytes.len() < HEADER_LEN {
            return Err(CheckpointError::Truncated {
                needed: HEADER_LEN + 4,
                found: bytes.len(),
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion {
                found: version,
                supported: VERSION,
            });
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_len = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
        let needed = HEADER_LEN
            .checked_add(meta_len)
            .and_then(|n| n.checked_add(payload_len))
            .and_then(|n| n.checked_add(4))
            .ok_or_else(|| CheckpointError::Metadata("section lengths overflow".into()))?;
        if bytes.len() < needed {
            return Err(CheckpointError::Truncated {
                needed,
                found: bytes.len(),
            });
        }
        if bytes.len() > needed {
            return Err(CheckpointError::Metadata(format!(
                "{} trailing bytes after checksum",
                bytes.len() - needed
            )));
        }
        let body = &bytes[..needed - 4];
        let stored = u32::from_le_bytes(bytes[needed - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::ChecksumMismatch { stored, computed });
        }
        let text = std::str::from_utf8(&body[HEADER_LEN..HEADER_LEN + meta_len])
            .map_err(|e| CheckpointError::Metadata(format!("metadata is not UTF-8: {e}")))?;
        let payload = &body[HEADER_LEN + meta_len..];

        let mut meta = BTreeMap::new();
        let mut directory = Vec::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| CheckpointError::Metadata(format!("line without ` = `: {line:?}")))?;
            if let Some(name) = k.strip_prefix(TENSOR_PREFIX) {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|p| p.parse())
                    .collect::<Result<_, _>>()
                    .map_err(|_| CheckpointError::Metadata(format!("bad directory entry {line:?}")))?;
                let [rows, cols, offset] = parts[..] else {
                    return Err(CheckpointError::Metadata(format!("bad directory entry {line:?}")));
                };
                directory.push((offset, name.to_string(), rows, cols));
            } else {
                meta.insert(k.to_string(), v.to_string());
            }
        }
        directory.sort();
        let mut tensors = Vec::with_capacity(directory.len());
        let mut cursor = 0;
        for (offset, name, rows, cols) in directory {
            let n = rows * cols;
            if offset != cursor || offset + n * 8 > payload.len() {
                return Err(CheckpointError::Metadata(format!(
                    "tensor `{name}` has an inconsistent offset"
                )));
            }
            let data: Vec<f64> = payload[offset..offset + n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor2D::new(rows, cols, data)
                .map_err(|e| CheckpointError::Metadata(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
            cursor = offset + n * 8;
        }
        if cursor != payload.len() {
            return Err(CheckpointError::Metadata("payload has unreferenced bytes".into()));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }

    /// CRC-32 of the serialised form, excluding its own trailing checksum
    /// (a CRC over data plus its CRC is the same constant for every input).
    pub fn fingerprint(&self) -> Result<u32> {
        let bytes = self.to_bytes()?;
        Ok(crc32fast::hash(&bytes[..bytes.len() - 4]))
    }
}

/// Read only the `kind` of a container file, if it is one.
pub fn peek_kind(path: impl AsRef<Path>) -> Option<String> {
    let bytes = fs::read(path).ok()?;
    Checkpoint::from_bytes(&bytes).ok().map(|c| c.kind().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("test");
        c.set("alpha", 0.25);
        c.set("note", "two words");
        c.push("b", Tensor2D::from_fn(2, 3, |i, j| i as f64 - j as f64 / 3.0));
        c.push("a", Tensor2D::filled(1, 1, -0.0));
        c
    }

    #[test]
    fn fingerprint_tracks_content() {
        let c = sample();
        let mut d = sample();
        d.tensors[1].1.set(0, 0, 0.0);
        let mut e = sample();
        e.set("note", "two word");
        let fps = [
            c.fingerprint().unwrap(),
            d.fingerprint().unwrap(),
            e.fingerprint().unwrap(),
        ];
        assert!(fps[0] != fps[1] && fps[0] != fps[2] && fps[1] != fps[2]);
        assert_eq!(fps[0], sample().fingerprint().unwrap());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.meta, c.meta);
        assert_eq!(back.tensor_names().collect::<Vec<_>>(), vec!["b", "a"]);
        for ((_, x), (_, y)) in back.tensors.iter().zip(&c.tensors) {
            let bx: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            let by: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bx, by);
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_is_classified() {
        let bytes = sample().to_bytes().unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(CheckpointError::BadMagic { .. })
        ));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(CheckpointError::UnsupportedVersion { found: 9, .. })
        ));

        let bad = &bytes[..bytes.len() - 10];
        assert!(matches!(
            Checkpoint::from_bytes(bad),
            Err(CheckpointError::Truncated { .. })
        ));

        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 12] ^= 0x01;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(CheckpointError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn reserved_keys_are_rejected() {
        let mut c = sample();
        c.set("tensor.x", "1,1,0");
        assert!(c.to_bytes().is_err());
    }
}
