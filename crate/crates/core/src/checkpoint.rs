//! Self-describing named-array archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! u64              manifest length in bytes
//! [u8]             UTF-8 JSON manifest: {"arrays":[{"name","dtype","shape","offset"}, ...]}
//! [u8]             payload: raw arrays back to back, offsets relative to payload start
//! u32              CRC-32 of the payload
//! ```
//!
//! `dtype` is `float64` or `int64`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use uqgan_autograd::Array;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    F64(Array),
    I64 { shape: Vec<usize>, data: Vec<i64> },
}

impl Entry {
    fn dtype(&self) -> &'static str {
        match self {
            Entry::F64(_) => "float64",
            Entry::I64 { .. } => "int64",
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            Entry::F64(a) => a.shape(),
            Entry::I64 { shape, .. } => shape,
        }
    }

    fn byte_len(&self) -> usize {
        8 * self.shape().iter().product::<usize>()
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    arrays: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    entries: Vec<(String, Entry)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: Entry) {
        let name = name.into();
        assert!(self.get(&name).is_none(), "duplicate archive entry `{name}`");
        self.entries.push((name, entry));
    }

    pub fn insert_f64(&mut self, name: impl Into<String>, array: Array) {
        self.insert(name, Entry::F64(array));
    }

    pub fn insert_i64(&mut self, name: impl Into<String>, data: Vec<i64>) {
        let shape = vec![data.len()];
        self.insert(name, Entry::I64 { shape, data });
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn f64_array(&self, name: &str) -> Option<&Array> {
        match self.get(name)? {
            Entry::F64(a) => Some(a),
            Entry::I64 { .. } => None,
        }
    }

    pub fn i64_values(&self, name: &str) -> Option<&[i64]> {
        match self.get(name)? {
            Entry::I64 { data, .. } => Some(data),
            Entry::F64(_) => None,
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let manifest = Manifest {
            arrays: self
                .entries
                .iter()
                .map(|(name, e)| {
                    let m = ManifestEntry {
                        name: name.clone(),
                        dtype: e.dtype().into(),
                        shape: e.shape().to_vec(),
                        offset,
                    };
                    offset += e.byte_len() as u64;
                    m
                })
                .collect(),
        };
        let header = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut payload = Vec::with_capacity(offset as usize);
        for (_, e) in &self.entries {
            match e {
                Entry::F64(a) => a.data().iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
                Entry::I64 { data, .. } => data.iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
            }
        }
        let mut out = Vec::with_capacity(8 + header.len() + payload.len() + 4);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: &str| Error::Integrity(m.to_string());
        if bytes.len() < 12 {
            return Err(fail("file too short"));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let header_end = 8usize
            .checked_add(usize::try_from(header_len).map_err(|_| fail("manifest length overflows"))?)
            .filter(|&end| end + 4 <= bytes.len())
            .ok_or_else(|| fail("manifest length exceeds file size"))?;
        let payload = &bytes[header_end..bytes.len() - 4];
        let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let manifest: Manifest = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| Error::Integrity(format!("unreadable manifest: {e}")))?;

        let mut expected_offset = 0usize;
        let mut spans = Vec::with_capacity(manifest.arrays.len());
        for m in &manifest.arrays {
            if !matches!(m.dtype.as_str(), "float64" | "int64") {
                return Err(Error::Integrity(format!("`{}` has unknown dtype `{}`", m.name, m.dtype)));
            }
            if m.offset as usize != expected_offset {
                return Err(Error::Integrity(format!("`{}` has a non-contiguous offset", m.name)));
            }
            let len = m
                .shape
                .iter()
                .try_fold(8usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| fail("array size overflows"))?;
            expected_offset += len;
            spans.push(len);
        }
        if expected_offset != payload.len() {
            return Err(Error::Integrity(format!(
                "payload holds {} bytes, manifest describes {expected_offset} (truncated or padded file)",
                payload.len()
            )));
        }
        if crc32fast::hash(payload) != stored_crc {
            return Err(fail("payload checksum mismatch"));
        }

        let mut archive = Archive::new();
        for (m, len) in manifest.arrays.into_iter().zip(spans) {
            let raw = &payload[m.offset as usize..m.offset as usize + len];
            let words = raw.chunks_exact(8).map(|c| c.try_into().expect("8 bytes"));
            let entry = if m.dtype == "float64" {
                Entry::F64(Array::from_vec(&m.shape, words.map(f64::from_le_bytes).collect()))
            } else {
                Entry::I64 {
                    shape: m.shape.clone(),
                    data: words.map(i64::from_le_bytes).collect(),
                }
            };
            if archive.get(&m.name).is_some() {
                return Err(Error::Integrity(format!("duplicate entry `{}`", m.name)));
            }
            archive.insert(m.name, entry);
        }
        Ok(archive)
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        let bytes = self.to_bytes();
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Integrity(m) => Error::Integrity(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Archive {
        let mut a = Archive::new();
        a.insert_f64("w", Array::from_vec(&[2, 3], vec![1.0, -2.5, 3.25, 0.0, f64::MIN_POSITIVE, 7.0]));
        a.insert_i64("step", vec![42]);
        a.insert_f64("s", Array::scalar(0.5));
        a
    }

    #[test]
    fn header_is_length_prefixed_json() {
        let bytes = sample().to_bytes();
        let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + len]).unwrap();
        assert_eq!(header["arrays"][1]["dtype"], "int64");
        assert_eq!(header["arrays"][1]["offset"], 48);
        assert_eq!(bytes.len(), 8 + len + 6 * 8 + 8 + 8 + 4);
    }

    #[test]
    fn truncation_and_corruption_are_detected() {
        let bytes = sample().to_bytes();
        for cut in [1, 4, 9, bytes.len() / 2] {
            let r = Archive::from_bytes(&bytes[..bytes.len() - cut]);
            assert!(matches!(r, Err(Error::Integrity(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n - 10] ^= 0x40;
        assert!(matches!(Archive::from_bytes(&flipped), Err(Error::Integrity(_))));
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(values in proptest::collection::vec(any::<f64>(), 1..40), ints in proptest::collection::vec(any::<i64>(), 0..5)) {
            let mut a = Archive::new();
            a.insert_f64("x", Array::from_vec(&[values.len()], values.clone()));
            a.insert_i64("i", ints);
            let bytes = a.to_bytes();
            let back = Archive::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            let got = back.f64_array("x").unwrap();
            for (g, v) in got.data().iter().zip(&values) {
                prop_assert_eq!(g.to_bits(), v.to_bits());
            }
        }
    }
}
