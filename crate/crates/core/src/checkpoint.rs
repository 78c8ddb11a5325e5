//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic  b"PTICKPT\0"
//! offset 8   u64       header length H
//! offset 16  H bytes   UTF-8 JSON header
//! offset 16+H          f32 payload, arrays concatenated in header order
//! ```
//!
//! The header is `{"schema_version", "kind", "provenance", "metadata",
//! "arrays": [{"name", "shape", "offset", "len"}]}` with `offset`/`len` in
//! elements of the payload. Arrays are written in name order and metadata
//! objects serialize with sorted keys, so load→save reproduces the file
//! byte for byte.

use std::fs;
use std::path::Path;

use pti_tensor::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PTICKPT\0";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    kind: String,
    provenance: String,
    metadata: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub provenance: String,
    pub metadata: serde_json::Value,
    pub arrays: ParamStore,
}

impl Container {
    pub fn new(kind: &str, provenance: &str, metadata: serde_json::Value, arrays: ParamStore) -> Self {
        Self {
            kind: kind.to_string(),
            provenance: provenance.to_string(),
            metadata,
            arrays,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.provenance.is_empty() {
            return Err(Error::Format("provenance tag must not be empty".into()));
        }
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut offset = 0;
        for (name, t) in self.arrays.iter() {
            entries.push(ArrayEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: t.numel(),
            });
            offset += t.numel();
        }
        let header = Header {
            schema_version: SCHEMA_VERSION,
            kind: self.kind.clone(),
            provenance: self.provenance.clone(),
            metadata: self.metadata.clone(),
            arrays: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.arrays.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("missing checkpoint magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let hend = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..hend])?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported schema version {}",
                header.schema_version
            )));
        }
        if header.provenance.is_empty() {
            return Err(Error::Format("empty provenance tag".into()));
        }
        let payload = &bytes[hend..];
        let mut arrays = ParamStore::new();
        for e in header.arrays {
            let numel: usize = e.shape.iter().product();
            if numel != e.len {
                return Err(Error::Format(format!("array `{}` shape/len disagree", e.name)));
            }
            let start = e.offset * 4;
            let end = start + e.len * 4;
            if end > payload.len() {
                return Err(Error::Format(format!("array `{}` runs past the payload", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            arrays.insert(e.name, Tensor::new(&e.shape, data));
        }
        Ok(Self {
            kind: header.kind,
            provenance: header.provenance,
            metadata: header.metadata,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a `{kind}` checkpoint, found `{}`", self.kind)));
        }
        Ok(())
    }

    /// Arrays whose names start with `prefix/`, with the prefix stripped.
    pub fn group(&self, prefix: &str) -> ParamStore {
        let p = format!("{prefix}/");
        self.arrays
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn put_group(&mut self, prefix: &str, store: &ParamStore) {
        for (n, t) in store.iter() {
            self.arrays.insert(format!("{prefix}/{n}"), t.clone());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(values: Vec<f32>, meta: f64) -> Container {
        let mut arrays = ParamStore::new();
        let n = values.len();
        arrays.insert("b/weights", Tensor::new(&[n], values.clone()));
        arrays.insert("a/bias", Tensor::new(&[1, n], values.iter().map(|v| -v).collect()));
        Container::new(
            "test",
            "pretrained",
            serde_json::json!({"zeta": meta, "alpha": [1, 2, 3], "name": "x"}),
            arrays,
        )
    }

    proptest! {
        #[test]
        fn save_load_save_is_byte_identical(
            values in proptest::collection::vec(-1e6f32..1e6, 1..40),
            meta in -1e9f64..1e9,
        ) {
            let c = sample(values, meta);
            let bytes = c.to_bytes().unwrap();
            let back = Container::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn empty_provenance_rejected() {
        let mut c = sample(vec![1.0], 0.0);
        c.provenance.clear();
        assert!(c.to_bytes().is_err());
    }

    #[test]
    fn corrupt_input_rejected() {
        assert!(Container::from_bytes(b"nope").is_err());
        let mut bytes = sample(vec![1.0, 2.0], 1.0).to_bytes().unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(Container::from_bytes(&bytes).is_err());
    }

    #[test]
    fn groups_split_on_prefix() {
        let c = sample(vec![1.0, 2.0], 1.0);
        assert_eq!(c.group("a").names().collect::<Vec<_>>(), vec!["bias"]);
    }
}
