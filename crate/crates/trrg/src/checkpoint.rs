//! Binary checkpoints.
//!
//! Layout (all integers little-endian): `"TRRG"`, `u32` version, `u32`
//! entry count, then per entry a `u16` name length, the UTF-8 name, a `u8`
//! rank, one `u32` per dimension and the row-major `f32` values.
//!
//! The producing config travels as the entry `meta.config`: its JSON bytes,
//! one per `f32` value.

use std::path::Path;

use thiserror::Error;
use trrg_core::{ModelConfig, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"TRRG";
pub const VERSION: u32 = 1;
pub const CONFIG_ENTRY: &str = "meta.config";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic bytes")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),
    #[error("entry name is not UTF-8")]
    Name,
    #[error("tensor `{name}`: {reason}")]
    Tensor { name: String, reason: String },
    #[error("checkpoint has no embedded config")]
    MissingConfig,
    #[error("embedded config is invalid: {0}")]
    Config(String),
    #[error("{0} bytes after the last entry")]
    Trailing(usize),
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Parameter tensors in store order.
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_store(config: &ModelConfig, store: &ParamStore) -> Self {
        Self {
            config: config.clone(),
            tensors: store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every store parameter whose name starts with one of
    /// `prefixes` from the checkpoint; each must exist with the same shape.
    pub fn restore(&self, store: &mut ParamStore, prefixes: &[&str]) -> Result<usize> {
        let names: Vec<String> = store
            .iter()
            .map(|(_, p)| p.name.clone())
            .filter(|n| prefixes.iter().any(|p| n.starts_with(p)))
            .collect();
        for name in &names {
            let t = self.get(name).ok_or_else(|| CheckpointError::Tensor {
                name: name.clone(),
                reason: "missing from checkpoint".into(),
            })?;
            store.load(name, t.clone()).map_err(|e| CheckpointError::Tensor {
                name: name.clone(),
                reason: e.to_string(),
            })?;
        }
        Ok(names.len())
    }

    /// Restores every parameter of the store.
    pub fn restore_all(&self, store: &mut ParamStore) -> Result<usize> {
        self.restore(store, &[""])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = serde_json::to_vec(&self.config).expect("config always serialises");
        let meta = Tensor::new(&[cfg.len()], cfg.iter().map(|&b| b as f32).collect()).expect("non-empty config");
        let mut entries: Vec<(&str, &Tensor<f32>)> = vec![(CONFIG_ENTRY, &meta)];
        entries.extend(self.tensors.iter().map(|(n, t)| (n.as_str(), t)));
        encode(&entries)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut entries = decode(bytes)?;
        let pos = entries
            .iter()
            .position(|(n, _)| n == CONFIG_ENTRY)
            .ok_or(CheckpointError::MissingConfig)?;
        let (_, meta) = entries.remove(pos);
        let raw: Vec<u8> = meta
            .data()
            .iter()
            .map(|&v| {
                if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(CheckpointError::Config("config bytes out of range".into()))
                }
            })
            .collect::<Result<_>>()?;
        let config: ModelConfig = serde_json::from_slice(&raw).map_err(|e| CheckpointError::Config(e.to_string()))?;
        config.validate().map_err(|e| CheckpointError::Config(e.to_string()))?;
        Ok(Self { config, tensors: entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

pub fn encode(entries: &[(&str, &Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Truncated(what.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = r.u32("entry count")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes"));
        let name = std::str::from_utf8(r.take(len as usize, "name")?)
            .map_err(|_| CheckpointError::Name)?
            .to_string();
        let rank = r.take(1, &name)?[0] as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32(&name).map(|d| d as usize)).collect::<Result<_>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| CheckpointError::Tensor {
            name: name.clone(),
            reason: "shape overflows".into(),
        })?;
        let raw = r.take(numel.checked_mul(4).unwrap_or(usize::MAX), &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Tensor {
            name: name.clone(),
            reason: e.to_string(),
        })?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Trailing(bytes.len() - r.pos));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use trrg_core::model::TrrgModel;

    #[test]
    fn layout_of_a_single_entry() {
        let t = Tensor::new(&[2], vec![1.0f32, -2.5]).unwrap();
        let b = encode(&[("ab", &t)]);
        let mut expect = b"TRRG".to_vec();
        expect.extend([1, 0, 0, 0, 1, 0, 0, 0, 2, 0, b'a', b'b', 1, 2, 0, 0, 0]);
        expect.extend(1.0f32.to_le_bytes());
        expect.extend((-2.5f32).to_le_bytes());
        assert_eq!(b, expect);
        assert_eq!(decode(&b).unwrap(), vec![("ab".to_string(), t)]);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (m, store) = TrrgModel::new(&ModelConfig::micro()).unwrap();
        let ck = Checkpoint::from_store(&m.config, &store);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let t = Tensor::new(&[2], vec![1.0f32, 2.0]).unwrap();
        let b = encode(&[("x", &t)]);
        assert!(matches!(decode(&b[..b.len() - 1]), Err(CheckpointError::Truncated(_))));
        assert!(matches!(decode(b"XXXX"), Err(CheckpointError::Magic)));
        let mut v2 = b.clone();
        v2[4] = 2;
        assert!(matches!(decode(&v2), Err(CheckpointError::Version(2))));
        let mut extra = b.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(CheckpointError::Trailing(1))));
        assert!(matches!(Checkpoint::from_bytes(&b), Err(CheckpointError::MissingConfig)));
    }

    #[test]
    fn restore_names_mismatched_tensor() {
        let (m, store) = TrrgModel::new(&ModelConfig::micro()).unwrap();
        let ck = Checkpoint::from_store(&m.config, &store);
        let wider = ModelConfig {
            d: 16,
            ..ModelConfig::micro()
        };
        let (_, mut other) = TrrgModel::new(&wider).unwrap();
        let err = ck.restore(&mut other, &["vision."]).unwrap_err().to_string();
        assert!(err.contains("vision."), "{err}");
    }
}
