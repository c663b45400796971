//! `SNW` weight files: magic, `u16` version, `u32` header length, JSON
//! header, then every tensor as little-endian floats in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use snapddm_core::subdomain::SubdomainClass;
use snapddm_core::WavevectorConvention;

use crate::error::{NnError, Result};
use crate::model::{tensor_names, tensor_shapes, SmFno, SmFnoConfig};
use crate::tensor::{Real, Tensor};

pub const SNW_MAGIC: &[u8; 4] = b"SNW\0";
pub const SNW_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsHeader {
    pub version: u16,
    pub dtype: String,
    pub config: SmFnoConfig,
    pub class: Option<SubdomainClass>,
    pub convention: WavevectorConvention,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: u64,
    /// Free-form provenance (training config, seeds).
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// A model plus the metadata needed to use it as a subdomain solver.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel<T: Real> {
    pub model: SmFno<T>,
    pub class: Option<SubdomainClass>,
    pub convention: WavevectorConvention,
    pub meta: serde_json::Value,
}

fn elem_bytes(dtype: &str) -> Result<usize> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(NnError::Mismatch(format!("unsupported dtype {other}"))),
    }
}

pub fn save_weights<T: Real>(saved: &SavedModel<T>, path: impl AsRef<Path>) -> Result<WeightsHeader> {
    let m = &saved.model;
    let eb = elem_bytes(T::DTYPE)? as u64;
    let mut offset = 0u64;
    let tensors: Vec<TensorEntry> = tensor_names(&m.config)
        .into_iter()
        .zip(m.tensors())
        .map(|(name, t)| {
            let e = TensorEntry { name, shape: t.shape.clone(), offset };
            offset += t.len() as u64 * eb;
            e
        })
        .collect();
    let header = WeightsHeader {
        version: SNW_VERSION,
        dtype: T::DTYPE.into(),
        config: m.config,
        class: saved.class,
        convention: saved.convention,
        tensors,
        payload_bytes: offset,
        meta: saved.meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SNW_MAGIC)?;
    w.write_all(&SNW_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for t in m.tensors() {
        for v in &t.data {
            if eb == 4 {
                w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
            } else {
                w.write_all(&v.as_f64().to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(header)
}

fn read_header(r: &mut impl Read) -> Result<WeightsHeader> {
    let mut pre = [0u8; 10];
    r.read_exact(&mut pre).map_err(|_| NnError::Corrupt("file too short for header".into()))?;
    if &pre[..4] != SNW_MAGIC {
        return Err(NnError::Corrupt(format!("bad magic {:?}", String::from_utf8_lossy(&pre[..4]))));
    }
    let version = u16::from_le_bytes([pre[4], pre[5]]);
    if version != SNW_VERSION {
        return Err(NnError::Mismatch(format!("weight file version {version}, expected {SNW_VERSION}")));
    }
    let len = u32::from_le_bytes(pre[6..10].try_into().expect("4 bytes")) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| NnError::Corrupt("truncated header".into()))?;
    serde_json::from_slice(&json).map_err(|e| NnError::Corrupt(format!("header JSON: {e}")))
}

/// Reads only the header.
pub fn inspect_weights(path: impl AsRef<Path>) -> Result<WeightsHeader> {
    read_header(&mut BufReader::new(File::open(path)?))
}

pub fn load_weights<T: Real>(path: impl AsRef<Path>) -> Result<SavedModel<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r)?;
    h.config.validate()?;
    let eb = elem_bytes(&h.dtype)?;
    let names = tensor_names(&h.config);
    let shapes = tensor_shapes(&h.config);
    if h.tensors.len() != names.len() {
        return Err(NnError::Mismatch(format!("{} tensors listed, config needs {}", h.tensors.len(), names.len())));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if (payload.len() as u64) < h.payload_bytes {
        return Err(NnError::Corrupt(format!("payload has {} bytes, header promises {}", payload.len(), h.payload_bytes)));
    }
    let mut tensors = Vec::with_capacity(names.len());
    for ((e, name), shape) in h.tensors.iter().zip(&names).zip(&shapes) {
        if &e.name != name || &e.shape != shape {
            return Err(NnError::Mismatch(format!("tensor {} {:?}, expected {name} {shape:?}", e.name, e.shape)));
        }
        let n: usize = shape.iter().product();
        let start = e.offset as usize;
        let end = start + n * eb;
        let bytes = payload
            .get(start..end)
            .ok_or_else(|| NnError::Corrupt(format!("tensor {name} runs past the payload")))?;
        let data = bytes
            .chunks_exact(eb)
            .map(|b| {
                if eb == 4 {
                    T::of(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                } else {
                    T::of(f64::from_le_bytes(b.try_into().expect("8 bytes")))
                }
            })
            .collect();
        tensors.push(Tensor { shape: shape.clone(), data });
    }
    Ok(SavedModel { model: SmFno::from_tensors(h.config, tensors)?, class: h.class, convention: h.convention, meta: h.meta })
}

/// Loads and insists on a given configuration.
pub fn load_weights_expecting<T: Real>(path: impl AsRef<Path>, config: &SmFnoConfig) -> Result<SavedModel<T>> {
    let m = load_weights(path)?;
    if &m.model.config != config {
        return Err(NnError::Mismatch(format!("file config {:?} differs from {config:?}", m.model.config)));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InitOptions;

    fn saved() -> SavedModel<f32> {
        let model = SmFno::init(SmFnoConfig::check(), InitOptions { seed: 11, random_heads: true, random_biases: true }).unwrap();
        SavedModel {
            model,
            class: Some(SubdomainClass::Material),
            convention: WavevectorConvention::default(),
            meta: serde_json::json!({"note": "fixture"}),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.snw");
        let s = saved();
        let h = save_weights(&s, &p).unwrap();
        let back: SavedModel<f32> = load_weights(&p).unwrap();
        assert_eq!(back, s);
        assert_eq!(inspect_weights(&p).unwrap(), h);
        let bits = |m: &SmFno<f32>| m.tensors().iter().flat_map(|t| t.data.iter().map(|v| v.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&back.model), bits(&s.model));
    }

    #[test]
    fn truncated_and_mismatched_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.snw");
        save_weights(&saved(), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let q = dir.path().join("t.snw");
        std::fs::write(&q, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_weights::<f32>(&q), Err(NnError::Corrupt(_))));
        // The header alone is still readable.
        assert!(inspect_weights(&q).is_ok());
        std::fs::write(&q, &bytes[..7]).unwrap();
        assert!(matches!(inspect_weights(&q), Err(NnError::Corrupt(_))));
        let other = SmFnoConfig { channels: 8, ..SmFnoConfig::check() };
        assert!(matches!(load_weights_expecting::<f32>(&p, &other), Err(NnError::Mismatch(_))));
        let mut v = bytes.clone();
        v[4] = 9;
        std::fs::write(&q, &v).unwrap();
        assert!(matches!(load_weights::<f32>(&q), Err(NnError::Mismatch(_))));
    }
}
