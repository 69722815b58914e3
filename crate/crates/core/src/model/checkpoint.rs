//! Parameter checkpoints: the 32-byte store header, a `u64` manifest
//! length, a JSON manifest of `(name, shape, offset)` entries plus the
//! configuration, then a flat little-endian `f32` blob.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::retrieval::{Embedder, EmbedderConfig};
use crate::scalar::Scalar;
use crate::store::format::StoreHeader;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_params<T: Scalar>(path: &Path, kind: &str, config: serde_json::Value, params: &ParamSet<T>) -> Result<()> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0u64;
    for (name, t) in params.iter() {
        tensors.push(TensorEntry { name: name.to_string(), shape: [t.nrows(), t.ncols()], offset });
        offset += t.len() as u64 * 4;
    }
    let manifest = serde_json::to_vec(&Manifest { kind: kind.to_string(), config, tensors })?;
    let header = StoreHeader { record_count: params.len() as u64, key_dim: 0, value_rows: 0, value_cols: 0 };
    let mut w = BufWriter::new(File::create(path)?);
    header.write_to(&mut w)?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(&manifest)?;
    for (_, t) in params.iter() {
        for v in t.iter() {
            w.write_all(&v.to_f32_lossy().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_params<T: Scalar>(path: &Path) -> Result<(Manifest, ParamSet<T>)> {
    let mut r = BufReader::new(File::open(path)?);
    let header = StoreHeader::read_from(&mut r)?;
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut manifest = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut manifest)?;
    let manifest: Manifest = serde_json::from_slice(&manifest)?;
    if manifest.tensors.len() as u64 != header.record_count {
        return Err(Error::CorruptStore("record_count: manifest and header disagree".into()));
    }
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    let mut params = ParamSet::new();
    for e in &manifest.tensors {
        let n = e.shape[0] * e.shape[1];
        let start = e.offset as usize;
        let bytes = blob
            .get(start..start + n * 4)
            .ok_or_else(|| Error::CorruptStore(format!("tensor {}: blob truncated", e.name)))?;
        let vals: Vec<T> = bytes
            .chunks_exact(4)
            .map(|b| T::from_f64_lossy(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
            .collect();
        let arr = Array2::from_shape_vec((e.shape[0], e.shape[1]), vals).map_err(|e| Error::CorruptStore(e.to_string()))?;
        params.push(e.name.clone(), arr);
    }
    Ok((manifest, params))
}

impl<T: Scalar> Model<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_params(path, "model", serde_json::to_value(&self.config)?, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (m, params) = load_params(path)?;
        if m.kind != "model" {
            return Err(Error::input(format!("{} holds a {}, not a model", path.display(), m.kind)));
        }
        let config: ModelConfig = serde_json::from_value(m.config)?;
        Model::from_params(config, params)
    }
}

impl<T: Scalar> Embedder<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_params(path, "embedder", serde_json::to_value(&self.config)?, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (m, params) = load_params(path)?;
        if m.kind != "embedder" {
            return Err(Error::input(format!("{} holds a {}, not an embedder", path.display(), m.kind)));
        }
        let config: EmbedderConfig = serde_json::from_value(m.config)?;
        Embedder::from_params(config, params)
    }
}
