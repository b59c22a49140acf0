//! Self-describing binary checkpoint container.
//!
//! Layout:
//!
//! ```text
//! b"SEQNETCK"                 8-byte magic
//! u32 LE                      format version (1)
//! u64 LE                      header length in bytes
//! header                      UTF-8 JSON: {"meta": …, "tensors": [{"name", "shape"}…]}
//! f64 LE × Σ prod(shape)      tensor data, in header order
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so save/load is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::nn::{LayerKind, LayerParams};
use crate::tensor::Tensor;

use super::{Model, NetworkConfig};

const MAGIC: &[u8; 8] = b"SEQNETCK";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        let i = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))?;
        Ok(self.tensors.remove(i).1)
    }
}

pub fn write_container(path: &Path, meta: Value, tensors: &[(String, &Tensor)]) -> Result<()> {
    let header = Header {
        meta,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for (_, t) in tensors {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Container> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint file", path.display())));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b)?;
    let version = u32::from_le_bytes(u32b);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b)?;
    let len = usize::try_from(u64::from_le_bytes(u64b)).map_err(|_| Error::Checkpoint("header too large".into()))?;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;

    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut buf = [0u8; 8];
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf).map_err(|_| Error::Checkpoint(format!("truncated data for {:?}", entry.name)))?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.push((entry.name, Tensor::new(entry.shape, data)?));
    }
    if r.read(&mut buf)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }
    Ok(Container { meta: header.meta, tensors })
}

fn tensor_names(n_layers: usize) -> Vec<String> {
    let mut names = Vec::with_capacity(2 * n_layers + 2);
    for i in 0..n_layers {
        names.push(format!("layer{i}.weights"));
        names.push(format!("layer{i}.biases"));
    }
    names.push("head.weights".into());
    names.push("head.biases".into());
    names
}

impl Model {
    /// Named parameter tensors in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        tensor_names(self.layers.len()).into_iter().zip(self.tensors()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with_meta(path, Value::Null)
    }

    /// Saves the model with extra metadata stored alongside the config.
    pub fn save_with_meta(&self, path: &Path, extra: Value) -> Result<()> {
        let meta = serde_json::json!({ "config": self.config, "extra": extra });
        write_container(path, meta, &self.named_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = read_container(path)?;
        Self::from_container(&mut c)
    }

    /// Extracts the model's tensors from `c`, leaving any others in place.
    pub fn from_container(c: &mut Container) -> Result<Self> {
        let config: NetworkConfig = serde_json::from_value(
            c.meta.get("config").cloned().ok_or_else(|| Error::Checkpoint("missing config".into()))?,
        )?;
        let kinds: Vec<LayerKind> = config
            .layers
            .iter()
            .map(|l| match l {
                super::LayerSpec::Conv { .. } => LayerKind::Conv,
                super::LayerSpec::LocallyConnected { .. } => LayerKind::LocallyConnected,
                super::LayerSpec::Dense { .. } => LayerKind::FullyConnected,
            })
            .collect();
        let mut layers = Vec::with_capacity(kinds.len());
        for (i, kind) in kinds.into_iter().enumerate() {
            let w = c.take(&format!("layer{i}.weights"))?;
            let b = c.take(&format!("layer{i}.biases"))?;
            layers.push(LayerParams::new(kind, w, b)?);
        }
        let head = LayerParams::fully_connected(c.take("head.weights")?, c.take("head.biases")?)?;
        Model::from_parts(config, layers, head)
    }
}
