//! Binary tensor container used for checkpoints and codebook dumps.
//!
//! Layout: magic `DGQ1`, a little-endian `u64` manifest length, a JSON
//! manifest (version, metadata, and per tensor its name, dtype, shape and
//! byte offset into the payload), then the payload of little-endian `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{MethodRegistry, Segmenter};
use crate::quantizer::CODEBOOK_TENSORS;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DGQ1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest<M> {
    version: u32,
    meta: M,
    tensors: Vec<TensorEntry>,
}

/// What a checkpoint records about the run that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub method: String,
    /// Full config in its text form.
    pub config: String,
    pub epoch: usize,
    pub holdout: Option<String>,
    pub fold: Option<usize>,
    pub seed: u64,
    pub val_miou: Option<f64>,
}

impl CheckpointMeta {
    pub fn config(&self) -> Result<ModelConfig> {
        ModelConfig::parse(&self.config)
    }
}

/// Write atomically: a sibling temp file renamed into place.
pub fn write_container<M: Serialize>(
    path: &Path,
    meta: &M,
    tensors: &[(&str, &Tensor)],
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: (*name).to_string(),
            dtype: "f64".into(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 8 * t.numel() as u64;
    }
    let manifest = serde_json::to_vec(&Manifest {
        version: VERSION,
        meta,
        tensors: entries,
    })
    .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(12 + manifest.len() + offset as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    buf.extend_from_slice(&manifest);
    for (_, t) in tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_container<M: DeserializeOwned>(path: &Path) -> Result<(M, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing DGQ1 magic".into()));
    }
    let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let body = 12usize
        .checked_add(len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad("truncated manifest".into()))?;
    let manifest: Manifest<M> =
        serde_json::from_slice(&bytes[12..body]).map_err(|e| bad(e.to_string()))?;
    if manifest.version != VERSION {
        return Err(bad(format!("unsupported version {}", manifest.version)));
    }
    let payload = &bytes[body..];
    let tensors = manifest
        .tensors
        .into_iter()
        .map(|e| {
            if e.dtype != "f64" {
                return Err(bad(format!("tensor {} has dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let chunk = payload
                .get(start..start + 8 * n)
                .ok_or_else(|| bad(format!("tensor {} runs past the payload", e.name)))?;
            let data = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            Ok((e.name, Tensor::new(&e.shape, data)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest.meta, tensors))
}

pub fn save_checkpoint(path: &Path, model: &dyn Segmenter, meta: &CheckpointMeta) -> Result<()> {
    let tensors: Vec<(&str, &Tensor)> = model.params().iter().collect();
    write_container(path, meta, &tensors)
}

/// Rebuild the model named in the checkpoint and load its parameters.
pub fn load_checkpoint(
    path: &Path,
    registry: &MethodRegistry,
) -> Result<(Box<dyn Segmenter>, CheckpointMeta)> {
    let (meta, tensors): (CheckpointMeta, _) = read_container(path)?;
    let cfg = meta.config()?;
    let mut model = registry.build(&cfg)?;
    model.params_mut().load(tensors)?;
    Ok((model, meta))
}

/// Tensor names held in a container.
pub fn tensor_names(path: &Path) -> Result<Vec<String>> {
    let (_, tensors): (serde_json::Value, _) = read_container(path)?;
    Ok(tensors.into_iter().map(|(n, _)| n).collect())
}

/// Codebooks, log variance and log temperature in the same container.
pub fn dump_codebook(path: &Path, model: &dyn Segmenter, meta: &CheckpointMeta) -> Result<()> {
    let tensors: Vec<(&str, &Tensor)> = model
        .params()
        .iter()
        .filter(|(n, _)| CODEBOOK_TENSORS.contains(n))
        .collect();
    if tensors.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "method {} has no codebook",
            model.method()
        )));
    }
    write_container(path, meta, &tensors)
}
