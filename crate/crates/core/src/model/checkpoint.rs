//! Checkpoint files.
//!
//! ```text
//! b"DAVC" | version: u16 | manifest_len: u64 | manifest (JSON)
//!        | count: u32 | count x (name_len: u16 | name | DAVT tensor)
//! ```
//!
//! The manifest records the format version, seed, dtype and the full
//! [`ModelConfig`]. Tensors are stored in build order under their parameter
//! names.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::container::{self, Cursor};
use crate::error::{shape_err, DavitError, Result};
use crate::tensor::Scalar;

const MAGIC: &[u8; 4] = b"DAVC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u16,
    seed: u64,
    dtype: String,
    num_tensors: usize,
    config: ModelConfig,
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        seed: model.seed(),
        dtype: format!("{:?}", T::DTYPE).to_lowercase(),
        num_tensors: model.params().len(),
        config: model.config().clone(),
    };
    let json =
        serde_json::to_vec_pretty(&manifest).map_err(|e| DavitError::Format(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.params().iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&container::encode(t));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Loads a checkpoint using the config stored in its manifest.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let (manifest, entries) = read(path)?;
    Model::from_params(manifest.config, manifest.seed, entries)
}

/// Loads a checkpoint into an explicit config; a mismatch in names or
/// shapes is a dimension error.
pub fn load_checkpoint_as<T: Scalar>(path: &Path, config: &ModelConfig) -> Result<Model<T>> {
    let (manifest, entries) = read(path)?;
    Model::from_params(config.clone(), manifest.seed, entries).map_err(|e| match e {
        DavitError::Shape(msg) => shape_err!(
            "checkpoint (config '{}') does not fit config '{}': {msg}",
            manifest.config.name,
            config.name
        ),
        other => other,
    })
}

type Named<T> = Vec<(String, crate::Tensor<T>)>;

fn read<T: Scalar>(path: &Path) -> Result<(Manifest, Named<T>)> {
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(4)? != MAGIC {
        return Err(DavitError::Format(
            "not a checkpoint file (bad magic)".into(),
        ));
    }
    let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(DavitError::Format(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
    let len = usize::try_from(len).map_err(|_| DavitError::Format("manifest too large".into()))?;
    let manifest: Manifest = serde_json::from_slice(cur.take(len)?)
        .map_err(|e| DavitError::Format(format!("bad manifest: {e}")))?;
    if manifest.format_version != version {
        return Err(DavitError::Format(
            "manifest version disagrees with header".into(),
        ));
    }
    let count = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
    if count != manifest.num_tensors {
        return Err(DavitError::Format(format!(
            "manifest lists {} tensors, file holds {count}",
            manifest.num_tensors
        )));
    }
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| DavitError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let (t, used) = container::decode(&bytes[cur.pos..])?;
        cur.pos += used;
        entries.push((name, t.into_dtype::<T>()));
    }
    if cur.pos != bytes.len() {
        return Err(DavitError::Format(
            "trailing bytes after last tensor".into(),
        ));
    }
    Ok((manifest, entries))
}
