//! Parameter checkpoint files.
//!
//! A checkpoint is a JSON document:
//!
//! ```json
//! {
//!   "format": "atagnn-params",
//!   "version": 1,
//!   "metadata": { ... },
//!   "params": { "<name>": { "shape": [r, c], "data": [ ... ] } }
//! }
//! ```
//!
//! `params` maps every parameter name to its shape and row-major values.
//! Floats are written with shortest round-trip formatting, so reading a
//! checkpoint back reproduces every weight bit for bit. `metadata` is free
//! form; the trainer stores the model configuration there.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CheckpointError;
use crate::params::ParameterSet;
use crate::tensor::Tensor;

pub const FORMAT: &str = "atagnn-params";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Document {
    format: String,
    version: u32,
    #[serde(default)]
    metadata: serde_json::Value,
    params: BTreeMap<String, Entry>,
}

pub fn to_json<M: Serialize>(params: &ParameterSet, metadata: &M) -> Result<String, CheckpointError> {
    let doc = Document {
        format: FORMAT.to_string(),
        version: VERSION,
        metadata: serde_json::to_value(metadata).map_err(|e| CheckpointError::Format(e.to_string()))?,
        params: params
            .iter()
            .map(|(k, t)| {
                (
                    k.to_string(),
                    Entry {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect(),
    };
    serde_json::to_string(&doc).map_err(|e| CheckpointError::Format(e.to_string()))
}

pub fn from_json(text: &str) -> Result<(ParameterSet, serde_json::Value), CheckpointError> {
    let doc: Document = serde_json::from_str(text).map_err(|e| CheckpointError::Format(e.to_string()))?;
    if doc.format != FORMAT {
        return Err(CheckpointError::Format(format!("unexpected format tag `{}`", doc.format)));
    }
    if doc.version != VERSION {
        return Err(CheckpointError::Version(doc.version));
    }
    let mut params = ParameterSet::default();
    for (name, entry) in doc.params {
        params.insert(name, Tensor::new(entry.shape, entry.data)?);
    }
    Ok((params, doc.metadata))
}

pub fn save<M: Serialize>(path: &Path, params: &ParameterSet, metadata: &M) -> Result<(), CheckpointError> {
    let text = to_json(params, metadata)?;
    fs::write(path, text).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<(ParameterSet, serde_json::Value), CheckpointError> {
    let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_json(&text)
}
