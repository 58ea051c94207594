//! On-disk model format: `manifest.json` (config, layout and one entry per
//! named parameter), `params.bin` (little-endian raw values), `vocab.json`
//! and `ontology.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelConfig, ModelError, ParamStore};
use crate::numerics::{Precision, Real, Tensor};
use crate::schema::Ontology;
use crate::text::{InputLayout, Vocab};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const VOCAB_FILE: &str = "vocab.json";
pub const ONTOLOGY_FILE: &str = "ontology.json";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed {file}: {source}")]
    Json {
        file: String,
        source: serde_json::Error,
    },
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub precision: Precision,
    /// Byte offset into `params.bin`.
    pub offset: usize,
    /// Number of scalar values.
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub layout: InputLayout,
    pub params: Vec<ParamEntry>,
}

/// A trained model together with everything needed to serialize inputs for it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub vocab: Vocab,
    pub ontology: Ontology,
    pub layout: InputLayout,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), CheckpointError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| CheckpointError::Json {
        file: path.display().to_string(),
        source,
    })?;
    fs::write(path, text).map_err(io_err(path))
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D, CheckpointError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| CheckpointError::Json {
        file: path.display().to_string(),
        source,
    })
}

fn width(p: Precision) -> usize {
    match p {
        Precision::F32 => 4,
        Precision::F64 => 8,
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn save(&self, dir: &Path) -> Result<(), CheckpointError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut bytes = Vec::new();
        let mut entries = Vec::new();
        let params = self.model.params();
        for (name, t) in params.names().iter().zip(params.tensors()) {
            entries.push(ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                precision: T::PRECISION,
                offset: bytes.len(),
                len: t.len(),
            });
            bytes.extend(T::to_le_bytes_vec(t.data()));
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.model.config().clone(),
            layout: self.layout,
            params: entries,
        };
        let p = dir.join(PARAMS_FILE);
        fs::write(&p, bytes).map_err(io_err(&p))?;
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        write_json(&dir.join(VOCAB_FILE), &self.vocab)?;
        write_json(&dir.join(ONTOLOGY_FILE), &self.ontology)
    }

    /// Loads a checkpoint, converting stored values to `T` if needed.
    pub fn load(dir: &Path) -> Result<Self, CheckpointError> {
        let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version(manifest.format_version));
        }
        let p = dir.join(PARAMS_FILE);
        let bytes = fs::read(&p).map_err(io_err(&p))?;
        let mut store = ParamStore::new();
        for e in &manifest.params {
            if e.shape.iter().product::<usize>() != e.len {
                return Err(CheckpointError::Corrupt(format!("{}: shape disagrees with length", e.name)));
            }
            let end = e.offset + e.len * width(e.precision);
            let raw = bytes
                .get(e.offset..end)
                .ok_or_else(|| CheckpointError::Corrupt(format!("{}: values run past end of file", e.name)))?;
            let data: Vec<T> = match e.precision {
                Precision::F32 => f32::from_le_bytes_slice(raw)
                    .map(|v| v.into_iter().map(|x| T::lit(x as f64)).collect()),
                Precision::F64 => f64::from_le_bytes_slice(raw).map(|v| v.into_iter().map(T::lit).collect()),
            }
            .ok_or_else(|| CheckpointError::Corrupt(format!("{}: truncated values", e.name)))?;
            if data.iter().any(|x| !x.is_finite()) {
                return Err(CheckpointError::Corrupt(format!("{}: non-finite values", e.name)));
            }
            store.push(e.name.clone(), Tensor::new(e.shape.clone(), data));
        }
        let vocab: Vocab = read_json(&dir.join(VOCAB_FILE))?;
        let ontology: Ontology = read_json(&dir.join(ONTOLOGY_FILE))?;
        if vocab.len() != manifest.config.vocab_size {
            return Err(CheckpointError::Corrupt("vocabulary size disagrees with the config".into()));
        }
        if ontology.num_slots() != manifest.config.num_slots
            || ontology.num_appendix() != manifest.config.num_appendix
        {
            return Err(CheckpointError::Corrupt("ontology disagrees with the config".into()));
        }
        let model = Model::from_params(manifest.config, store)?;
        Ok(Self {
            model,
            vocab,
            ontology,
            layout: manifest.layout,
        })
    }
}
