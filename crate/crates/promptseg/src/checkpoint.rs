//! Single-file checkpoints: a JSON manifest followed by raw little-endian
//! `f64` tensor data.
//!
//! Layout: 8-byte magic, manifest length as `u64` LE, the manifest, then the
//! data of every tensor in manifest order. Saving the same state twice gives
//! identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use promptseg_core::model::{Model, TrainableParams};
use promptseg_core::optim::AdamW;
use promptseg_core::params::Parameters;
use promptseg_core::rng::RngState;
use promptseg_core::train::TrainerState;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"PSEGCKP1";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Offset in elements from the start of the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: BTreeMap<String, String>,
    pub iteration: u64,
    pub optimizer_step: u64,
    pub rng: RngState,
    pub tensors: Vec<TensorEntry>,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: TrainableParams,
    pub state: TrainerState,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Ok(Model::from_params(self.config.model_config()?, self.params.clone())?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut data: Vec<f64> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, values: &[f64]| {
            tensors.push(TensorEntry {
                name,
                shape,
                dtype: "f64".into(),
                offset: data.len(),
            });
            data.extend_from_slice(values);
        };
        for t in self.params.named() {
            push(t.name, t.shape, t.data);
        }
        let opt = &self.state.optimizer;
        push("optimizer.m".into(), vec![opt.m.len()], &opt.m);
        push("optimizer.v".into(), vec![opt.v.len()], &opt.v);
        let manifest = Manifest {
            version: FORMAT_VERSION,
            config: self.config.to_map(),
            iteration: self.state.iteration,
            optimizer_step: opt.step,
            rng: self.state.rng,
            tensors,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| CliError::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| CliError::Format(format!("invalid checkpoint: {msg}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic header"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json_end = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..json_end]).map_err(|e| bad(&e.to_string()))?;
        if manifest.version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {}", manifest.version)));
        }
        let payload = &bytes[json_end..];
        if !payload.len().is_multiple_of(8) {
            return Err(bad("data section is not a whole number of f64 values"));
        }
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();

        let config = RunConfig::from_map(&manifest.config)?;
        let mut params = TrainableParams::init(&config.model_config()?, 0)?;
        let expected: Vec<(String, Vec<usize>)> = params.named().into_iter().map(|t| (t.name, t.shape)).collect();
        let n_params = params.num_params();
        if manifest.tensors.len() != expected.len() + 2 {
            return Err(bad("tensor list does not match the configured model"));
        }
        let read = |entry: &TensorEntry| -> Result<Vec<f64>> {
            let n: usize = entry.shape.iter().product();
            data.get(entry.offset..entry.offset + n)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| bad(&format!("tensor {} out of bounds", entry.name)))
        };
        let mut flat = Vec::with_capacity(n_params);
        for (entry, (name, shape)) in manifest.tensors.iter().zip(&expected) {
            if &entry.name != name || &entry.shape != shape || entry.dtype != "f64" {
                return Err(bad(&format!("expected tensor {name} {shape:?}, found {} {:?}", entry.name, entry.shape)));
            }
            flat.extend(read(entry)?);
        }
        params.assign_flat(&flat);
        let m_entry = &manifest.tensors[expected.len()];
        let v_entry = &manifest.tensors[expected.len() + 1];
        if m_entry.name != "optimizer.m" || v_entry.name != "optimizer.v" {
            return Err(bad("optimizer moments missing"));
        }
        let optimizer = AdamW {
            step: manifest.optimizer_step,
            m: read(m_entry)?,
            v: read(v_entry)?,
        };
        if optimizer.m.len() != n_params || optimizer.v.len() != n_params {
            return Err(bad("optimizer moments do not match the parameter count"));
        }
        Ok(Self {
            config,
            params,
            state: TrainerState {
                iteration: manifest.iteration,
                optimizer,
                rng: manifest.rng,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            CliError::Format(msg) => CliError::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
