//! Named dense tensors, the parameter store, and versioned JSON
//! checkpoints. JSON numbers round-trip `f64` bit-exactly, so a save/load
//! cycle reproduces the network state.

use super::ToyNetConfig;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Parameters (or their gradients) keyed by name; the B-tree keeps
/// iteration order deterministic.
pub type ParamStore = BTreeMap<String, Tensor>;

/// Zero-filled gradients for every parameter in `params`.
pub fn zeros_like(params: &ParamStore) -> ParamStore {
    params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(&t.shape))).collect()
}

/// `acc += other`, entrywise over matching names.
pub fn accumulate(acc: &mut ParamStore, other: &ParamStore) {
    for (name, t) in other {
        let a = acc.get_mut(name).expect("gradient stores share keys");
        debug_assert_eq!(a.shape, t.shape);
        for (av, bv) in a.data.iter_mut().zip(&t.data) {
            *av += bv;
        }
    }
}

pub fn scale_params(store: &mut ParamStore, s: f64) {
    for t in store.values_mut() {
        for v in &mut t.data {
            *v *= s;
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0} (expected {CHECKPOINT_VERSION})")]
    Version(u32),
    #[error("tensor {name} has {len} values but shape {shape:?}")]
    ShapeMismatch { name: String, len: usize, shape: Vec<usize> },
    #[error("non-finite value in tensor {0}")]
    NonFinite(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: ToyNetConfig,
    params: ParamStore,
}

pub fn save_checkpoint(
    path: &Path,
    config: &ToyNetConfig,
    params: &ParamStore,
) -> Result<(), CheckpointError> {
    for (name, t) in params {
        if !t.data.iter().all(|v| v.is_finite()) {
            return Err(CheckpointError::NonFinite(name.clone()));
        }
    }
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        config: *config,
        params: params.clone(),
    };
    fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ToyNetConfig, ParamStore), CheckpointError> {
    let file: CheckpointFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    if file.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(file.version));
    }
    for (name, t) in &file.params {
        let expected: usize = t.shape.iter().product();
        if t.data.len() != expected {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                len: t.data.len(),
                shape: t.shape.clone(),
            });
        }
    }
    Ok((file.config, file.params))
}
