//! Checkpoints: `manifest.json` (format tag, space, tensor table, optimizer
//! step counts, free-form trainer state) next to `weights.bin`, a flat
//! little-endian f64 blob.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Slot, SuperNet};
use crate::autodiff::{Array, ParamMap};
use crate::ops::SearchSpace;
use crate::scalar::Scalar;
use crate::trainer::{MomentState, Optimizer, OptimizerConfig};

pub const FORMAT_TAG: &str = "magic-nas-ckpt/1";
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "weights.bin";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("bad manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("unsupported checkpoint format {0:?}")]
    Format(String),
    #[error("tensor {name} is inconsistent with the blob or space: {detail}")]
    Tensor { name: String, detail: String },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    space: SearchSpace,
    frozen: bool,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerManifest>,
    #[serde(default)]
    extra: serde_json::Value,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OptimizerManifest {
    config: OptimizerConfig,
    lr: f64,
    steps: BTreeMap<String, u64>,
}

/// Everything needed to resume: weights, optimizer moments and opaque
/// trainer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub net: SuperNet<T>,
    pub optimizer: Option<Optimizer<T>>,
    pub extra: serde_json::Value,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

pub fn save_checkpoint<T: Scalar>(dir: &Path, ckpt: &Checkpoint<T>) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut blob: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: String, a: &Array<T>, blob: &mut Vec<u8>| {
        tensors.push(TensorEntry { name, shape: a.shape().to_vec(), offset: blob.len() as u64 });
        for v in a.data() {
            blob.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    };
    for (name, a) in ckpt.net.named_tensors() {
        push(name, a, &mut blob);
    }
    let optimizer = ckpt.optimizer.as_ref().map(|opt| {
        let mut steps = BTreeMap::new();
        for (name, st) in opt.state() {
            push(format!("opt.m/{}", name), &st.m, &mut blob);
            push(format!("opt.v/{}", name), &st.v, &mut blob);
            steps.insert(name.clone(), st.step);
        }
        OptimizerManifest { config: opt.config().clone(), lr: opt.lr(), steps }
    });
    let manifest = Manifest {
        format: FORMAT_TAG.to_string(),
        space: ckpt.net.space().clone(),
        frozen: ckpt.net.is_frozen(),
        tensors,
        optimizer,
        extra: ckpt.extra.clone(),
    };
    let blob_path = dir.join(BLOB);
    fs::write(&blob_path, &blob).map_err(io_err(&blob_path))?;
    let manifest_path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, text + "\n").map_err(io_err(&manifest_path))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>, CheckpointError> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT_TAG {
        return Err(CheckpointError::Format(manifest.format));
    }
    let bad = |name: &str, detail: String| CheckpointError::Tensor { name: name.to_string(), detail };
    manifest.space.validate().map_err(|e| bad("space", e.to_string()))?;
    let blob_path = dir.join(BLOB);
    let blob = fs::read(&blob_path).map_err(io_err(&blob_path))?;

    let mut tensors: BTreeMap<String, Array<T>> = BTreeMap::new();
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 8 * n;
        if end > blob.len() {
            return Err(bad(&entry.name, format!("needs bytes {}..{}, blob has {}", start, end, blob.len())));
        }
        let data = blob[start..end]
            .chunks_exact(8)
            .map(|c| T::cast(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        let a = Array::from_vec(&entry.shape, data).map_err(|e| bad(&entry.name, e.to_string()))?;
        tensors.insert(entry.name.clone(), a);
    }

    let space = manifest.space;
    let c = space.num_candidates();
    let reference = SuperNet::<T>::new(space.clone(), 0);
    let mut blocks = Vec::with_capacity(space.num_layers * c);
    for i in 0..space.num_layers * c {
        let prefix = Slot::Block { layer: i / c, op: i % c }.prefix();
        let mut block = ParamMap::new();
        for (name, expected) in reference.block(i / c, i % c) {
            let full = format!("{}{}", prefix, name);
            let a = tensors.remove(&full).ok_or_else(|| bad(&full, "missing".into()))?;
            if a.shape() != expected.shape() {
                return Err(bad(&full, format!("shape {:?}, expected {:?}", a.shape(), expected.shape())));
            }
            block.insert(name.clone(), a);
        }
        blocks.push(block);
    }
    let mut shared = ParamMap::new();
    for (name, expected) in reference.shared() {
        let a = tensors.remove(name).ok_or_else(|| bad(name, "missing".into()))?;
        if a.shape() != expected.shape() {
            return Err(bad(name, format!("shape {:?}, expected {:?}", a.shape(), expected.shape())));
        }
        shared.insert(name.clone(), a);
    }

    let optimizer = match manifest.optimizer {
        None => None,
        Some(om) => {
            let mut opt = Optimizer::new(om.config);
            opt.set_lr(om.lr);
            let mut state = BTreeMap::new();
            for (name, step) in om.steps {
                let m = tensors.remove(&format!("opt.m/{}", name)).ok_or_else(|| bad(&name, "missing first moment".into()))?;
                let v = tensors.remove(&format!("opt.v/{}", name)).ok_or_else(|| bad(&name, "missing second moment".into()))?;
                state.insert(name, MomentState { m, v, step });
            }
            opt.restore_state(state);
            Some(opt)
        }
    };
    if let Some(name) = tensors.keys().next() {
        return Err(bad(name, "not part of the space".into()));
    }
    Ok(Checkpoint {
        net: SuperNet::from_parts(space, blocks, shared, manifest.frozen),
        optimizer,
        extra: manifest.extra,
    })
}
