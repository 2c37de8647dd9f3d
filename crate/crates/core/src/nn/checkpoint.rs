//! Checkpoints: a JSON manifest `<name>.ckpt.json` (config, tensor names,
//! shapes and byte offsets) plus one float32 little-endian blob
//! `<name>.ckpt.raw`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Network, NetworkConfig};

pub const FORMAT: &str = "VNCSEG-CKPT1";
pub const MANIFEST_SUFFIX: &str = ".ckpt.json";
pub const BLOB_SUFFIX: &str = ".ckpt.raw";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    AdamFirst,
    AdamSecond,
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Element count.
    pub len: usize,
}

/// Optimizer and selection state needed to resume training exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    /// Number of completed iterations.
    pub iteration: usize,
    pub adam_step: u64,
    pub best_val_dice: Option<f64>,
    pub best_iteration: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub config: NetworkConfig,
    pub parameter_count: usize,
    pub blob_bytes: usize,
    pub tensors: Vec<TensorEntry>,
    pub training: Option<TrainState>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub network: Network<f32>,
    pub state: Option<TrainState>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointPaths {
    pub manifest: PathBuf,
    pub blob: PathBuf,
}

impl CheckpointPaths {
    pub fn new(path: impl AsRef<Path>) -> Self {
        let s = path.as_ref().to_string_lossy();
        let prefix = s
            .strip_suffix(MANIFEST_SUFFIX)
            .or_else(|| s.strip_suffix(BLOB_SUFFIX))
            .unwrap_or(&s)
            .to_string();
        Self {
            manifest: PathBuf::from(format!("{prefix}{MANIFEST_SUFFIX}")),
            blob: PathBuf::from(format!("{prefix}{BLOB_SUFFIX}")),
        }
    }
}

fn layout(net: &Network<f32>) -> Vec<(String, TensorKind, Vec<usize>, Vec<&[f32]>)> {
    let mut out = Vec::new();
    for (name, p) in net.params() {
        out.push((
            name,
            TensorKind::Param,
            p.shape.clone(),
            vec![p.value.as_slice(), p.moments.first.as_slice(), p.moments.second.as_slice()],
        ));
    }
    for (name, b) in net.buffers() {
        out.push((name, TensorKind::Buffer, vec![b.len()], vec![b.as_slice()]));
    }
    out
}

impl Checkpoint {
    pub fn new(network: Network<f32>, state: Option<TrainState>) -> Self {
        Self { network, state }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let paths = CheckpointPaths::new(path);
        let mut tensors = Vec::new();
        let mut blob: Vec<u8> = Vec::new();
        for (name, kind, shape, parts) in layout(&self.network) {
            let kinds: &[TensorKind] = match kind {
                TensorKind::Param => &[TensorKind::Param, TensorKind::AdamFirst, TensorKind::AdamSecond],
                _ => &[TensorKind::Buffer],
            };
            for (&k, data) in kinds.iter().zip(parts) {
                tensors.push(TensorEntry {
                    name: name.clone(),
                    kind: k,
                    shape: shape.clone(),
                    offset: blob.len(),
                    len: data.len(),
                });
                blob.extend(data.iter().flat_map(|v| v.to_le_bytes()));
            }
        }
        let manifest = Manifest {
            format: FORMAT.to_string(),
            config: self.network.config().clone(),
            parameter_count: self.network.parameter_count(),
            blob_bytes: blob.len(),
            tensors,
            training: self.state.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialization is infallible");
        if let Some(dir) = paths.manifest.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&paths.blob, &blob).map_err(|e| Error::io(&paths.blob, e))?;
        fs::write(&paths.manifest, text).map_err(|e| Error::io(&paths.manifest, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let paths = CheckpointPaths::new(path);
        let text = fs::read_to_string(&paths.manifest).map_err(|e| Error::io(&paths.manifest, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&paths.manifest, e))?;
        if manifest.format != FORMAT {
            return Err(Error::Magic { expected: FORMAT.to_string(), found: manifest.format });
        }
        let blob = fs::read(&paths.blob).map_err(|e| Error::io(&paths.blob, e))?;
        if blob.len() != manifest.blob_bytes {
            return Err(Error::SizeMismatch { expected: manifest.blob_bytes, found: blob.len() });
        }
        let mut network = Network::<f32>::zeros(&manifest.config)?;
        if manifest.parameter_count != network.parameter_count() {
            return Err(Error::Checkpoint(format!(
                "manifest lists {} parameters, config implies {}",
                manifest.parameter_count,
                network.parameter_count()
            )));
        }
        let expected_bytes: usize = layout(&network).iter().flat_map(|(_, _, _, parts)| parts.iter().map(|p| p.len() * 4)).sum();
        if expected_bytes != blob.len() {
            return Err(Error::SizeMismatch { expected: expected_bytes, found: blob.len() });
        }

        let mut entries = manifest.tensors.iter();
        let mut next = |name: &str, kind: TensorKind, shape: &[usize], len: usize| -> Result<Vec<f32>> {
            let e = entries
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("manifest ends before {name}")))?;
            if e.name != name || e.kind != kind || e.shape != shape || e.len != len {
                return Err(Error::Checkpoint(format!(
                    "expected {name} {kind:?} {shape:?}, manifest has {} {:?} {:?}",
                    e.name, e.kind, e.shape
                )));
            }
            let end = e.offset + 4 * e.len;
            if end > blob.len() {
                return Err(Error::SizeMismatch { expected: end, found: blob.len() });
            }
            Ok(blob[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };
        for (name, p) in network.params_mut() {
            let shape = p.shape.clone();
            let n = p.len();
            p.value = next(&name, TensorKind::Param, &shape, n)?;
            p.moments.first = next(&name, TensorKind::AdamFirst, &shape, n)?;
            p.moments.second = next(&name, TensorKind::AdamSecond, &shape, n)?;
        }
        for (name, b) in network.buffers_mut() {
            let n = b.len();
            *b = next(&name, TensorKind::Buffer, &[n], n)?;
        }
        if entries.next().is_some() {
            return Err(Error::Checkpoint("manifest lists extra tensors".into()));
        }
        Ok(Self { network, state: manifest.training })
    }
}

pub fn save_checkpoint(net: &Network<f32>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::new(net.clone(), None).save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network<f32>> {
    Ok(Checkpoint::load(path)?.network)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let paths = CheckpointPaths::new(path);
    let text = fs::read_to_string(&paths.manifest).map_err(|e| Error::io(&paths.manifest, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&paths.manifest, e))
}
