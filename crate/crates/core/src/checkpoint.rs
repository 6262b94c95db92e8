//! On-disk checkpoints: one safetensors blob per network, optimizer moments,
//! and a JSON manifest describing configuration and training progress.
//!
//! Writes go to a sibling temporary directory that is renamed into place, so
//! a crash never leaves a half-written checkpoint at the target path.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{config_hash, hex, DataSource, TrainConfig};
use crate::error::{JokrError, Result};
use crate::models::{JokrModels, ModelConfig, NETWORKS};
use crate::optim::Adam;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

/// Training progress. Per-iteration randomness is derived from the seed and
/// the iteration number, so no generator state needs to be stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: u8,
    pub iteration_stage1: u64,
    pub iteration_stage2: u64,
}

impl Default for TrainState {
    fn default() -> Self {
        Self {
            stage: 1,
            iteration_stage1: 0,
            iteration_stage2: 0,
        }
    }
}

impl TrainState {
    pub fn iteration(&self) -> u64 {
        if self.stage == 2 {
            self.iteration_stage2
        } else {
            self.iteration_stage1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    #[serde(rename = "K")]
    pub k: usize,
    pub resolution: [usize; 2],
    pub sigma: f64,
    pub alpha: f64,
    pub iteration: u64,
    pub state: TrainState,
    pub config_hash: String,
    /// Digest of the weights; stamps service responses.
    pub checkpoint_id: String,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub data: Option<DataSource>,
    /// Network name to blob file.
    pub networks: BTreeMap<String, String>,
    /// Optimizer group name to state file.
    #[serde(default)]
    pub optimizers: BTreeMap<String, String>,
}

impl Manifest {
    fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(JokrError::CheckpointInvalid(m));
        if self.format_version != FORMAT_VERSION {
            return invalid(format!("unsupported format version {}", self.format_version));
        }
        if self.k != self.model.num_keypoints || self.resolution != self.model.resolution {
            return invalid("manifest header disagrees with model config".into());
        }
        if let Some(missing) = NETWORKS.iter().find(|n| !self.networks.contains_key(**n)) {
            return invalid(format!("no blob for network {missing}"));
        }
        if !matches!(self.state.stage, 1 | 2) {
            return invalid(format!("stage {} is not 1 or 2", self.state.stage));
        }
        self.model
            .validate()
            .map_err(|e| JokrError::CheckpointInvalid(e.to_string()))
    }

    /// Errors with `ConfigMismatch` when `expected` cannot reuse these weights.
    pub fn check_compatible(&self, expected: &ModelConfig) -> Result<()> {
        if self.model.num_keypoints != expected.num_keypoints {
            return Err(JokrError::ConfigMismatch(format!(
                "checkpoint has K = {}, config asks for K = {}",
                self.model.num_keypoints, expected.num_keypoints
            )));
        }
        if self.model.resolution != expected.resolution || self.model.arch != expected.arch {
            return Err(JokrError::ConfigMismatch(
                "checkpoint resolution or architecture differs from config".into(),
            ));
        }
        if self.model.confidence != expected.confidence {
            return Err(JokrError::ConfigMismatch("confidence map parameters differ".into()));
        }
        Ok(())
    }
}

/// Digest over every parameter's name, shape and little-endian f32 bytes.
pub fn checkpoint_id(models: &JokrModels) -> Result<String> {
    let mut h = Sha256::new();
    for (name, var) in models.named_vars(&NETWORKS)? {
        h.update(name.as_bytes());
        for d in var.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        let values: Vec<f32> = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        for v in values {
            h.update(v.to_le_bytes());
        }
    }
    Ok(hex(&h.finalize())[..16].to_string())
}

/// Extra context recorded alongside the weights.
#[derive(Default)]
pub struct SaveContext<'a> {
    pub state: TrainState,
    pub train: Option<&'a TrainConfig>,
    pub data: Option<&'a DataSource>,
    pub optimizers: &'a [(&'a str, &'a Adam)],
}

pub fn save_checkpoint(dir: &Path, models: &JokrModels, ctx: &SaveContext<'_>) -> Result<Manifest> {
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent)?;
    let name = dir
        .file_name()
        .ok_or_else(|| JokrError::InvalidConfig(format!("bad checkpoint path {}", dir.display())))?
        .to_string_lossy()
        .into_owned();
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;

    let mut networks = BTreeMap::new();
    for net in NETWORKS {
        let file = format!("{net}.safetensors");
        models.save_network(net, &tmp.join(&file))?;
        networks.insert(net.to_string(), file);
    }
    let mut optimizers = BTreeMap::new();
    for (group, opt) in ctx.optimizers {
        let file = format!("optim_{group}.safetensors");
        opt.save(&tmp.join(&file))?;
        optimizers.insert(group.to_string(), file);
    }
    let cfg = models.config;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        k: cfg.num_keypoints,
        resolution: cfg.resolution,
        sigma: cfg.confidence.sigma,
        alpha: cfg.confidence.alpha,
        iteration: ctx.state.iteration(),
        state: ctx.state,
        config_hash: config_hash(&cfg, ctx.train.unwrap_or(&TrainConfig::default())),
        checkpoint_id: checkpoint_id(models)?,
        model: cfg,
        train: ctx.train.cloned(),
        data: ctx.data.cloned(),
        networks,
        optimizers,
    };
    fs::write(tmp.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;

    if dir.exists() {
        let old = parent.join(format!(".{name}.old-{}", std::process::id()));
        fs::rename(dir, &old)?;
        fs::rename(&tmp, dir)?;
        fs::remove_dir_all(&old)?;
    } else {
        fs::rename(&tmp, dir)?;
    }
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| JokrError::CheckpointInvalid(format!("{}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| JokrError::CheckpointInvalid(format!("{}: {e}", path.display())))?;
    manifest.validate()?;
    Ok(manifest)
}

/// Rebuilds the networks described by the manifest and loads their weights.
pub fn load_models(dir: &Path, dtype: DType, device: &Device) -> Result<(JokrModels, Manifest)> {
    let manifest = read_manifest(dir)?;
    let mut models = JokrModels::new(manifest.model, dtype, device)?;
    for (net, file) in &manifest.networks {
        let path = dir.join(file);
        if !path.is_file() {
            return Err(JokrError::CheckpointInvalid(format!("missing blob {}", path.display())));
        }
        models.load_network(net, &path)?;
    }
    Ok((models, manifest))
}

/// Networks and training progress of a checkpoint, in f32 on the CPU.
pub fn resume(dir: &Path) -> Result<(JokrModels, TrainState)> {
    let (models, manifest) = load_models(dir, DType::F32, &Device::Cpu)?;
    Ok((models, manifest.state))
}

/// Loads the named optimizer group's state if the checkpoint has one.
pub fn load_optimizer(dir: &Path, manifest: &Manifest, group: &str, opt: &mut Adam) -> Result<bool> {
    match manifest.optimizers.get(group) {
        Some(file) => {
            opt.load(&dir.join(file))?;
            Ok(true)
        }
        None => Ok(false),
    }
}
