//! Training and experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{JokrError, Result};
use crate::keypoints::AugmentRanges;
use crate::losses::{ConfusionMode, IdentityFeatures, LossWeights, PerceptualExtractor, PyramidFeatures};
use crate::media_io::{load_pair, IngestConfig, VideoPairDataset, VideoSource};
use crate::models::ModelConfig;
use crate::synthetic::{toy_pair, ToyPairConfig};

/// Feature extractor used by the perceptual reconstruction term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PerceptualKind {
    /// Multi-scale pixel pyramid.
    #[default]
    Pyramid,
    /// Raw pixels; the term reduces to MSE.
    Identity,
}

impl PerceptualKind {
    pub fn extractor(self) -> Box<dyn PerceptualExtractor> {
        match self {
            PerceptualKind::Pyramid => Box::new(PyramidFeatures),
            PerceptualKind::Identity => Box::new(IdentityFeatures),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations_stage1: u64,
    pub iterations_stage2: u64,
    pub lr: f64,
    pub betas: [f64; 2],
    pub batch_size: usize,
    pub weights: LossWeights,
    /// Keypoint-level augmentation applied right before the discriminator.
    pub augment_ranges: AugmentRanges,
    /// Image-level transforms for the equivariance term.
    pub equivariance_ranges: AugmentRanges,
    pub confusion_mode: ConfusionMode,
    pub perceptual: PerceptualKind,
    /// Seeds batch sampling and augmentation draws.
    pub seed: u64,
    /// Iterations between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_interval: u64,
    /// Iterations between loss records; 0 disables logging.
    pub log_interval: u64,
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations_stage1: 45_000,
            iterations_stage2: 45_000,
            lr: 1e-4,
            betas: [0.9, 0.999],
            batch_size: 8,
            weights: LossWeights::default(),
            augment_ranges: AugmentRanges::default(),
            equivariance_ranges: AugmentRanges::default(),
            confusion_mode: ConfusionMode::default(),
            perceptual: PerceptualKind::default(),
            seed: 0,
            checkpoint_interval: 5_000,
            log_interval: 1,
            divergence_threshold: 1e4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(JokrError::InvalidConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad(format!("betas must lie in [0, 1), got {:?}", self.betas));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.divergence_threshold > 0.0) {
            return bad("divergence_threshold must be positive".into());
        }
        self.weights.validate()?;
        self.augment_ranges.validate()?;
        self.equivariance_ranges.validate()
    }
}

/// Where training frames come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Videos {
        a: VideoSource,
        b: VideoSource,
        #[serde(default)]
        ingest: IngestConfig,
    },
    Toy(ToyPairConfig),
}

impl DataSource {
    /// Relative paths are resolved against `base`.
    pub fn load(&self, base: &Path) -> Result<VideoPairDataset> {
        match self.rebased(base) {
            DataSource::Videos { a, b, ingest } => load_pair(&a, &b, &ingest),
            DataSource::Toy(cfg) => toy_pair(&cfg),
        }
    }

    /// The same source with relative paths joined onto `base`.
    pub fn rebased(&self, base: &Path) -> DataSource {
        match self {
            DataSource::Videos { a, b, ingest } => {
                let fix = |s: &VideoSource| VideoSource {
                    path: base.join(&s.path),
                    masks: s.masks.as_ref().map(|m| base.join(m)),
                };
                DataSource::Videos {
                    a: fix(a),
                    b: fix(b),
                    ingest: ingest.clone(),
                }
            }
            DataSource::Toy(cfg) => DataSource::Toy(*cfg),
        }
    }
}

/// A complete experiment: networks, optimization and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSource,
    /// Run directory holding `checkpoint/` and `losses.ndjson`.
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| JokrError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| JokrError::InvalidConfig(e.to_string()))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output_dir.join("checkpoint")
    }

    pub fn log_path(&self) -> PathBuf {
        self.output_dir.join("losses.ndjson")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if let DataSource::Videos { ingest, .. } = &self.data {
            if ingest.resolution != self.model.resolution {
                return Err(JokrError::ConfigMismatch(format!(
                    "ingest resolution {:?} differs from model resolution {:?}",
                    ingest.resolution, self.model.resolution
                )));
            }
        }
        Ok(())
    }
}

/// Hex sha256 of the JSON form of the model and training configuration.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let json = serde_json::to_vec(&(model, train)).expect("configs serialize");
    hex(&Sha256::digest(json))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
