use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::Mutex;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use candle_core::{DType, Device};
use jokr_core::checkpoint::{load_models, Manifest};
use jokr_core::media_io::{resize_frame, Domain, Frame, VideoPairDataset};
use jokr_core::models::JokrModels;
use jokr_core::Result;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ApiError;

/// Decoded frames kept for `frame_id` lookups.
const FRAME_CACHE_CAPACITY: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInfo {
    #[serde(rename = "K")]
    pub k: usize,
    pub resolution: [usize; 2],
    pub checkpoint_id: String,
    pub domains: Vec<Domain>,
}

#[derive(Default)]
struct FrameCache {
    frames: HashMap<String, Frame>,
    order: VecDeque<String>,
}

impl FrameCache {
    fn insert(&mut self, id: String, frame: Frame) {
        if self.frames.insert(id.clone(), frame).is_none() {
            self.order.push_back(id);
        }
        while self.order.len() > FRAME_CACHE_CAPACITY {
            if let Some(old) = self.order.pop_front() {
                self.frames.remove(&old);
            }
        }
    }
}

/// One frozen checkpoint plus the frames clients have uploaded against it.
pub struct Session {
    models: JokrModels,
    manifest: Manifest,
    sources: Option<VideoPairDataset>,
    cache: Mutex<FrameCache>,
}

impl Session {
    pub fn new(models: JokrModels, manifest: Manifest, sources: Option<VideoPairDataset>) -> Self {
        Self {
            models,
            manifest,
            sources,
            cache: Mutex::new(FrameCache::default()),
        }
    }

    /// Loads a checkpoint in f32. The training videos recorded in its manifest
    /// become the retarget sources when they can be loaded from `data_base`.
    pub fn load(dir: &Path, data_base: &Path) -> Result<Self> {
        let (models, manifest) = load_models(dir, DType::F32, &Device::Cpu)?;
        let sources = match &manifest.data {
            Some(data) => match data.load(data_base) {
                Ok(ds) => Some(ds),
                Err(e) => {
                    log::warn!("training videos unavailable, retarget needs uploaded frames: {e}");
                    None
                }
            },
            None => None,
        };
        Ok(Self::new(models, manifest, sources))
    }

    pub fn models(&self) -> &JokrModels {
        &self.models
    }

    pub fn checkpoint_id(&self) -> &str {
        &self.manifest.checkpoint_id
    }

    pub fn sources(&self) -> Option<&VideoPairDataset> {
        self.sources.as_ref()
    }

    pub fn info(&self) -> ModelInfo {
        ModelInfo {
            k: self.manifest.k,
            resolution: self.manifest.resolution,
            checkpoint_id: self.manifest.checkpoint_id.clone(),
            domains: vec![Domain::A, Domain::B],
        }
    }

    /// Decodes a base64 image at model resolution and caches it. The id is a
    /// digest of the encoded bytes, so identical uploads share an id.
    pub fn upload(&self, encoded: &str, domain: Domain) -> std::result::Result<(String, Frame), ApiError> {
        let bytes = STANDARD
            .decode(encoded.trim())
            .map_err(|e| ApiError::bad_image(format!("frame is not valid base64: {e}")))?;
        let img = image::load_from_memory(&bytes)
            .map_err(|e| ApiError::bad_image(format!("frame does not decode: {e}")))?
            .to_rgb8();
        let frame = resize_frame(&img, self.models.config.image_resolution(), 0, domain);
        let id = frame_id(&bytes);
        self.cache.lock().expect("frame cache").insert(id.clone(), frame.clone());
        Ok((id, frame))
    }

    pub fn cached(&self, id: &str) -> Option<Frame> {
        self.cache.lock().expect("frame cache").frames.get(id).cloned()
    }
}

pub fn frame_id(bytes: &[u8]) -> String {
    Sha256::digest(bytes)[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_base64(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}
