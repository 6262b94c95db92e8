//! Video pair ingestion, silhouette masks and training batch sampling.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use image::{AnimationDecoder, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{JokrError, Result};

/// Which of the two input videos a frame belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub fn other(self) -> Self {
        match self {
            Domain::A => Domain::B,
            Domain::B => Domain::A,
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::A => "A",
            Domain::B => "B",
        })
    }
}

impl std::str::FromStr for Domain {
    type Err = JokrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Domain::A),
            "B" | "b" => Ok(Domain::B),
            other => Err(JokrError::InvalidConfig(format!("unknown domain {other:?}"))),
        }
    }
}

/// One RGB frame, `H x W x 3` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub pixels: Array3<f32>,
    pub index: usize,
    pub video: Domain,
}

impl Frame {
    pub fn new(pixels: Array3<f32>, index: usize, video: Domain) -> Result<Self> {
        if pixels.dim().2 != 3 {
            return Err(JokrError::ShapeMismatch(format!(
                "frame has {} channels, expected 3",
                pixels.dim().2
            )));
        }
        Ok(Self {
            pixels: pixels.mapv(|p| p.clamp(0.0, 1.0)),
            index,
            video,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn from_rgb(img: &RgbImage, index: usize, video: Domain) -> Self {
        let (w, h) = img.dimensions();
        let pixels = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        });
        Self {
            pixels,
            index,
            video,
        }
    }

    pub fn to_rgb(&self) -> RgbImage {
        let (h, w, _) = self.pixels.dim();
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| (self.pixels[[y as usize, x as usize, c]] * 255.0).round().clamp(0.0, 255.0) as u8;
            Rgb([px(0), px(1), px(2)])
        })
    }

    /// `(3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (h, w, _) = self.pixels.dim();
        let chw = self.pixels.view().permuted_axes([2, 0, 1]);
        let data: Vec<f32> = chw.iter().copied().collect();
        Ok(Tensor::from_vec(data, (3, h, w), device)?.to_dtype(dtype)?)
    }

    /// Inverse of [`Frame::to_tensor`]; values are clamped to `[0, 1]`.
    pub fn from_tensor(t: &Tensor, index: usize, video: Domain) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(JokrError::ShapeMismatch(format!("{c} channels, expected 3")));
        }
        let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let chw = Array3::from_shape_vec((3, h, w), data)
            .map_err(|e| JokrError::ShapeMismatch(e.to_string()))?;
        Frame::new(chw.permuted_axes([1, 2, 0]).as_standard_layout().to_owned(), index, video)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    GroundTruth,
    Threshold,
    ExternalNetwork,
}

/// Soft silhouette, `H x W` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteMask {
    pub values: Array2<f32>,
    pub source: MaskSource,
}

impl SilhouetteMask {
    pub fn new(values: Array2<f32>, source: MaskSource) -> Self {
        Self {
            values: values.mapv(|v| v.clamp(0.0, 1.0)),
            source,
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// `(1, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (h, w) = self.values.dim();
        let data: Vec<f32> = self.values.iter().copied().collect();
        Ok(Tensor::from_vec(data, (1, h, w), device)?.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor, source: MaskSource) -> Result<Self> {
        let t = t.to_dtype(DType::F32)?;
        let t = if t.rank() == 3 { t.squeeze(0)? } else { t };
        let (h, w) = t.dims2()?;
        let data: Vec<f32> = t.flatten_all()?.to_vec1()?;
        let values = Array2::from_shape_vec((h, w), data)
            .map_err(|e| JokrError::ShapeMismatch(e.to_string()))?;
        Ok(Self::new(values, source))
    }

    pub fn to_gray(&self) -> GrayImage {
        let (h, w) = self.values.dim();
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            Luma([(self.values[[y as usize, x as usize]] * 255.0).round() as u8])
        })
    }

    pub fn from_gray(img: &GrayImage, source: MaskSource) -> Self {
        let (w, h) = img.dimensions();
        let values = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
            img.get_pixel(x as u32, y as u32)[0] as f32 / 255.0
        });
        Self::new(values, source)
    }
}

/// Both videos with parallel silhouettes, at a common resolution.
#[derive(Debug, Clone)]
pub struct VideoPairDataset {
    pub frames_a: Vec<Frame>,
    pub frames_b: Vec<Frame>,
    pub masks_a: Vec<SilhouetteMask>,
    pub masks_b: Vec<SilhouetteMask>,
    pub resolution: (usize, usize),
}

impl VideoPairDataset {
    pub fn new(
        frames_a: Vec<Frame>,
        masks_a: Vec<SilhouetteMask>,
        frames_b: Vec<Frame>,
        masks_b: Vec<SilhouetteMask>,
    ) -> Result<Self> {
        let resolution = frames_a
            .first()
            .map(|f| (f.height(), f.width()))
            .ok_or_else(|| JokrError::TooShort {
                video: "A".into(),
                frames: 0,
            })?;
        for (name, frames, masks) in [("A", &frames_a, &masks_a), ("B", &frames_b, &masks_b)] {
            if frames.len() < 2 {
                return Err(JokrError::TooShort {
                    video: name.into(),
                    frames: frames.len(),
                });
            }
            if frames.len() != masks.len() {
                return Err(JokrError::ShapeMismatch(format!(
                    "video {name}: {} frames but {} masks",
                    frames.len(),
                    masks.len()
                )));
            }
            for (f, m) in frames.iter().zip(masks.iter()) {
                if (f.height(), f.width()) != resolution {
                    return Err(JokrError::ShapeMismatch(format!(
                        "frame {} of {name} is {}x{}, expected {:?}",
                        f.index,
                        f.height(),
                        f.width(),
                        resolution
                    )));
                }
                if m.dim() != resolution {
                    return Err(JokrError::MaskMismatch {
                        expected: resolution,
                        got: m.dim(),
                    });
                }
            }
        }
        Ok(Self {
            frames_a,
            frames_b,
            masks_a,
            masks_b,
            resolution,
        })
    }

    pub fn frames(&self, domain: Domain) -> &[Frame] {
        match domain {
            Domain::A => &self.frames_a,
            Domain::B => &self.frames_b,
        }
    }

    pub fn masks(&self, domain: Domain) -> &[SilhouetteMask] {
        match domain {
            Domain::A => &self.masks_a,
            Domain::B => &self.masks_b,
        }
    }

    pub fn len(&self, domain: Domain) -> usize {
        self.frames(domain).len()
    }

    /// Stacks one video into `(N, 3, H, W)` frames and `(N, 1, H, W)` masks.
    pub fn tensors(&self, domain: Domain, dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
        let frames = self
            .frames(domain)
            .iter()
            .map(|f| f.to_tensor(dtype, device))
            .collect::<Result<Vec<_>>>()?;
        let masks = self
            .masks(domain)
            .iter()
            .map(|m| m.to_tensor(dtype, device))
            .collect::<Result<Vec<_>>>()?;
        Ok((Tensor::stack(&frames, 0)?, Tensor::stack(&masks, 0)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskProviderKind {
    #[default]
    GroundTruth,
    Threshold,
    External,
}

/// Ingestion settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    /// `[H, W]` every frame is resized to.
    pub resolution: [usize; 2],
    pub mask_provider: MaskProviderKind,
    /// Foreground threshold for [`MaskProviderKind::Threshold`].
    pub threshold: f64,
    /// Background color for threshold masking; the modal border color when unset.
    pub background: Option<[f32; 3]>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            resolution: [128, 128],
            mask_provider: MaskProviderKind::GroundTruth,
            threshold: 0.5,
            background: None,
        }
    }
}

/// A video location: a frame directory or a video file, plus optional masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSource {
    pub path: PathBuf,
    #[serde(default)]
    pub masks: Option<PathBuf>,
}

impl VideoSource {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            masks: None,
        }
    }

    pub fn with_masks(mut self, masks: impl Into<PathBuf>) -> Self {
        self.masks = Some(masks.into());
        self
    }
}

/// Decodes a video file into RGB frames.
pub trait VideoDecoder {
    fn decode(&self, path: &Path) -> Result<Vec<RgbImage>>;
}

/// Decoder for animated GIFs; the only container handled without a plugin.
#[derive(Debug, Default, Clone, Copy)]
pub struct GifDecoder;

impl VideoDecoder for GifDecoder {
    fn decode(&self, path: &Path) -> Result<Vec<RgbImage>> {
        let file = std::io::BufReader::new(fs::File::open(path)?);
        let decoder = image::codecs::gif::GifDecoder::new(file)?;
        let frames = decoder.into_frames().collect_frames()?;
        Ok(frames
            .into_iter()
            .map(|f| image::DynamicImage::ImageRgba8(f.into_buffer()).to_rgb8())
            .collect())
    }
}

/// Produces a silhouette for a frame, e.g. by running a segmentation network.
pub trait MaskProvider: Send + Sync {
    fn name(&self) -> &str;
    fn predict(&self, frame: &Frame) -> std::result::Result<Array2<f32>, String>;
}

/// Calls an external provider and enforces the mask contract.
pub fn mask_from_external(frame: &Frame, provider: &dyn MaskProvider) -> Result<SilhouetteMask> {
    let values = provider
        .predict(frame)
        .map_err(|message| JokrError::ProviderFailure {
            index: frame.index,
            message: format!("{}: {message}", provider.name()),
        })?;
    let expected = (frame.height(), frame.width());
    if values.dim() != expected {
        return Err(JokrError::MaskMismatch {
            expected,
            got: values.dim(),
        });
    }
    Ok(SilhouetteMask::new(values, MaskSource::ExternalNetwork))
}

/// Most frequent color among border pixels, quantized to 8 bits.
pub fn modal_border_color(frame: &Frame) -> [f32; 3] {
    let (h, w, _) = frame.pixels.dim();
    let mut counts: HashMap<[u8; 3], usize> = HashMap::new();
    let quant = |y: usize, x: usize| {
        let q = |c| (frame.pixels[[y, x, c]] * 255.0).round() as u8;
        [q(0), q(1), q(2)]
    };
    for x in 0..w {
        *counts.entry(quant(0, x)).or_default() += 1;
        *counts.entry(quant(h - 1, x)).or_default() += 1;
    }
    for y in 1..h.saturating_sub(1) {
        *counts.entry(quant(y, 0)).or_default() += 1;
        *counts.entry(quant(y, w - 1)).or_default() += 1;
    }
    // Ties break toward the smaller color so the result is deterministic.
    let best = counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(c, _)| c)
        .unwrap_or([0, 0, 0]);
    best.map(|c| c as f32 / 255.0)
}

/// Binary silhouette: a pixel is foreground when some channel differs from
/// `background` by more than `threshold`.
pub fn mask_from_threshold(frame: &Frame, threshold: f64, background: [f32; 3]) -> SilhouetteMask {
    let (h, w, _) = frame.pixels.dim();
    let values = Array2::from_shape_fn((h, w), |(y, x)| {
        let diff = (0..3)
            .map(|c| (frame.pixels[[y, x, c]] - background[c]).abs())
            .fold(0.0f32, f32::max);
        if diff as f64 > threshold {
            1.0
        } else {
            0.0
        }
    });
    SilhouetteMask::new(values, MaskSource::Threshold)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                .unwrap_or(false)
        })
        .collect();
    // Zero-padded numeric names sort correctly as strings; numeric keys first
    // also handle unpadded names.
    files.sort_by_key(|p| {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_string();
        let digits: String = stem.chars().filter(|c| c.is_ascii_digit()).collect();
        (digits.parse::<u64>().unwrap_or(u64::MAX), stem)
    });
    Ok(files)
}

fn read_rgb_frames(path: &Path, decoder: &dyn VideoDecoder) -> Result<Vec<RgbImage>> {
    if !path.exists() {
        return Err(JokrError::MissingInput(path.to_path_buf()));
    }
    if path.is_dir() {
        image_files(path)?
            .iter()
            .map(|p| Ok(image::open(p)?.to_rgb8()))
            .collect()
    } else {
        decoder.decode(path)
    }
}

/// Bilinear resize of an RGB image into a `[0, 1]` frame.
pub fn resize_frame(img: &RgbImage, (h, w): (usize, usize), index: usize, video: Domain) -> Frame {
    let float: ImageBuffer<Rgb<f32>, Vec<f32>> = image::DynamicImage::ImageRgb8(img.clone()).to_rgb32f();
    let resized = if float.dimensions() == (w as u32, h as u32) {
        float
    } else {
        image::imageops::resize(&float, w as u32, h as u32, FilterType::Triangle)
    };
    let pixels = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        resized.get_pixel(x as u32, y as u32)[c].clamp(0.0, 1.0)
    });
    Frame {
        pixels,
        index,
        video,
    }
}

/// Bilinear resize of a soft mask.
pub fn resize_mask(mask: &SilhouetteMask, (h, w): (usize, usize)) -> SilhouetteMask {
    if mask.dim() == (h, w) {
        return mask.clone();
    }
    let (mh, mw) = mask.dim();
    let img: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_fn(mw as u32, mh as u32, |x, y| Luma([mask.values[[y as usize, x as usize]]]));
    let resized = image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle);
    let values = Array2::from_shape_fn((h, w), |(y, x)| resized.get_pixel(x as u32, y as u32)[0]);
    SilhouetteMask::new(values, mask.source)
}

/// Frames of a GIF or image directory at `resolution`, without masks. Used
/// for inference inputs such as synchronization clips.
pub fn load_frames(path: &Path, resolution: (usize, usize), domain: Domain) -> Result<Vec<Frame>> {
    let raw = read_rgb_frames(path, &GifDecoder)?;
    if raw.is_empty() {
        return Err(JokrError::MissingInput(path.to_path_buf()));
    }
    Ok(raw
        .iter()
        .enumerate()
        .map(|(i, img)| resize_frame(img, resolution, i, domain))
        .collect())
}

fn load_video(
    source: &VideoSource,
    domain: Domain,
    config: &IngestConfig,
    decoder: &dyn VideoDecoder,
    provider: Option<&dyn MaskProvider>,
) -> Result<(Vec<Frame>, Vec<SilhouetteMask>)> {
    let res = (config.resolution[0], config.resolution[1]);
    let raw = read_rgb_frames(&source.path, decoder)?;
    if raw.is_empty() {
        return Err(JokrError::MissingInput(source.path.clone()));
    }
    if raw.len() < 2 {
        return Err(JokrError::TooShort {
            video: domain.to_string(),
            frames: raw.len(),
        });
    }
    let frames: Vec<Frame> = raw
        .iter()
        .enumerate()
        .map(|(i, img)| resize_frame(img, res, i, domain))
        .collect();
    let masks = match config.mask_provider {
        MaskProviderKind::GroundTruth => {
            let dir = source.masks.as_ref().ok_or_else(|| {
                JokrError::InvalidConfig(format!("video {domain}: ground-truth masks requested but no mask path given"))
            })?;
            let files = image_files(dir)?;
            if files.len() != frames.len() {
                return Err(JokrError::ShapeMismatch(format!(
                    "video {domain}: {} frames but {} mask files",
                    frames.len(),
                    files.len()
                )));
            }
            files
                .iter()
                .map(|p| {
                    let gray = image::open(p)?.to_luma8();
                    Ok(resize_mask(&SilhouetteMask::from_gray(&gray, MaskSource::GroundTruth), res))
                })
                .collect::<Result<Vec<_>>>()?
        }
        MaskProviderKind::Threshold => {
            if !(config.threshold > 0.0 && config.threshold < 1.0) {
                return Err(JokrError::InvalidConfig(format!(
                    "threshold must lie in (0, 1), got {}",
                    config.threshold
                )));
            }
            frames
                .iter()
                .map(|f| {
                    let bg = config.background.unwrap_or_else(|| modal_border_color(f));
                    mask_from_threshold(f, config.threshold, bg)
                })
                .collect()
        }
        MaskProviderKind::External => {
            let provider = provider.ok_or_else(|| {
                JokrError::InvalidConfig("external mask provider requested but none registered".into())
            })?;
            frames
                .iter()
                .map(|f| mask_from_external(f, provider))
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok((frames, masks))
}

/// Loads both videos with the default GIF decoder and no external provider.
pub fn load_pair(a: &VideoSource, b: &VideoSource, config: &IngestConfig) -> Result<VideoPairDataset> {
    load_pair_with(a, b, config, &GifDecoder, None)
}

pub fn load_pair_with(
    a: &VideoSource,
    b: &VideoSource,
    config: &IngestConfig,
    decoder: &dyn VideoDecoder,
    provider: Option<&dyn MaskProvider>,
) -> Result<VideoPairDataset> {
    let (frames_a, masks_a) = load_video(a, Domain::A, config, decoder, provider)?;
    let (frames_b, masks_b) = load_video(b, Domain::B, config, decoder, provider)?;
    VideoPairDataset::new(frames_a, masks_a, frames_b, masks_b)
}

/// One training sample: a frame index and its temporal successor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchElement {
    pub video: Domain,
    pub index: usize,
    pub successor: usize,
}

/// Indices drawn for one iteration, `batch_size` per video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub a: Vec<BatchElement>,
    pub b: Vec<BatchElement>,
}

impl Batch {
    pub fn elements(&self, domain: Domain) -> &[BatchElement] {
        match domain {
            Domain::A => &self.a,
            Domain::B => &self.b,
        }
    }
}

fn draw_elements<R: Rng>(rng: &mut R, video: Domain, len: usize, batch_size: usize) -> Vec<BatchElement> {
    (0..batch_size)
        .map(|_| {
            let index = rng.random_range(0..len - 1);
            BatchElement {
                video,
                index,
                successor: index + 1,
            }
        })
        .collect()
}

/// Uniformly samples base frames (never the last one) from each video.
pub fn sample_batch(dataset: &VideoPairDataset, batch_size: usize, rng_seed: u64) -> Result<Batch> {
    if batch_size == 0 {
        return Err(JokrError::InvalidConfig("batch_size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let a = draw_elements(&mut rng, Domain::A, dataset.len(Domain::A), batch_size);
    let b = draw_elements(&mut rng, Domain::B, dataset.len(Domain::B), batch_size);
    Ok(Batch { a, b })
}

/// Whole-video tensors kept resident so batches are cheap index selections.
#[derive(Debug, Clone)]
pub struct DatasetTensors {
    pub frames_a: Tensor,
    pub masks_a: Tensor,
    pub frames_b: Tensor,
    pub masks_b: Tensor,
}

/// Tensors for one video's half of a batch.
#[derive(Debug, Clone)]
pub struct DomainTensors {
    pub frames: Tensor,
    pub masks: Tensor,
    pub successors: Tensor,
    pub successor_masks: Tensor,
}

impl DatasetTensors {
    pub fn new(dataset: &VideoPairDataset, dtype: DType, device: &Device) -> Result<Self> {
        let (frames_a, masks_a) = dataset.tensors(Domain::A, dtype, device)?;
        let (frames_b, masks_b) = dataset.tensors(Domain::B, dtype, device)?;
        Ok(Self {
            frames_a,
            masks_a,
            frames_b,
            masks_b,
        })
    }

    pub fn video(&self, domain: Domain) -> (&Tensor, &Tensor) {
        match domain {
            Domain::A => (&self.frames_a, &self.masks_a),
            Domain::B => (&self.frames_b, &self.masks_b),
        }
    }

    pub fn gather(&self, batch: &Batch, domain: Domain) -> Result<DomainTensors> {
        let (frames, masks) = self.video(domain);
        let elems = batch.elements(domain);
        let base: Vec<u32> = elems.iter().map(|e| e.index as u32).collect();
        let succ: Vec<u32> = elems.iter().map(|e| e.successor as u32).collect();
        let base = Tensor::new(base.as_slice(), frames.device())?;
        let succ = Tensor::new(succ.as_slice(), frames.device())?;
        Ok(DomainTensors {
            frames: frames.index_select(&base, 0)?,
            masks: masks.index_select(&base, 0)?,
            successors: frames.index_select(&succ, 0)?,
            successor_masks: masks.index_select(&succ, 0)?,
        })
    }
}
