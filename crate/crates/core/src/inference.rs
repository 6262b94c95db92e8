//! Retargeting, synchronization and keypoint editing with trained networks.

use std::ops::Range;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{JokrError, Result};
use crate::keypoints::KeypointSet;
use crate::media_io::{Domain, Frame};
use crate::models::JokrModels;

/// Frames pushed through the networks at once.
pub const CHUNK: usize = 8;

fn chunked<F>(n: usize, mut f: F) -> Result<()>
where
    F: FnMut(usize, usize) -> Result<()>,
{
    for start in (0..n).step_by(CHUNK) {
        f(start, CHUNK.min(n - start))?;
    }
    Ok(())
}

/// `E(frames)` as `(N, K, 2)`.
pub fn extract_keypoints(models: &JokrModels, frames: &Tensor) -> Result<Tensor> {
    let n = frames.dim(0)?;
    let mut parts = Vec::new();
    chunked(n, |s, len| {
        parts.push(models.extractor.extract(&frames.narrow(0, s, len)?)?.keypoints);
        Ok(())
    })?;
    if parts.is_empty() {
        let k = models.config.num_keypoints;
        return Ok(Tensor::zeros((0, k, 2), models.dtype(), models.device())?);
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// `R(G(project(kp)))` composited on black with the generated silhouette.
/// Returns `(silhouettes, frames)`.
pub fn render_keypoints(models: &JokrModels, kp: &Tensor, domain: Domain) -> Result<(Tensor, Tensor)> {
    let (sil, rgb) = models.render(kp, domain)?;
    let composited = rgb.broadcast_mul(&sil)?;
    Ok((sil, composited))
}

/// Own-domain reconstruction of a frame batch, `(silhouettes, frames)`.
pub fn reconstruct_batch(models: &JokrModels, frames: &Tensor, domain: Domain) -> Result<(Tensor, Tensor)> {
    let n = frames.dim(0)?;
    let (mut sils, mut outs) = (Vec::new(), Vec::new());
    chunked(n, |s, len| {
        let kp = models.extractor.extract(&frames.narrow(0, s, len)?)?.keypoints;
        let (sil, out) = render_keypoints(models, &kp, domain)?;
        sils.push(sil);
        outs.push(out);
        Ok(())
    })?;
    Ok((Tensor::cat(&sils, 0)?, Tensor::cat(&outs, 0)?))
}

fn frames_tensor(models: &JokrModels, frames: &[Frame]) -> Result<Tensor> {
    let (h, w) = models.config.image_resolution();
    let ts = frames
        .iter()
        .map(|f| {
            if (f.height(), f.width()) != (h, w) {
                return Err(JokrError::ShapeMismatch(format!(
                    "frame {} is {}x{}, model expects {h}x{w}",
                    f.index,
                    f.height(),
                    f.width()
                )));
            }
            f.to_tensor(models.dtype(), models.device())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&ts, 0)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetargetRequest {
    /// Domain of the input frames; output is rendered in the other one.
    pub source_domain: Domain,
    pub apply_learned_affine: bool,
    /// Subrange of the source frames; all of them when absent.
    #[serde(default)]
    pub frame_range: Option<Range<usize>>,
}

#[derive(Debug, Clone)]
pub struct RetargetOutput {
    pub frames: Vec<Frame>,
    /// Keypoints actually rendered, after the optional affine map.
    pub keypoints: Vec<KeypointSet>,
}

/// Renders `source` motion in the other domain.
///
/// B to A applies `T_A`, A to B applies its inverse; without the affine flag
/// the extracted keypoints are rendered unchanged.
pub fn retarget(models: &JokrModels, source: &[Frame], req: &RetargetRequest) -> Result<RetargetOutput> {
    let range = req.frame_range.clone().unwrap_or(0..source.len());
    if range.start > range.end || range.end > source.len() {
        return Err(JokrError::LengthMismatch(format!(
            "frame range {range:?} outside {} source frames",
            source.len()
        )));
    }
    let selected = &source[range];
    if selected.is_empty() {
        return Ok(RetargetOutput {
            frames: Vec::new(),
            keypoints: Vec::new(),
        });
    }
    let target = req.source_domain.other();
    let transform = if req.apply_learned_affine {
        let t = models.learned_affine.params()?;
        Some(match req.source_domain {
            Domain::B => t,
            Domain::A => t.inverse()?,
        })
    } else {
        None
    };
    let input = frames_tensor(models, selected)?;
    let mut frames = Vec::with_capacity(selected.len());
    let mut keypoints = Vec::with_capacity(selected.len());
    chunked(selected.len(), |s, len| {
        let mut kp = models.extractor.extract(&input.narrow(0, s, len)?)?.keypoints;
        if let Some(t) = transform {
            kp = crate::keypoints::apply_affine(&kp, &t.to_tensor(kp.dtype(), kp.device())?)?;
        }
        let (_, out) = render_keypoints(models, &kp, target)?;
        for (i, set) in KeypointSet::from_batch(&kp)?.into_iter().enumerate() {
            frames.push(Frame::from_tensor(&out.get(i)?, selected[s + i].index, target)?);
            keypoints.push(set);
        }
        Ok(())
    })?;
    Ok(RetargetOutput { frames, keypoints })
}

/// Retargeting applied to short clips: the other video's appearance follows
/// the clip's motion frame by frame.
pub fn synchronize(models: &JokrModels, clip: &[Frame], req: &RetargetRequest) -> Result<RetargetOutput> {
    retarget(models, clip, req)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointOverride {
    pub index: usize,
    pub u: f64,
    pub v: f64,
}

impl std::str::FromStr for KeypointOverride {
    type Err = JokrError;

    /// Parses `index:u,v`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || JokrError::InvalidConfig(format!("override {s:?} is not of the form index:u,v"));
        let (idx, coords) = s.split_once(':').ok_or_else(bad)?;
        let (u, v) = coords.split_once(',').ok_or_else(bad)?;
        Ok(Self {
            index: idx.trim().parse().map_err(|_| bad())?,
            u: u.trim().parse().map_err(|_| bad())?,
            v: v.trim().parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct EditRequest {
    pub frame: Frame,
    pub domain: Domain,
    pub overrides: Vec<KeypointOverride>,
}

pub fn validate_overrides(overrides: &[KeypointOverride], k: usize) -> Result<()> {
    for o in overrides {
        if o.index >= k {
            return Err(JokrError::IndexOutOfRange { index: o.index, k });
        }
        for c in [o.u, o.v] {
            if !(-1.0..=1.0).contains(&c) {
                return Err(JokrError::CoordinateOutOfRange(c));
            }
        }
    }
    Ok(())
}

/// Extracts the frame's keypoints, replaces the overridden ones and renders
/// through the frame's own domain. Returns the frame and the keypoints used.
pub fn edit_frame(models: &JokrModels, req: &EditRequest) -> Result<(Frame, KeypointSet)> {
    validate_overrides(&req.overrides, models.config.num_keypoints)?;
    let input = frames_tensor(models, std::slice::from_ref(&req.frame))?;
    let kp = models.extractor.extract(&input)?.keypoints;
    let mut set = KeypointSet::from_batch(&kp)?.remove(0);
    for o in &req.overrides {
        set.points[o.index] = [o.u, o.v];
    }
    let kp = set.to_tensor(models.dtype(), models.device())?;
    let (_, out) = render_keypoints(models, &kp, req.domain)?;
    Ok((Frame::from_tensor(&out.get(0)?, req.frame.index, req.domain)?, set))
}

/// `R(G(project(E(frame))))` in the frame's own domain.
pub fn reconstruct_frame(models: &JokrModels, frame: &Frame, domain: Domain) -> Result<(Frame, KeypointSet)> {
    edit_frame(
        models,
        &EditRequest {
            frame: frame.clone(),
            domain,
            overrides: Vec::new(),
        },
    )
}

/// Writes `frame_00000.png`, ... into `dir`, plus `frame_00000.json` keypoint
/// files when `keypoints` is given.
pub fn write_png_sequence(dir: &Path, frames: &[Frame], keypoints: Option<&[KeypointSet]>) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    if let Some(kps) = keypoints {
        if kps.len() != frames.len() {
            return Err(JokrError::LengthMismatch(format!("{} keypoint sets for {} frames", kps.len(), frames.len())));
        }
    }
    let mut paths = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let path = dir.join(format!("frame_{i:05}.png"));
        std::fs::write(&path, encode_png(f)?)?;
        if let Some(kps) = keypoints {
            std::fs::write(dir.join(format!("frame_{i:05}.json")), kps[i].to_json()?)?;
        }
        paths.push(path);
    }
    Ok(paths)
}

/// PNG bytes of a frame.
pub fn encode_png(frame: &Frame) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    frame.to_rgb().write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}
