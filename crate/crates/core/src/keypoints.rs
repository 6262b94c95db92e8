//! Keypoint representation math.
//!
//! Coordinates are center-normalized: `u` runs left to right and `v` top to
//! bottom, both in `[-1, 1]`, with the origin at the image center. Pixel `i`
//! of an axis with `n` pixels has its center at `(2i + 1) / n - 1`.
//!
//! Batched tensors use the layouts
//! * heatmaps / confidence maps: `(N, K, H', W')`
//! * keypoints: `(N, K, 2)` holding `[u, v]`
//! * affine matrices: `(2, 3)` shared, or `(N, 2, 3)` per element.

use candle_core::{DType, Device, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{JokrError, Result};

/// Tolerance on heatmap channel sums accepted by [`expect_keypoints`].
pub const NORMALIZATION_TOLERANCE: f64 = 1e-3;

/// Normalized coordinate of pixel center `i` on an axis with `n` pixels.
pub fn pixel_center(i: usize, n: usize) -> f64 {
    (2 * i + 1) as f64 / n as f64 - 1.0
}

/// Inverse of [`pixel_center`]: continuous pixel index of a normalized coordinate.
pub fn to_pixel(coord: f64, n: usize) -> f64 {
    (coord + 1.0) * n as f64 / 2.0 - 0.5
}

fn grid_tensor(n: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let g: Vec<f64> = (0..n).map(|i| pixel_center(i, n)).collect();
    Ok(Tensor::from_vec(g, n, device)?.to_dtype(dtype)?)
}

/// Keypoints of a single frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    #[serde(rename = "K")]
    pub k: usize,
    pub points: Vec<[f64; 2]>,
    #[serde(default = "default_convention")]
    pub convention: String,
}

fn default_convention() -> String {
    KeypointSet::CONVENTION.to_string()
}

impl KeypointSet {
    pub const CONVENTION: &'static str = "center_normalized";

    pub fn new(points: Vec<[f64; 2]>) -> Self {
        Self {
            k: points.len(),
            points,
            convention: default_convention(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks the interchange invariants: `K` matches the point count, the
    /// convention is the one this crate uses, and all coordinates are finite.
    pub fn validate(&self) -> Result<()> {
        if self.k != self.points.len() {
            return Err(JokrError::ShapeMismatch(format!(
                "K = {} but {} points given",
                self.k,
                self.points.len()
            )));
        }
        if self.convention != Self::CONVENTION {
            return Err(JokrError::InvalidConfig(format!(
                "unsupported keypoint convention {:?}",
                self.convention
            )));
        }
        if let Some(c) = self.points.iter().flatten().find(|c| !c.is_finite()) {
            return Err(JokrError::CoordinateOutOfRange(*c));
        }
        Ok(())
    }

    /// `(1, K, 2)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let flat: Vec<f64> = self.points.iter().flatten().copied().collect();
        Ok(Tensor::from_vec(flat, (1, self.k, 2), device)?.to_dtype(dtype)?)
    }

    /// Splits a `(N, K, 2)` tensor into per-frame sets.
    pub fn from_batch(kp: &Tensor) -> Result<Vec<Self>> {
        let (_, k, two) = kp.dims3()?;
        if two != 2 {
            return Err(JokrError::ShapeMismatch(format!(
                "keypoint tensor has trailing dim {two}, expected 2"
            )));
        }
        let rows: Vec<Vec<Vec<f64>>> = kp.to_dtype(DType::F64)?.to_vec3()?;
        Ok(rows
            .into_iter()
            .map(|frame| {
                debug_assert_eq!(frame.len(), k);
                Self::new(frame.into_iter().map(|p| [p[0], p[1]]).collect())
            })
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let set: Self = serde_json::from_str(s)?;
        set.validate()?;
        Ok(set)
    }
}

/// Stack of per-keypoint spatial distributions, `(N, K, H', W')`.
#[derive(Debug, Clone)]
pub struct HeatmapStack(Tensor);

impl HeatmapStack {
    /// Wraps a tensor after checking that entries are nonnegative and every
    /// channel sums to one within [`NORMALIZATION_TOLERANCE`].
    pub fn new(maps: Tensor) -> Result<Self> {
        let (n, k, _, _) = maps.dims4()?;
        let sums: Vec<f64> = maps
            .to_dtype(DType::F64)?
            .sum((2, 3))?
            .flatten_all()?
            .to_vec1()?;
        for (i, s) in sums.iter().enumerate() {
            if !((s - 1.0).abs() <= NORMALIZATION_TOLERANCE) {
                return Err(JokrError::NotNormalized {
                    channel: i % k,
                    sum: *s,
                });
            }
        }
        let min: f64 = maps.to_dtype(DType::F64)?.flatten_all()?.min(0)?.to_scalar()?;
        if min < 0.0 {
            return Err(JokrError::NotNormalized {
                channel: 0,
                sum: f64::NAN,
            });
        }
        debug_assert_eq!(sums.len(), n * k);
        Ok(Self(maps))
    }

    /// Wraps a tensor that is normalized by construction (spatial softmax output).
    pub(crate) fn from_softmax(maps: Tensor) -> Self {
        Self(maps)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Per-channel softmax over all spatial positions of `(N, K, H', W')` logits.
pub fn spatial_softmax(logits: &Tensor, temperature: f64) -> Result<HeatmapStack> {
    let (n, k, h, w) = logits.dims4()?;
    let flat = (logits.reshape((n, k, h * w))? / temperature)?;
    let probs = candle_nn::ops::softmax(&flat, D::Minus1)?;
    Ok(HeatmapStack::from_softmax(probs.reshape((n, k, h, w))?))
}

/// Expected coordinate of every heatmap channel, `(N, K, 2)`.
pub fn expect_keypoints(heatmaps: &HeatmapStack) -> Result<Tensor> {
    let maps = heatmaps.tensor();
    let (_, _, h, w) = maps.dims4()?;
    let us = grid_tensor(w, maps.dtype(), maps.device())?.reshape((1, 1, 1, w))?;
    let vs = grid_tensor(h, maps.dtype(), maps.device())?.reshape((1, 1, h, 1))?;
    let u = maps.broadcast_mul(&us)?.sum((2, 3))?;
    let v = maps.broadcast_mul(&vs)?.sum((2, 3))?;
    Ok(Tensor::stack(&[u, v], 2)?)
}

/// How the keypoint distance enters the confidence-map exponent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceExponent {
    /// `exp(-|p - k| / sigma^2)`.
    #[default]
    Euclidean,
    /// `exp(-|p - k|^2 / sigma^2)`.
    Squared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfidenceParams {
    pub alpha: f64,
    pub sigma: f64,
    pub exponent: DistanceExponent,
}

impl Default for ConfidenceParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            sigma: 0.1,
            exponent: DistanceExponent::Euclidean,
        }
    }
}

impl ConfidenceParams {
    /// Scalar evaluation of one confidence-map entry for a given distance.
    pub fn value_at_distance(&self, distance: f64) -> f64 {
        let d = match self.exponent {
            DistanceExponent::Euclidean => distance,
            DistanceExponent::Squared => distance * distance,
        };
        (-d / (self.sigma * self.sigma)).exp() / self.alpha
    }
}

// Floor under the squared distance before the square root so the gradient
// stays finite when a keypoint sits exactly on a pixel center.
const SQRT_FLOOR: f64 = 1e-30;

/// Renders `(N, K, 2)` keypoints into `(N, K, H', W')` confidence maps.
pub fn project_keypoints(
    kp: &Tensor,
    resolution: (usize, usize),
    params: &ConfidenceParams,
) -> Result<Tensor> {
    if !(params.sigma > 0.0 && params.alpha > 0.0) {
        return Err(JokrError::InvalidConfig(format!(
            "confidence maps need sigma > 0 and alpha > 0, got {params:?}"
        )));
    }
    let (h, w) = resolution;
    let (n, k, _) = kp.dims3()?;
    let us = grid_tensor(w, kp.dtype(), kp.device())?.reshape((1, 1, 1, w))?;
    let vs = grid_tensor(h, kp.dtype(), kp.device())?.reshape((1, 1, h, 1))?;
    let ku = kp.narrow(2, 0, 1)?.reshape((n, k, 1, 1))?;
    let kv = kp.narrow(2, 1, 1)?.reshape((n, k, 1, 1))?;
    let du = us.broadcast_sub(&ku)?.sqr()?; // (N, K, 1, W)
    let dv = vs.broadcast_sub(&kv)?.sqr()?; // (N, K, H, 1)
    let dist2 = du.broadcast_add(&dv)?;
    let d = match params.exponent {
        DistanceExponent::Euclidean => dist2.maximum(SQRT_FLOOR)?.sqrt()?,
        DistanceExponent::Squared => dist2,
    };
    let scale = -1.0 / (params.sigma * params.sigma);
    Ok((d.affine(scale, 0.0)?.exp()? / params.alpha)?)
}

/// A 2x3 affine map acting on normalized coordinates: `[A | b]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub matrix: [[f64; 3]; 2],
}

impl Default for AffineParams {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineParams {
    pub fn identity() -> Self {
        Self {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            matrix: [[1.0, 0.0, tx], [0.0, 1.0, ty]],
        }
    }

    /// Rotation by `theta` radians, isotropic scale, then translation.
    pub fn similarity(theta: f64, scale: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self {
            matrix: [
                [scale * c, -scale * s, tx],
                [scale * s, scale * c, ty],
            ],
        }
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.len() != 6 {
            return Err(JokrError::ShapeMismatch(format!(
                "affine matrix needs 6 values, got {}",
                v.len()
            )));
        }
        Ok(Self {
            matrix: [[v[0], v[1], v[2]], [v[3], v[4], v[5]]],
        })
    }

    pub fn flat(&self) -> [f64; 6] {
        let m = &self.matrix;
        [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2]]
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.determinant();
        if det.abs() < 1e-12 || !det.is_finite() {
            return Err(JokrError::SingularTransform(det));
        }
        let [[a, b, tx], [c, d, ty]] = self.matrix;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Ok(Self {
            matrix: [
                [ia, ib, -(ia * tx + ib * ty)],
                [ic, id, -(ic * tx + id * ty)],
            ],
        })
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let a = &self.matrix;
        let b = &other.matrix;
        let mut out = [[0.0; 3]; 2];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, cell) in row.iter_mut().enumerate() {
                *cell = a[r][0] * b[0][c] + a[r][1] * b[1][c];
            }
            row[2] += a[r][2];
        }
        Self { matrix: out }
    }

    pub fn apply_point(&self, p: [f64; 2]) -> [f64; 2] {
        let m = &self.matrix;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2],
        ]
    }

    pub fn apply_set(&self, kp: &KeypointSet) -> KeypointSet {
        KeypointSet::new(kp.points.iter().map(|p| self.apply_point(*p)).collect())
    }

    /// `(2, 3)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.flat().to_vec(), (2, 3), device)?.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let v: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        Self::from_flat(&v)
    }

    /// `(N, 2, 3)` tensor of per-element transforms.
    pub fn batch_tensor(ts: &[Self], dtype: DType, device: &Device) -> Result<Tensor> {
        let flat: Vec<f64> = ts.iter().flat_map(|t| t.flat()).collect();
        Ok(Tensor::from_vec(flat, (ts.len(), 2, 3), device)?.to_dtype(dtype)?)
    }
}

/// Maps `(N, K, 2)` keypoints through a `(2, 3)` or `(N, 2, 3)` affine tensor.
pub fn apply_affine(kp: &Tensor, t: &Tensor) -> Result<Tensor> {
    let (n, _, _) = kp.dims3()?;
    let t = match t.rank() {
        2 => t.unsqueeze(0)?.broadcast_as((n, 2, 3))?.contiguous()?,
        3 => t.clone(),
        r => {
            return Err(JokrError::ShapeMismatch(format!(
                "affine tensor has rank {r}, expected 2 or 3"
            )))
        }
    };
    let linear_t = t.narrow(2, 0, 2)?.transpose(1, 2)?.contiguous()?; // (N, 2, 2)
    let offset = t.narrow(2, 2, 1)?.transpose(1, 2)?; // (N, 1, 2)
    Ok(kp.contiguous()?.matmul(&linear_t)?.broadcast_add(&offset)?)
}

/// Sampling ranges for random keypoint-level and equivariance augmentations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentRanges {
    /// Rotation interval in degrees.
    pub rotation_deg: [f64; 2],
    /// Isotropic scale interval.
    pub scale: [f64; 2],
    /// Translation interval (normalized units), sampled per axis.
    pub translation: [f64; 2],
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            rotation_deg: [-15.0, 15.0],
            scale: [0.9, 1.1],
            translation: [-0.1, 0.1],
        }
    }
}

impl AugmentRanges {
    pub fn identity() -> Self {
        Self {
            rotation_deg: [0.0, 0.0],
            scale: [1.0, 1.0],
            translation: [0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |r: &[f64; 2]| r[0] <= r[1] && r.iter().all(|x| x.is_finite());
        if !(ok(&self.rotation_deg) && ok(&self.scale) && ok(&self.translation)) {
            return Err(JokrError::InvalidConfig(format!(
                "augmentation ranges must satisfy min <= max: {self:?}"
            )));
        }
        if self.scale[0] <= 0.0 {
            return Err(JokrError::InvalidConfig(
                "augmentation scale must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> AffineParams {
        let draw = |rng: &mut R, r: [f64; 2]| {
            if r[0] == r[1] {
                r[0]
            } else {
                rng.random_range(r[0]..r[1])
            }
        };
        let theta = draw(rng, self.rotation_deg).to_radians();
        let scale = draw(rng, self.scale);
        let tx = draw(rng, self.translation);
        let ty = draw(rng, self.translation);
        AffineParams::similarity(theta, scale, tx, ty)
    }
}

/// Draws one transform from `ranges` with a dedicated seeded generator.
pub fn sample_random_affine(ranges: &AugmentRanges, rng_seed: u64) -> Result<AffineParams> {
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok(ranges.sample(&mut rng))
}
