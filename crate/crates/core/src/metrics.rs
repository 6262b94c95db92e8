//! Evaluation: temporal keypoint displacement, reconstruction quality, a
//! Fréchet distance over pluggable features, and toy-experiment diagnostics.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{JokrError, Result};
use crate::keypoints::{to_pixel, KeypointSet};
use crate::losses::PerceptualExtractor;
use crate::media_io::{DatasetTensors, Domain};
use crate::models::JokrModels;

/// Diagonal added to covariances before the matrix square root.
pub const FRECHET_EPS: f64 = 1e-6;

/// How adjacent-frame keypoint distances are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DisplacementNormalization {
    /// Raw distance in normalized `[-1, 1]` coordinates.
    None,
    /// Divided by the frame diagonal, `2√2` in normalized coordinates.
    #[default]
    Diagonal,
}

impl DisplacementNormalization {
    fn scale(self) -> f64 {
        match self {
            DisplacementNormalization::None => 1.0,
            DisplacementNormalization::Diagonal => 1.0 / (2.0 * std::f64::consts::SQRT_2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplacementReport {
    pub mean_adjacent_displacement: f64,
    /// Mean over keypoints for each adjacent pair `(t, t + 1)`.
    pub per_frame: Vec<f64>,
}

/// Mean Euclidean distance between corresponding keypoints of adjacent frames.
pub fn temporal_displacement(seq: &[KeypointSet], norm: DisplacementNormalization) -> Result<DisplacementReport> {
    if seq.len() < 2 {
        return Err(JokrError::LengthMismatch(format!(
            "need at least two keypoint sets, got {}",
            seq.len()
        )));
    }
    let k = seq[0].len();
    if k == 0 || seq.iter().any(|s| s.len() != k) {
        return Err(JokrError::LengthMismatch("keypoint count varies along the sequence".into()));
    }
    let scale = norm.scale();
    let per_frame: Vec<f64> = seq
        .windows(2)
        .map(|w| {
            w[0].points
                .iter()
                .zip(&w[1].points)
                .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
                .sum::<f64>()
                * scale
                / k as f64
        })
        .collect();
    let mean = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    Ok(DisplacementReport {
        mean_adjacent_displacement: mean,
        per_frame,
    })
}

/// Intersection over union of `pred > 0.5` and `truth > 0.5`. Two empty
/// masks count as a perfect match.
pub fn iou(pred: &[f32], truth: &[f32]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(JokrError::LengthMismatch(format!("{} vs {} mask values", pred.len(), truth.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        let (p, t) = (*p > 0.5, *t > 0.5);
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Per-video reconstruction quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionMetrics {
    pub mean_l1: f64,
    pub mean_mse: f64,
    pub mean_iou: f64,
}

/// Scores predictions against targets frame by frame and averages.
///
/// Frames are `(N, 3, H, W)` and masks `(N, 1, H, W)`.
pub fn score_reconstruction(
    pred_frames: &Tensor,
    true_frames: &Tensor,
    pred_masks: &Tensor,
    true_masks: &Tensor,
) -> Result<ReconstructionMetrics> {
    if pred_frames.dims() != true_frames.dims() || pred_masks.dims() != true_masks.dims() {
        return Err(JokrError::ShapeMismatch("prediction and target shapes differ".into()));
    }
    let n = pred_frames.dim(0)?;
    if n == 0 || pred_masks.dim(0)? != n {
        return Err(JokrError::LengthMismatch("need matching, non-empty frame and mask batches".into()));
    }
    let rows = |t: &Tensor| -> Result<Vec<Vec<f32>>> { Ok(t.to_dtype(DType::F32)?.flatten_from(1)?.to_vec2()?) };
    let (pf, tf, pm, tm) = (rows(pred_frames)?, rows(true_frames)?, rows(pred_masks)?, rows(true_masks)?);
    let (mut l1, mut mse, mut iou_sum) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let m = pf[i].len() as f64;
        l1 += pf[i].iter().zip(&tf[i]).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / m;
        mse += pf[i].iter().zip(&tf[i]).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / m;
        iou_sum += iou(&pm[i], &tm[i])?;
    }
    let n = n as f64;
    Ok(ReconstructionMetrics {
        mean_l1: l1 / n,
        mean_mse: mse / n,
        mean_iou: iou_sum / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub mean_l1: f64,
    pub mean_mse: f64,
    pub mean_iou: f64,
    pub per_video: BTreeMap<String, ReconstructionMetrics>,
}

/// Runs every frame through `R(G(project(E(frame))))` in its own domain and
/// scores frames and silhouettes against the dataset.
pub fn reconstruction_report(models: &JokrModels, data: &DatasetTensors) -> Result<ReconstructionReport> {
    let mut per_video = BTreeMap::new();
    for domain in [Domain::A, Domain::B] {
        let (frames, masks) = data.video(domain);
        let (sil, rec) = crate::inference::reconstruct_batch(models, frames, domain)?;
        per_video.insert(domain.to_string(), score_reconstruction(&rec, frames, &sil, masks)?);
    }
    let avg = |f: fn(&ReconstructionMetrics) -> f64| per_video.values().map(f).sum::<f64>() / per_video.len() as f64;
    Ok(ReconstructionReport {
        mean_l1: avg(|m| m.mean_l1),
        mean_mse: avg(|m| m.mean_mse),
        mean_iou: avg(|m| m.mean_iou),
        per_video,
    })
}

/// Fréchet distance between Gaussian fits of two sample sets (rows are samples).
pub fn frechet_distance(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    if x.len() < 2 || y.len() < 2 {
        return Err(JokrError::LengthMismatch("need at least two samples per side".into()));
    }
    let d = x[0].len();
    if d == 0 || x.iter().chain(y).any(|r| r.len() != d) {
        return Err(JokrError::LengthMismatch("feature dimension varies".into()));
    }
    let (mu1, s1) = gaussian_fit(x, d);
    let (mu2, s2) = gaussian_fit(y, d);
    let eps = DMatrix::<f64>::identity(d, d) * FRECHET_EPS;
    let s1 = s1 + &eps;
    let s2 = s2 + &eps;
    // Tr((S1 S2)^{1/2}) = Tr((A S2 A)^{1/2}) with A = S1^{1/2}, which keeps
    // everything symmetric.
    let a = sqrtm_psd(&s1);
    let inner = &a * &s2 * &a;
    let tr_cross: f64 = SymmetricEigen::new((&inner + inner.transpose()) * 0.5)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let diff = mu1 - mu2;
    Ok((diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * tr_cross).max(0.0))
}

fn gaussian_fit(rows: &[Vec<f64>], d: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.len();
    let m = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mu = DVector::from_fn(d, |j, _| m.column(j).mean());
    let mut centered = m;
    for j in 0..d {
        let mj = mu[j];
        centered.column_mut(j).add_scalar_mut(-mj);
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mu, cov)
}

fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// Features per sample: every layer flattened and concatenated.
pub fn sample_features(frames: &Tensor, extractor: &dyn PerceptualExtractor) -> Result<Vec<Vec<f64>>> {
    let layers = extractor.features(frames)?;
    let flat = layers
        .iter()
        .map(|l| l.flatten_from(1))
        .collect::<candle_core::Result<Vec<_>>>()?;
    Ok(Tensor::cat(&flat, 1)?.to_dtype(DType::F64)?.to_vec2()?)
}

/// Fréchet distance between feature statistics of two frame sets.
pub fn distribution_distance(real: &Tensor, generated: &Tensor, extractor: &dyn PerceptualExtractor) -> Result<f64> {
    frechet_distance(&sample_features(real, extractor)?, &sample_features(generated, extractor)?)
}

/// Fraction of `(frame, keypoint)` pairs landing on a mask pixel after the
/// mask is dilated by `radius` pixels (square structuring element).
pub fn keypoints_inside_fraction(keypoints: &[KeypointSet], masks: &Tensor, radius: usize) -> Result<f64> {
    let (n, _, h, w) = masks.dims4()?;
    if n != keypoints.len() {
        return Err(JokrError::LengthMismatch(format!("{} keypoint sets for {n} masks", keypoints.len())));
    }
    let values: Vec<Vec<f32>> = masks.to_dtype(DType::F32)?.flatten_from(1)?.to_vec2()?;
    let (mut inside, mut total) = (0usize, 0usize);
    for (set, mask) in keypoints.iter().zip(&values) {
        for p in &set.points {
            total += 1;
            let x = to_pixel(p[0], w).round() as i64;
            let y = to_pixel(p[1], h).round() as i64;
            let r = radius as i64;
            let hit = (y - r..=y + r).any(|yy| {
                (x - r..=x + r).any(|xx| {
                    yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && mask[yy as usize * w + xx as usize] > 0.5
                })
            });
            inside += hit as usize;
        }
    }
    Ok(inside as f64 / total.max(1) as f64)
}

/// Accuracy of the discriminator at telling `T_A(E(b))` (label 1) from
/// `E(a)` (label 0), thresholding probabilities at 0.5.
pub fn discriminator_accuracy(models: &JokrModels, kp_a: &Tensor, kp_b: &Tensor) -> Result<f64> {
    use crate::models::KeypointCritic;
    let pa: Vec<f64> = models.discriminator.probabilities(kp_a)?.to_dtype(DType::F64)?.to_vec1()?;
    let pb: Vec<f64> = models
        .discriminator
        .probabilities(&models.learned_affine.apply(kp_b)?)?
        .to_dtype(DType::F64)?
        .to_vec1()?;
    let correct = pa.iter().filter(|p| **p < 0.5).count() + pb.iter().filter(|p| **p >= 0.5).count();
    Ok(correct as f64 / (pa.len() + pb.len()) as f64)
}

/// Pixels average-pooled onto a `cells x cells` grid. Keeps Fréchet fits
/// well conditioned when only a few dozen frames are available.
#[derive(Debug, Clone, Copy)]
pub struct PooledFeatures {
    pub cells: usize,
}

impl Default for PooledFeatures {
    fn default() -> Self {
        Self { cells: 4 }
    }
}

impl PerceptualExtractor for PooledFeatures {
    fn features(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let (_, _, h, w) = images.dims4()?;
        if self.cells == 0 || h % self.cells != 0 || w % self.cells != 0 {
            return Err(JokrError::ShapeMismatch(format!("{h}x{w} does not split into {} cells", self.cells)));
        }
        Ok(vec![images.avg_pool2d((h / self.cells, w / self.cells))?])
    }
}

/// Everything `jokr eval` reports for a checkpoint on its training videos.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_id: String,
    pub reconstruction: ReconstructionReport,
    /// Per video, with the configured normalization.
    pub displacement: BTreeMap<String, DisplacementReport>,
    pub displacement_normalization: DisplacementNormalization,
    /// Per video, dilation radius `inside_radius` pixels.
    pub keypoints_inside: BTreeMap<String, f64>,
    pub inside_radius: usize,
    pub discriminator_accuracy: f64,
    /// Per video, Fréchet distance of pooled pixels between real frames and
    /// their reconstructions.
    pub distribution_distance: BTreeMap<String, f64>,
}

pub fn evaluate(
    models: &JokrModels,
    data: &DatasetTensors,
    checkpoint_id: &str,
    norm: DisplacementNormalization,
    inside_radius: usize,
) -> Result<EvalReport> {
    let reconstruction = reconstruction_report(models, data)?;
    let (mut displacement, mut inside, mut distance) = (BTreeMap::new(), BTreeMap::new(), BTreeMap::new());
    let mut kps = Vec::new();
    for domain in [Domain::A, Domain::B] {
        let (frames, masks) = data.video(domain);
        let kp = crate::inference::extract_keypoints(models, frames)?;
        let sets = KeypointSet::from_batch(&kp)?;
        displacement.insert(domain.to_string(), temporal_displacement(&sets, norm)?);
        inside.insert(domain.to_string(), keypoints_inside_fraction(&sets, masks, inside_radius)?);
        let (_, rec) = crate::inference::reconstruct_batch(models, frames, domain)?;
        distance.insert(
            domain.to_string(),
            distribution_distance(frames, &rec, &PooledFeatures::default())?,
        );
        kps.push(kp);
    }
    Ok(EvalReport {
        checkpoint_id: checkpoint_id.to_string(),
        reconstruction,
        displacement,
        displacement_normalization: norm,
        keypoints_inside: inside,
        inside_radius,
        discriminator_accuracy: discriminator_accuracy(models, &kps[0], &kps[1])?,
        distribution_distance: distance,
    })
}
