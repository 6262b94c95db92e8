//! Objective terms and the two stage objectives.
//!
//! Every term is a batch mean, so the weights keep their meaning for any
//! batch size or video length.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{JokrError, Result};
use crate::keypoints::{apply_affine, AffineParams};
use crate::media_io::{Domain, DomainTensors};
use crate::models::{Extractor, JokrModels, KeypointCritic};
use crate::warp::warp_images;

/// Floor inside the silhouette log.
pub const SILHOUETTE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_seg: f64,
    pub lambda_dc: f64,
    pub lambda_tmp: f64,
    pub lambda_eq: f64,
    pub lambda_sep: f64,
    pub lambda_sill: f64,
    pub delta: f64,
    pub lambda_lpips: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_seg: 50.0,
            lambda_dc: 0.5,
            lambda_tmp: 1.0,
            lambda_eq: 1.0,
            lambda_sep: 1.0,
            lambda_sill: 0.5,
            delta: 0.1,
            lambda_lpips: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_seg,
            self.lambda_dc,
            self.lambda_tmp,
            self.lambda_eq,
            self.lambda_sep,
            self.lambda_sill,
            self.delta,
            self.lambda_lpips,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(JokrError::InvalidConfig(format!("loss weights must be nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// Label convention for the confusion term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConfusionMode {
    /// Both videos pushed toward label 1.
    #[default]
    BothToOne,
    /// Each video pushed toward the other's discriminator label.
    Swapped,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(JokrError::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Mean squared error over all elements.
pub fn loss_seg(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(pred, target, "loss_seg")?;
    Ok((pred - target)?.sqr()?.mean_all()?)
}

/// Mean absolute error over all elements.
pub fn loss_l1(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(pred, target, "loss_l1")?;
    Ok((pred - target)?.abs()?.mean_all()?)
}

/// Frozen feature map `F` used by the perceptual term. Each returned tensor
/// is one feature layer for the whole batch.
pub trait PerceptualExtractor: Send + Sync {
    fn features(&self, images: &Tensor) -> Result<Vec<Tensor>>;
}

/// `F(x) = x`.
#[derive(Debug, Default, Clone, Copy)]
pub struct IdentityFeatures;

impl PerceptualExtractor for IdentityFeatures {
    fn features(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![images.clone()])
    }
}

/// `F(x) = W · flatten(x)` for a fixed `(M, D)` matrix.
#[derive(Debug, Clone)]
pub struct LinearFeatures {
    pub weight: Tensor,
}

impl PerceptualExtractor for LinearFeatures {
    fn features(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let n = images.dim(0)?;
        let flat = images.reshape((n, ()))?;
        Ok(vec![flat.matmul(&self.weight.t()?)?])
    }
}

/// Parameter-free multi-scale features: intensities and finite-difference
/// gradients at full, half and quarter resolution.
#[derive(Debug, Default, Clone, Copy)]
pub struct PyramidFeatures;

impl PerceptualExtractor for PyramidFeatures {
    fn features(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::new();
        let mut level = images.clone();
        for scale in 0..3 {
            if scale > 0 {
                let (_, _, h, w) = level.dims4()?;
                if h < 4 || w < 4 {
                    break;
                }
                level = level.avg_pool2d(2)?;
            }
            let (_, _, h, w) = level.dims4()?;
            let dx = (level.narrow(3, 1, w - 1)? - level.narrow(3, 0, w - 1)?)?;
            let dy = (level.narrow(2, 1, h - 1)? - level.narrow(2, 0, h - 1)?)?;
            out.push(level.clone());
            out.push(dx);
            out.push(dy);
        }
        Ok(out)
    }
}

/// Sum over feature layers of the mean squared feature difference.
pub fn loss_lpips(pred: &Tensor, target: &Tensor, extractor: &dyn PerceptualExtractor) -> Result<Tensor> {
    same_shape(pred, target, "loss_lpips")?;
    let fp = extractor.features(pred)?;
    let ft = extractor.features(&target.detach())?;
    let mut total: Option<Tensor> = None;
    for (a, b) in fp.iter().zip(ft.iter()) {
        let term = (a - b)?.sqr()?.mean_all()?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    total.ok_or_else(|| JokrError::ShapeMismatch("extractor returned no features".into()))
}

/// Mean binary cross entropy of `sigmoid(logits)` against a constant label.
pub fn bce_with_logits(logits: &Tensor, label: f64) -> Result<Tensor> {
    // max(z, 0) - z q + log(1 + exp(-|z|))
    let pos = logits.relu()?;
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((pos - (logits * label)?)? + softplus)?.mean_all()?)
}

fn bce_pair(critic: &dyn KeypointCritic, kp_a: &Tensor, kp_b: &Tensor, label_a: f64, label_b: f64) -> Result<Tensor> {
    let na = kp_a.dim(0)? as f64;
    let nb = kp_b.dim(0)? as f64;
    let la = bce_with_logits(&critic.logits(kp_a)?, label_a)?;
    let lb = bce_with_logits(&critic.logits(kp_b)?, label_b)?;
    Ok(((la * (na / (na + nb)))? + (lb * (nb / (na + nb)))?)?)
}

/// Confusion term for the extractor side: both videos pushed toward label 1
/// (or the swapped labels). `kp_b` must already be mapped by the learned affine.
pub fn loss_domain_confusion(
    critic: &dyn KeypointCritic,
    kp_a: &Tensor,
    kp_b: &Tensor,
    mode: ConfusionMode,
) -> Result<Tensor> {
    match mode {
        ConfusionMode::BothToOne => bce_pair(critic, kp_a, kp_b, 1.0, 1.0),
        ConfusionMode::Swapped => bce_pair(critic, kp_a, kp_b, 1.0, 0.0),
    }
}

/// Discriminator term: A labeled 0, B labeled 1. Inputs are detached so the
/// gradient reaches the critic only.
pub fn loss_discriminator(critic: &dyn KeypointCritic, kp_a: &Tensor, kp_b: &Tensor) -> Result<Tensor> {
    bce_pair(critic, &kp_a.detach(), &kp_b.detach(), 0.0, 1.0)
}

/// Mean over frames and keypoints of the squared distance between
/// corresponding keypoints.
pub fn loss_temporal(kp_t: &Tensor, kp_t1: &Tensor) -> Result<Tensor> {
    same_shape(kp_t, kp_t1, "loss_temporal")?;
    let (n, k, _) = kp_t.dims3()?;
    Ok(((kp_t - kp_t1)?.sqr()?.sum_all()? / (n * k) as f64)?)
}

/// Anything mapping `(N, 3, H, W)` images to `(N, K, 2)` keypoints.
pub trait KeypointExtractor {
    fn keypoints(&self, images: &Tensor) -> Result<Tensor>;
}

impl KeypointExtractor for Extractor {
    fn keypoints(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.extract(images)?.keypoints)
    }
}

/// Mean absolute difference between `t(E(x))` and `E(warp(x, t))` given
/// both keypoint sets.
pub fn equivariance_from_keypoints(kp: &Tensor, kp_warped: &Tensor, transforms: &[AffineParams]) -> Result<Tensor> {
    same_shape(kp, kp_warped, "loss_equivariance")?;
    let n = kp.dim(0)?;
    let t = if transforms.len() == 1 {
        transforms[0].to_tensor(kp.dtype(), kp.device())?
    } else if transforms.len() == n {
        AffineParams::batch_tensor(transforms, kp.dtype(), kp.device())?
    } else {
        return Err(JokrError::ShapeMismatch(format!(
            "{} transforms for {n} keypoint sets",
            transforms.len()
        )));
    };
    Ok((apply_affine(kp, &t)? - kp_warped)?.abs()?.mean_all()?)
}

/// Equivariance term with one transform per frame (or one shared transform).
pub fn loss_equivariance(
    extractor: &dyn KeypointExtractor,
    frames: &Tensor,
    transforms: &[AffineParams],
) -> Result<Tensor> {
    let warped = warp_images(frames, transforms)?;
    let kp = extractor.keypoints(frames)?;
    let kp_warped = extractor.keypoints(&warped)?;
    equivariance_from_keypoints(&kp, &kp_warped, transforms)
}

/// `(1/K²) Σ_l Σ_{r≠l} max(0, δ - |k_l - k_r|²)`, averaged over frames.
pub fn loss_separation(kp: &Tensor, delta: f64) -> Result<Tensor> {
    let (n, k, _) = kp.dims3()?;
    let diff = kp.unsqueeze(2)?.broadcast_sub(&kp.unsqueeze(1)?)?; // (N, K, K, 2)
    let dist2 = diff.sqr()?.sum(3)?;
    let hinge = dist2.neg()?.affine(1.0, delta)?.relu()?;
    let off_diag: Vec<f64> = (0..k * k).map(|i| if i / k == i % k { 0.0 } else { 1.0 }).collect();
    let mask = Tensor::from_vec(off_diag, (1, k, k), kp.device())?.to_dtype(kp.dtype())?;
    Ok((hinge.broadcast_mul(&mask)?.sum_all()? / (n * k * k) as f64)?)
}

/// Area-averages `(N, 1, H, W)` masks down to the heatmap resolution.
pub fn downsample_mask(mask: &Tensor, (h, w): (usize, usize)) -> Result<Tensor> {
    let (_, _, mh, mw) = mask.dims4()?;
    if mh % h != 0 || mw % w != 0 || mh / h != mw / w {
        return Err(JokrError::ShapeMismatch(format!(
            "cannot pool a {mh}x{mw} mask to {h}x{w}"
        )));
    }
    let f = mh / h;
    if f == 1 {
        return Ok(mask.clone());
    }
    Ok(mask.avg_pool2d(f)?)
}

/// `(1/K) Σ_l -log max(Σ_{u,v} s(u,v) H_l(u,v), ε)`, averaged over frames.
/// `mask` must already be at heatmap resolution, `(N, 1, H', W')`.
pub fn loss_silhouette(heatmaps: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (n, _, h, w) = heatmaps.dims4()?;
    let (mn, mc, mh, mw) = mask.dims4()?;
    if (mn, mc, mh, mw) != (n, 1, h, w) {
        return Err(JokrError::ShapeMismatch(format!(
            "silhouette mask {:?} does not match heatmaps {:?}",
            mask.dims(),
            heatmaps.dims()
        )));
    }
    let mass = heatmaps.broadcast_mul(mask)?.sum((2, 3))?; // (N, K)
    Ok(mass.maximum(SILHOUETTE_EPS)?.log()?.neg()?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Terms<T> {
    pub seg: T,
    pub dc: T,
    pub tmp: T,
    pub eq: T,
    pub sep: T,
    pub sill: T,
}

impl Stage1Terms<f64> {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.lambda_seg * self.seg
            + w.lambda_dc * self.dc
            + w.lambda_tmp * self.tmp
            + w.lambda_eq * self.eq
            + w.lambda_sep * self.sep
            + w.lambda_sill * self.sill
    }

    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("seg", self.seg),
            ("dc", self.dc),
            ("tmp", self.tmp),
            ("eq", self.eq),
            ("sep", self.sep),
            ("sill", self.sill),
        ]
    }
}

impl Stage1Terms<Tensor> {
    pub fn total(&self, w: &LossWeights) -> Result<Tensor> {
        let parts = [
            (&self.seg, w.lambda_seg),
            (&self.dc, w.lambda_dc),
            (&self.tmp, w.lambda_tmp),
            (&self.eq, w.lambda_eq),
            (&self.sep, w.lambda_sep),
            (&self.sill, w.lambda_sill),
        ];
        let mut total = (parts[0].0 * parts[0].1)?;
        for (t, lambda) in &parts[1..] {
            total = (total + (*t * *lambda)?)?;
        }
        Ok(total)
    }

    pub fn values(&self) -> Result<Stage1Terms<f64>> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar()?) };
        Ok(Stage1Terms {
            seg: v(&self.seg)?,
            dc: v(&self.dc)?,
            tmp: v(&self.tmp)?,
            eq: v(&self.eq)?,
            sep: v(&self.sep)?,
            sill: v(&self.sill)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2Terms<T> {
    pub l1: T,
    pub lpips: T,
}

impl Stage2Terms<f64> {
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.l1 + w.lambda_lpips * self.lpips
    }

    pub fn named(&self) -> [(&'static str, f64); 2] {
        [("l1", self.l1), ("lpips", self.lpips)]
    }
}

impl Stage2Terms<Tensor> {
    pub fn total(&self, w: &LossWeights) -> Result<Tensor> {
        Ok((&self.l1 + (&self.lpips * w.lambda_lpips)?)?)
    }

    pub fn values(&self) -> Result<Stage2Terms<f64>> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar()?) };
        Ok(Stage2Terms {
            l1: v(&self.l1)?,
            lpips: v(&self.lpips)?,
        })
    }
}

/// Random quantities drawn for one stage-1 iteration.
#[derive(Debug, Clone)]
pub struct Stage1Randomness {
    /// Image-level transforms for the equivariance term, one per element.
    pub equivariance_a: Vec<AffineParams>,
    pub equivariance_b: Vec<AffineParams>,
    /// Keypoint-level augmentations applied right before the discriminator.
    pub augment_a: Vec<AffineParams>,
    pub augment_b: Vec<AffineParams>,
}

impl Stage1Randomness {
    pub fn identity(batch_size: usize) -> Self {
        let id = vec![AffineParams::identity(); batch_size];
        Self {
            equivariance_a: id.clone(),
            equivariance_b: id.clone(),
            augment_a: id.clone(),
            augment_b: id,
        }
    }
}

/// Everything the stage-1 forward pass produces before any critic is consulted.
#[derive(Debug, Clone)]
pub struct Stage1Forward {
    pub kp_a: Tensor,
    pub kp_b: Tensor,
    pub kp_a_next: Tensor,
    pub kp_b_next: Tensor,
    pub kp_a_warped: Tensor,
    pub kp_b_warped: Tensor,
    pub heatmaps_a: Tensor,
    pub heatmaps_b: Tensor,
    /// `G_A(project(kp_a))`, `G_B(project(kp_b))`.
    pub silhouettes_a: Tensor,
    pub silhouettes_b: Tensor,
    /// Augmented keypoints fed to the discriminator: `aug(kp_a)`, `aug(T_A(kp_b))`.
    pub critic_input_a: Tensor,
    pub critic_input_b: Tensor,
}

/// Runs the extractor once over base, successor and warped frames of both
/// videos, then the silhouette generators on the unaugmented keypoints.
pub fn stage1_forward(
    models: &JokrModels,
    a: &DomainTensors,
    b: &DomainTensors,
    rand: &Stage1Randomness,
) -> Result<Stage1Forward> {
    let na = a.frames.dim(0)?;
    let nb = b.frames.dim(0)?;
    let warped_a = warp_images(&a.frames, &rand.equivariance_a)?;
    let warped_b = warp_images(&b.frames, &rand.equivariance_b)?;
    let all = Tensor::cat(&[&a.frames, &a.successors, &warped_a, &b.frames, &b.successors, &warped_b], 0)?;
    let ex = models.extractor.extract(&all)?;
    let kp = &ex.keypoints;
    let heat = ex.heatmaps.tensor();
    let off_b = 3 * na;
    let kp_a = kp.narrow(0, 0, na)?;
    let kp_b = kp.narrow(0, off_b, nb)?;
    let dtype = kp.dtype();
    let device = kp.device();
    let aug_a = AffineParams::batch_tensor(&rand.augment_a, dtype, device)?;
    let aug_b = AffineParams::batch_tensor(&rand.augment_b, dtype, device)?;
    let critic_input_a = apply_affine(&kp_a, &aug_a)?;
    let critic_input_b = apply_affine(&models.learned_affine.apply(&kp_b)?, &aug_b)?;
    Ok(Stage1Forward {
        silhouettes_a: models.silhouettes_from_keypoints(&kp_a, Domain::A)?,
        silhouettes_b: models.silhouettes_from_keypoints(&kp_b, Domain::B)?,
        kp_a_next: kp.narrow(0, na, na)?,
        kp_a_warped: kp.narrow(0, 2 * na, na)?,
        kp_b_next: kp.narrow(0, off_b + nb, nb)?,
        kp_b_warped: kp.narrow(0, off_b + 2 * nb, nb)?,
        heatmaps_a: heat.narrow(0, 0, na)?,
        heatmaps_b: heat.narrow(0, off_b, nb)?,
        kp_a,
        kp_b,
        critic_input_a,
        critic_input_b,
    })
}

/// The six stage-1 generator-side terms, each averaged over both videos.
pub fn stage1_terms(
    models: &JokrModels,
    fwd: &Stage1Forward,
    a: &DomainTensors,
    b: &DomainTensors,
    rand: &Stage1Randomness,
    weights: &LossWeights,
    mode: ConfusionMode,
) -> Result<Stage1Terms<Tensor>> {
    let cat = |x: &Tensor, y: &Tensor| Tensor::cat(&[x, y], 0);
    let seg = loss_seg(
        &cat(&fwd.silhouettes_a, &fwd.silhouettes_b)?,
        &cat(&a.masks, &b.masks)?,
    )?;
    let dc = loss_domain_confusion(&models.discriminator, &fwd.critic_input_a, &fwd.critic_input_b, mode)?;
    let tmp = loss_temporal(&cat(&fwd.kp_a, &fwd.kp_b)?, &cat(&fwd.kp_a_next, &fwd.kp_b_next)?)?;
    let eq_transforms: Vec<AffineParams> = rand
        .equivariance_a
        .iter()
        .chain(rand.equivariance_b.iter())
        .copied()
        .collect();
    let eq = equivariance_from_keypoints(
        &cat(&fwd.kp_a, &fwd.kp_b)?,
        &cat(&fwd.kp_a_warped, &fwd.kp_b_warped)?,
        &eq_transforms,
    )?;
    let sep = loss_separation(&cat(&fwd.kp_a, &fwd.kp_b)?, weights.delta)?;
    let heat = cat(&fwd.heatmaps_a, &fwd.heatmaps_b)?;
    let (_, _, h, w) = heat.dims4()?;
    let small_masks = downsample_mask(&cat(&a.masks, &b.masks)?, (h, w))?;
    let sill = loss_silhouette(&heat, &small_masks)?;
    Ok(Stage1Terms {
        seg,
        dc,
        tmp,
        eq,
        sep,
        sill,
    })
}

/// Stage-1 generator objective: weighted total plus its breakdown.
pub struct Stage1Output {
    pub forward: Stage1Forward,
    pub terms: Stage1Terms<Tensor>,
    pub total: Tensor,
}

pub fn total_stage1(
    models: &JokrModels,
    a: &DomainTensors,
    b: &DomainTensors,
    rand: &Stage1Randomness,
    weights: &LossWeights,
    mode: ConfusionMode,
) -> Result<Stage1Output> {
    let forward = stage1_forward(models, a, b, rand)?;
    let terms = stage1_terms(models, &forward, a, b, rand, weights, mode)?;
    let total = terms.total(weights)?;
    Ok(Stage1Output { forward, terms, total })
}

/// Stage-2 objective on frozen keypoints and silhouettes: `R_A` reconstructs
/// video A and `R_B` video B.
pub fn total_stage2(
    models: &JokrModels,
    a: &DomainTensors,
    b: &DomainTensors,
    extractor: &dyn PerceptualExtractor,
    weights: &LossWeights,
) -> Result<(Stage2Terms<Tensor>, Tensor)> {
    let sil_a = frozen_silhouettes(models, &a.frames, Domain::A)?;
    let sil_b = frozen_silhouettes(models, &b.frames, Domain::B)?;
    stage2_from_silhouettes(models, (&sil_a, &a.frames), (&sil_b, &b.frames), extractor, weights)
}

/// `G(project(E(frames)))` cut from the graph.
pub fn frozen_silhouettes(models: &JokrModels, frames: &Tensor, domain: Domain) -> Result<Tensor> {
    let kp = models.extractor.extract(frames)?.keypoints.detach();
    Ok(models.silhouettes_from_keypoints(&kp, domain)?.detach())
}

/// Stage-2 objective given precomputed `(silhouettes, target frames)` per video.
pub fn stage2_from_silhouettes(
    models: &JokrModels,
    (sil_a, frames_a): (&Tensor, &Tensor),
    (sil_b, frames_b): (&Tensor, &Tensor),
    extractor: &dyn PerceptualExtractor,
    weights: &LossWeights,
) -> Result<(Stage2Terms<Tensor>, Tensor)> {
    let rec_a = models.refiners.refine(sil_a, Domain::A)?;
    let rec_b = models.refiners.refine(sil_b, Domain::B)?;
    let pred = Tensor::cat(&[&rec_a, &rec_b], 0)?;
    let target = Tensor::cat(&[frames_a, frames_b], 0)?;
    let terms = Stage2Terms {
        l1: loss_l1(&pred, &target)?,
        lpips: loss_lpips(&pred, &target, extractor)?,
    };
    let total = terms.total(weights)?;
    Ok((terms, total))
}
