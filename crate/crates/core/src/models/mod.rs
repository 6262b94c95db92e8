//! Networks: keypoint extractor, silhouette generators, refiners,
//! keypoint discriminator and the learned affine map.

pub mod layers;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::VarMap;
use serde::{Deserialize, Serialize};

use crate::error::{JokrError, Result};
use crate::keypoints::{
    apply_affine, expect_keypoints, project_keypoints, spatial_softmax, AffineParams, ConfidenceParams,
    HeatmapStack,
};
use crate::media_io::Domain;
use layers::{upsample2x, Conv, ConvBlock, Linear, ParamStore, ResBlock};

/// Channel widths and depths. The defaults follow the usual full-size
/// setting; [`ArchConfig::toy`] is small enough for CPU experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub extractor_channels: usize,
    pub generator_channels: usize,
    pub refiner_channels: usize,
    pub residual_blocks: usize,
    pub refiner_residual_blocks: usize,
    pub discriminator_hidden: usize,
    pub softmax_temperature: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            extractor_channels: 32,
            generator_channels: 64,
            refiner_channels: 64,
            residual_blocks: 9,
            refiner_residual_blocks: 9,
            discriminator_hidden: 256,
            softmax_temperature: 0.1,
        }
    }
}

impl ArchConfig {
    pub fn toy() -> Self {
        Self {
            extractor_channels: 8,
            generator_channels: 16,
            refiner_channels: 16,
            residual_blocks: 9,
            refiner_residual_blocks: 3,
            discriminator_hidden: 64,
            softmax_temperature: 0.1,
        }
    }
}

/// Everything needed to rebuild the networks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_keypoints: usize,
    /// Image resolution `[H, W]`; both must be divisible by 16.
    pub resolution: [usize; 2],
    pub confidence: ConfidenceParams,
    pub arch: ArchConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_keypoints: 12,
            resolution: [128, 128],
            confidence: ConfidenceParams::default(),
            arch: ArchConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.resolution;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(JokrError::InvalidConfig(format!(
                "resolution {h}x{w} must be a positive multiple of 16"
            )));
        }
        if self.num_keypoints == 0 {
            return Err(JokrError::InvalidConfig("need at least one keypoint".into()));
        }
        if self.arch.generator_channels < 4 || self.arch.refiner_channels < 4 || self.arch.extractor_channels == 0 {
            return Err(JokrError::InvalidConfig("channel widths too small".into()));
        }
        Ok(())
    }

    /// Heatmap / confidence-map resolution, a quarter of the image resolution.
    pub fn heatmap_resolution(&self) -> (usize, usize) {
        (self.resolution[0] / 4, self.resolution[1] / 4)
    }

    pub fn image_resolution(&self) -> (usize, usize) {
        (self.resolution[0], self.resolution[1])
    }
}

fn check_images(x: &Tensor, channels: usize, res: (usize, usize), what: &str) -> Result<()> {
    let dims = x.dims();
    if dims.len() != 4 || dims[1] != channels || (dims[2], dims[3]) != res {
        return Err(JokrError::ShapeMismatch(format!(
            "{what}: got {dims:?}, expected (N, {channels}, {}, {})",
            res.0, res.1
        )));
    }
    Ok(())
}

/// Encoder-decoder (U-Net) mapping an image to `K` heatmaps at 1/4 resolution.
#[derive(Debug, Clone)]
pub struct Extractor {
    enc1: ConvBlock,
    enc2: ConvBlock,
    bottleneck: ConvBlock,
    dec: ConvBlock,
    head: Conv,
    temperature: f64,
    resolution: (usize, usize),
}

/// Output of the extractor on a batch.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub heatmaps: HeatmapStack,
    /// `(N, K, 2)`.
    pub keypoints: Tensor,
}

impl Extractor {
    fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.arch.extractor_channels;
        Ok(Self {
            enc1: ConvBlock::new(ps, "enc1", 3, c, 1)?,
            enc2: ConvBlock::new(ps, "enc2", c, 2 * c, 1)?,
            bottleneck: ConvBlock::new(ps, "bottleneck", 2 * c, 4 * c, 1)?,
            dec: ConvBlock::new(ps, "dec", 6 * c, 2 * c, 1)?,
            head: Conv::new(ps, "head", 3 * c, cfg.num_keypoints, 3, 1)?,
            temperature: cfg.arch.softmax_temperature,
            resolution: cfg.image_resolution(),
        })
    }

    /// Heatmap logits, `(N, K, H/4, W/4)`.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        check_images(images, 3, self.resolution, "extractor input")?;
        // The hourglass runs on a half-resolution copy of the input.
        let x = images.avg_pool2d(2)?;
        let e1 = self.enc1.forward(&x)?.avg_pool2d(2)?;
        let e2 = self.enc2.forward(&e1)?.avg_pool2d(2)?;
        let b = self.bottleneck.forward(&e2.avg_pool2d(2)?)?;
        let d = self.dec.forward(&Tensor::cat(&[&upsample2x(&b)?, &e2], 1)?)?;
        self.head.forward(&Tensor::cat(&[&upsample2x(&d)?, &e1], 1)?)
    }

    pub fn extract(&self, images: &Tensor) -> Result<Extraction> {
        let heatmaps = spatial_softmax(&self.logits(images)?, self.temperature)?;
        let keypoints = expect_keypoints(&heatmaps)?;
        Ok(Extraction { heatmaps, keypoints })
    }
}

/// Residual trunk shared by both silhouette generators.
#[derive(Debug, Clone)]
pub struct GeneratorTrunk {
    stem: ConvBlock,
    blocks: Vec<ResBlock>,
    up1: ConvBlock,
    up2: ConvBlock,
}

impl GeneratorTrunk {
    fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.arch.generator_channels;
        Ok(Self {
            stem: ConvBlock::new(ps, "stem", cfg.num_keypoints, c, 1)?,
            blocks: (0..cfg.arch.residual_blocks)
                .map(|i| ResBlock::new(ps, &format!("res{i}"), c))
                .collect::<Result<_>>()?,
            up1: ConvBlock::new(ps, "up1", c, c / 2, 1)?,
            up2: ConvBlock::new(ps, "up2", c / 2, c / 4, 1)?,
        })
    }

    /// Confidence maps at 1/4 resolution to full-resolution features.
    pub fn forward(&self, maps: &Tensor) -> Result<Tensor> {
        let stem = self.stem.forward(maps)?;
        let mut h = stem.clone();
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        // Long skip around the residual stack.
        let h = (h + stem)?;
        let h = self.up1.forward(&upsample2x(&h)?)?;
        self.up2.forward(&upsample2x(&h)?)
    }
}

/// `G_A` and `G_B`: one trunk, two single-layer heads.
#[derive(Debug, Clone)]
pub struct SilhouetteGeneratorPair {
    pub trunk: GeneratorTrunk,
    head_a: Conv,
    head_b: Conv,
    map_resolution: (usize, usize),
    num_keypoints: usize,
}

impl SilhouetteGeneratorPair {
    fn new(trunk_ps: &mut ParamStore, heads_ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.arch.generator_channels / 4;
        Ok(Self {
            trunk: GeneratorTrunk::new(trunk_ps, cfg)?,
            head_a: Conv::new(heads_ps, "head_a", c, 1, 3, 1)?,
            head_b: Conv::new(heads_ps, "head_b", c, 1, 3, 1)?,
            map_resolution: cfg.heatmap_resolution(),
            num_keypoints: cfg.num_keypoints,
        })
    }

    pub fn head(&self, domain: Domain, features: &Tensor) -> Result<Tensor> {
        let head = match domain {
            Domain::A => &self.head_a,
            Domain::B => &self.head_b,
        };
        Ok(candle_nn::ops::sigmoid(&head.forward(features)?)?)
    }

    /// `(N, K, H/4, W/4)` confidence maps to `(N, 1, H, W)` silhouettes.
    pub fn generate(&self, maps: &Tensor, domain: Domain) -> Result<Tensor> {
        check_images(maps, self.num_keypoints, self.map_resolution, "generator input")?;
        self.head(domain, &self.trunk.forward(maps)?)
    }
}

/// Silhouette to RGB image-to-image network.
#[derive(Debug, Clone)]
pub struct Refiner {
    stem: ConvBlock,
    down1: ConvBlock,
    down2: ConvBlock,
    blocks: Vec<ResBlock>,
    up1: ConvBlock,
    up2: ConvBlock,
    out: Conv,
    resolution: (usize, usize),
}

impl Refiner {
    fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.arch.refiner_channels;
        Ok(Self {
            stem: ConvBlock::new(ps, "stem", 1, c / 4, 1)?,
            down1: ConvBlock::new(ps, "down1", c / 4, c / 2, 2)?,
            down2: ConvBlock::new(ps, "down2", c / 2, c, 2)?,
            blocks: (0..cfg.arch.refiner_residual_blocks)
                .map(|i| ResBlock::new(ps, &format!("res{i}"), c))
                .collect::<Result<_>>()?,
            up1: ConvBlock::new(ps, "up1", c, c / 2, 1)?,
            up2: ConvBlock::new(ps, "up2", c / 2, c / 4, 1)?,
            out: Conv::new(ps, "out", c / 2, 3, 3, 1)?,
            resolution: cfg.image_resolution(),
        })
    }

    /// `(N, 1, H, W)` silhouettes to `(N, 3, H, W)` frames in `[0, 1]`.
    pub fn refine(&self, silhouettes: &Tensor) -> Result<Tensor> {
        check_images(silhouettes, 1, self.resolution, "refiner input")?;
        let s = self.stem.forward(silhouettes)?;
        let mut h = self.down2.forward(&self.down1.forward(&s)?)?;
        let skip = h.clone();
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        let h = (h + skip)?;
        let h = self.up1.forward(&upsample2x(&h)?)?;
        let h = self.up2.forward(&upsample2x(&h)?)?;
        let y = self.out.forward(&Tensor::cat(&[&h, &s], 1)?)?;
        Ok(candle_nn::ops::sigmoid(&y)?)
    }
}

/// `R_A` and `R_B`.
#[derive(Debug, Clone)]
pub struct RefinerPair {
    pub refiner_a: Refiner,
    pub refiner_b: Refiner,
}

impl RefinerPair {
    pub fn refine(&self, silhouettes: &Tensor, domain: Domain) -> Result<Tensor> {
        match domain {
            Domain::A => self.refiner_a.refine(silhouettes),
            Domain::B => self.refiner_b.refine(silhouettes),
        }
    }
}

/// Anything that scores flattened keypoint sets with a logit; the
/// probability that a set comes from video B is `sigmoid(logit)`.
pub trait KeypointCritic {
    /// `(N, K, 2)` keypoints to `(N,)` logits.
    fn logits(&self, kp: &Tensor) -> Result<Tensor>;

    fn probabilities(&self, kp: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.logits(kp)?)?)
    }
}

/// Three fully connected layers with leaky ReLU, sigmoid output.
#[derive(Debug, Clone)]
pub struct KeypointDiscriminator {
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
    num_keypoints: usize,
}

impl KeypointDiscriminator {
    fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let k2 = 2 * cfg.num_keypoints;
        let h = cfg.arch.discriminator_hidden;
        Ok(Self {
            fc1: Linear::new(ps, "fc1", k2, h)?,
            fc2: Linear::new(ps, "fc2", h, h)?,
            fc3: Linear::new(ps, "fc3", h, 1)?,
            num_keypoints: cfg.num_keypoints,
        })
    }
}

impl KeypointCritic for KeypointDiscriminator {
    fn logits(&self, kp: &Tensor) -> Result<Tensor> {
        let (n, k, two) = kp.dims3()?;
        if k != self.num_keypoints || two != 2 {
            return Err(JokrError::ShapeMismatch(format!(
                "discriminator expects (N, {}, 2), got {:?}",
                self.num_keypoints,
                kp.dims()
            )));
        }
        let x = kp.reshape((n, 2 * k))?;
        let h = candle_nn::ops::leaky_relu(&self.fc1.forward(&x)?, 0.2)?;
        let h = candle_nn::ops::leaky_relu(&self.fc2.forward(&h)?, 0.2)?;
        Ok(self.fc3.forward(&h)?.reshape(n)?)
    }
}

/// Trainable 2x3 map applied to video B's keypoints before the discriminator.
#[derive(Debug, Clone)]
pub struct LearnedAffine {
    matrix: Tensor,
}

impl LearnedAffine {
    fn new(ps: &mut ParamStore) -> Result<Self> {
        let matrix = ps.from_values("matrix", &[2, 3], AffineParams::identity().flat().to_vec())?;
        Ok(Self { matrix })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.matrix
    }

    pub fn params(&self) -> Result<AffineParams> {
        AffineParams::from_tensor(&self.matrix)
    }

    pub fn apply(&self, kp: &Tensor) -> Result<Tensor> {
        apply_affine(kp, &self.matrix)
    }
}

/// Names of the parameter groups, also used as checkpoint blob names.
pub const NETWORKS: [&str; 7] = ["e", "g_trunk", "g_heads", "r_a", "r_b", "d", "t_a"];

/// All JOKR networks plus their parameter maps.
pub struct JokrModels {
    pub config: ModelConfig,
    pub extractor: Extractor,
    pub generators: SilhouetteGeneratorPair,
    pub refiners: RefinerPair,
    pub discriminator: KeypointDiscriminator,
    pub learned_affine: LearnedAffine,
    var_maps: Vec<(&'static str, VarMap)>,
    dtype: DType,
    device: Device,
}

impl JokrModels {
    pub fn new(config: ModelConfig, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let store = |name| ParamStore::new(config.seed, name, dtype, device);
        let mut e_ps = store("e");
        let mut trunk_ps = store("g_trunk");
        let mut heads_ps = store("g_heads");
        let mut ra_ps = store("r_a");
        let mut rb_ps = store("r_b");
        let mut d_ps = store("d");
        let mut t_ps = store("t_a");
        let extractor = Extractor::new(&mut e_ps, &config)?;
        let generators = SilhouetteGeneratorPair::new(&mut trunk_ps, &mut heads_ps, &config)?;
        let refiners = RefinerPair {
            refiner_a: Refiner::new(&mut ra_ps, &config)?,
            refiner_b: Refiner::new(&mut rb_ps, &config)?,
        };
        let discriminator = KeypointDiscriminator::new(&mut d_ps, &config)?;
        let learned_affine = LearnedAffine::new(&mut t_ps)?;
        let var_maps = vec![
            ("e", e_ps.into_var_map()),
            ("g_trunk", trunk_ps.into_var_map()),
            ("g_heads", heads_ps.into_var_map()),
            ("r_a", ra_ps.into_var_map()),
            ("r_b", rb_ps.into_var_map()),
            ("d", d_ps.into_var_map()),
            ("t_a", t_ps.into_var_map()),
        ];
        Ok(Self {
            config,
            extractor,
            generators,
            refiners,
            discriminator,
            learned_affine,
            var_maps,
            dtype,
            device: device.clone(),
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn var_map(&self, network: &str) -> Result<&VarMap> {
        self.var_maps
            .iter()
            .find(|(n, _)| *n == network)
            .map(|(_, m)| m)
            .ok_or_else(|| JokrError::InvalidConfig(format!("unknown network {network:?}")))
    }

    /// Variables of the named networks, sorted by network then parameter name.
    pub fn named_vars(&self, networks: &[&str]) -> Result<Vec<(String, Var)>> {
        let mut out = Vec::new();
        for net in networks {
            let data = self.var_map(net)?.data().lock().expect("var map lock");
            let mut vars: Vec<(String, Var)> = data
                .iter()
                .map(|(k, v)| (format!("{net}/{k}"), v.clone()))
                .collect();
            vars.sort_by(|a, b| a.0.cmp(&b.0));
            out.extend(vars);
        }
        Ok(out)
    }

    /// Copies every parameter to the host, keyed by `network/name`.
    pub fn snapshot(&self, networks: &[&str]) -> Result<Vec<(String, Vec<f64>)>> {
        self.named_vars(networks)?
            .into_iter()
            .map(|(n, v)| Ok((n, v.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)))
            .collect()
    }

    pub fn confidence_maps(&self, kp: &Tensor) -> Result<Tensor> {
        project_keypoints(kp, self.config.heatmap_resolution(), &self.config.confidence)
    }

    /// `G_domain(project(kp))`.
    pub fn silhouettes_from_keypoints(&self, kp: &Tensor, domain: Domain) -> Result<Tensor> {
        self.generators.generate(&self.confidence_maps(kp)?, domain)
    }

    /// `R_domain(G_domain(project(kp)))`, returning `(silhouettes, frames)`.
    pub fn render(&self, kp: &Tensor, domain: Domain) -> Result<(Tensor, Tensor)> {
        let sil = self.silhouettes_from_keypoints(kp, domain)?;
        let frames = self.refiners.refine(&sil, domain)?;
        Ok((sil, frames))
    }

    pub fn save_network(&self, network: &str, path: &std::path::Path) -> Result<()> {
        self.var_map(network)?.save(path)?;
        Ok(())
    }

    pub fn load_network(&mut self, network: &str, path: &std::path::Path) -> Result<()> {
        let map = self
            .var_maps
            .iter_mut()
            .find(|(n, _)| *n == network)
            .map(|(_, m)| m)
            .ok_or_else(|| JokrError::InvalidConfig(format!("unknown network {network:?}")))?;
        map.load(path).map_err(|e| JokrError::CheckpointInvalid(format!("{network}: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            num_keypoints: 4,
            resolution: [16, 16],
            confidence: ConfidenceParams::default(),
            arch: ArchConfig {
                extractor_channels: 4,
                generator_channels: 8,
                refiner_channels: 8,
                residual_blocks: 2,
                refiner_residual_blocks: 1,
                discriminator_hidden: 8,
                softmax_temperature: 0.1,
            },
            seed: 3,
        }
    }

    fn random_images(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..n * c * h * w).map(|_| rng.random::<f32>()).collect();
        Tensor::from_vec(v, (n, c, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn keypoints_inside_unit_square() {
        let m = JokrModels::new(tiny_config(), DType::F32, &Device::Cpu).unwrap();
        let out = m.extractor.extract(&random_images(3, 3, 16, 16, 0)).unwrap();
        let kp: Vec<f32> = out.keypoints.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(kp.len(), 3 * 4 * 2);
        assert!(kp.iter().all(|c| c.abs() <= 1.0));
        HeatmapStack::new(out.heatmaps.tensor().clone()).unwrap();
    }

    #[test]
    fn extraction_is_deterministic() {
        let m = JokrModels::new(tiny_config(), DType::F32, &Device::Cpu).unwrap();
        let x = random_images(1, 3, 16, 16, 1);
        let a: Vec<f32> = m.extractor.extract(&x).unwrap().keypoints.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = m.extractor.extract(&x).unwrap().keypoints.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn flipped_frame_gives_different_keypoints() {
        let m = JokrModels::new(tiny_config(), DType::F32, &Device::Cpu).unwrap();
        let x = random_images(1, 3, 16, 16, 2);
        let idx: Vec<u32> = (0..16u32).rev().collect();
        let flipped = x.index_select(&Tensor::new(idx.as_slice(), &Device::Cpu).unwrap(), 3).unwrap();
        let a: Vec<f32> = m.extractor.extract(&x).unwrap().keypoints.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = m.extractor.extract(&flipped).unwrap().keypoints.flatten_all().unwrap().to_vec1().unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn wrong_frame_shape_rejected() {
        let m = JokrModels::new(tiny_config(), DType::F32, &Device::Cpu).unwrap();
        let err = m.extractor.extract(&random_images(1, 3, 8, 8, 0)).unwrap_err();
        assert!(matches!(err, JokrError::ShapeMismatch(_)));
        let err = m.generators.generate(&random_images(1, 3, 4, 4, 0), Domain::A).unwrap_err();
        assert!(matches!(err, JokrError::ShapeMismatch(_)));
    }

    #[test]
    fn heads_share_trunk_activations() {
        let m = JokrModels::new(tiny_config(), DType::F32, &Device::Cpu).unwrap();
        let maps = random_images(2, 4, 4, 4, 5);
        // The trunk is a single object: both domains read identical features.
        let feats = m.generators.trunk.forward(&maps).unwrap();
        let feats_again = m.generators.trunk.forward(&maps).unwrap();
        let fa: Vec<f32> = feats.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(fa, feats_again.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        let a = m.generators.generate(&maps, Domain::A).unwrap();
        let b = m.generators.generate(&maps, Domain::B).unwrap();
        let a2 = m.generators.head(Domain::A, &feats).unwrap();
        let b2 = m.generators.head(Domain::B, &feats).unwrap();
        let av: Vec<f32> = a.flatten_all().unwrap().to_vec1().unwrap();
        let bv: Vec<f32> = b.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(av, a2.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert_eq!(bv, b2.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert_ne!(av, bv);
        // Only the heads differ between the two parameter groups.
        let trunk_names: Vec<String> = m.named_vars(&["g_trunk"]).unwrap().into_iter().map(|(n, _)| n).collect();
        assert!(trunk_names.iter().all(|n| !n.contains("head")));
        assert_eq!(m.named_vars(&["g_heads"]).unwrap().len(), 4);
    }

    #[test]
    fn outputs_total_on_degenerate_inputs() {
        let m = JokrModels::new(tiny_config(), DType::F32, &Device::Cpu).unwrap();
        for fill in [0.0f32, 1.0] {
            let maps = (Tensor::ones((2, 4, 4, 4), DType::F32, &Device::Cpu).unwrap() * fill as f64).unwrap();
            let sil = m.generators.generate(&maps, Domain::A).unwrap();
            let v: Vec<f32> = sil.flatten_all().unwrap().to_vec1().unwrap();
            assert!(v.iter().all(|x| x.is_finite() && (0.0..=1.0).contains(x)));
            let frames = m.refiners.refine(&sil, Domain::B).unwrap();
            assert_eq!(frames.dims(), &[2, 3, 16, 16]);
            let img = (Tensor::ones((2, 3, 16, 16), DType::F32, &Device::Cpu).unwrap() * fill as f64).unwrap();
            let kp: Vec<f32> = m.extractor.extract(&img).unwrap().keypoints.flatten_all().unwrap().to_vec1().unwrap();
            assert!(kp.iter().all(|x| x.is_finite()));
        }
        let zero_sil = Tensor::zeros((1, 1, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let f: Vec<f32> = m.refiners.refine(&zero_sil, Domain::A).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(f.iter().all(|x| x.is_finite() && (0.0..=1.0).contains(x)));
    }

    #[test]
    fn discriminator_range_and_order_sensitivity() {
        let m = JokrModels::new(tiny_config(), DType::F64, &Device::Cpu).unwrap();
        let kp = Tensor::from_vec(vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.0], (1, 4, 2), &Device::Cpu).unwrap();
        let p: f64 = m.discriminator.probabilities(&kp).unwrap().squeeze(0).unwrap().to_scalar().unwrap();
        assert!(p > 0.0 && p < 1.0);
        let perm = kp.index_select(&Tensor::new(&[2u32, 0, 3, 1], &Device::Cpu).unwrap(), 1).unwrap();
        let q: f64 = m.discriminator.probabilities(&perm).unwrap().squeeze(0).unwrap().to_scalar().unwrap();
        assert_ne!(p, q);
        let bad = Tensor::zeros((1, 3, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(m.discriminator.logits(&bad).is_err());
    }

    #[test]
    fn learned_affine_starts_at_identity() {
        let m = JokrModels::new(tiny_config(), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(m.learned_affine.params().unwrap(), AffineParams::identity());
    }

    #[test]
    fn construction_is_seeded() {
        let a = JokrModels::new(tiny_config(), DType::F32, &Device::Cpu).unwrap();
        let b = JokrModels::new(tiny_config(), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(a.snapshot(&NETWORKS).unwrap(), b.snapshot(&NETWORKS).unwrap());
    }
}
