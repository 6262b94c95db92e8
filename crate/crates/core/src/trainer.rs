//! Two-stage optimization.
//!
//! Stage 1 alternates one discriminator step and one step of the extractor,
//! silhouette generators and learned affine map per iteration. Stage 2
//! freezes those and fits the refiners. All per-iteration randomness is
//! drawn from a generator seeded by `(seed, stage, iteration)`, which makes
//! resuming from a checkpoint bit-exact without storing generator state.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Manifest, SaveContext, TrainState};
use crate::config::{DataSource, TrainConfig};
use crate::error::{JokrError, Result};
use crate::losses::{
    frozen_silhouettes, loss_discriminator, stage1_forward, stage1_terms, stage2_from_silhouettes,
    PerceptualExtractor, Stage1Randomness, Stage1Terms, Stage2Terms,
};
use crate::media_io::{sample_batch, DatasetTensors, Domain, VideoPairDataset};
use crate::models::layers::derive_seed;
use crate::models::JokrModels;
use crate::optim::{Adam, AdamParams};

/// Parameter groups, each with its own optimizer.
pub const GENERATOR_GROUP: [&str; 4] = ["e", "g_trunk", "g_heads", "t_a"];
pub const DISCRIMINATOR_GROUP: [&str; 1] = ["d"];
pub const REFINER_GROUP: [&str; 2] = ["r_a", "r_b"];

const OPTIMIZER_NAMES: [&str; 3] = ["generator", "discriminator", "refiner"];

/// One NDJSON log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage: u8,
    pub iter: u64,
    pub term: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Step {
    pub discriminator: f64,
    pub terms: Stage1Terms<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Step {
    pub terms: Stage2Terms<f64>,
    pub total: f64,
}

pub struct Trainer {
    pub models: JokrModels,
    pub config: TrainConfig,
    dataset: VideoPairDataset,
    data: DatasetTensors,
    source: Option<DataSource>,
    state: TrainState,
    opt_gen: Adam,
    opt_d: Adam,
    opt_ref: Adam,
    perceptual: Box<dyn PerceptualExtractor>,
    records: Vec<LossRecord>,
    log_file: Option<BufWriter<File>>,
    checkpoint_dir: Option<PathBuf>,
    // Frozen-network silhouettes of every frame, built when stage 2 starts.
    stage2_silhouettes: Option<(Tensor, Tensor)>,
}

fn optimizers(models: &JokrModels, config: &TrainConfig) -> Result<(Adam, Adam, Adam)> {
    let params = AdamParams {
        lr: config.lr,
        beta1: config.betas[0],
        beta2: config.betas[1],
        ..Default::default()
    };
    Ok((
        Adam::new(models.named_vars(&GENERATOR_GROUP)?, params)?,
        Adam::new(models.named_vars(&DISCRIMINATOR_GROUP)?, params)?,
        Adam::new(models.named_vars(&REFINER_GROUP)?, params)?,
    ))
}

impl Trainer {
    pub fn new(models: JokrModels, dataset: VideoPairDataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let [h, w] = models.config.resolution;
        if dataset.resolution != (h, w) {
            return Err(JokrError::ConfigMismatch(format!(
                "dataset is {:?}, model expects {h}x{w}",
                dataset.resolution
            )));
        }
        for d in [Domain::A, Domain::B] {
            if dataset.len(d) < 2 {
                return Err(JokrError::TooShort {
                    video: d.to_string(),
                    frames: dataset.len(d),
                });
            }
        }
        let data = DatasetTensors::new(&dataset, models.dtype(), models.device())?;
        let (opt_gen, opt_d, opt_ref) = optimizers(&models, &config)?;
        Ok(Self {
            perceptual: config.perceptual.extractor(),
            models,
            config,
            dataset,
            data,
            source: None,
            state: TrainState::default(),
            opt_gen,
            opt_d,
            opt_ref,
            records: Vec::new(),
            log_file: None,
            checkpoint_dir: None,
            stage2_silhouettes: None,
        })
    }

    /// Continues from a checkpoint with the training configuration stored in it.
    pub fn resume(dir: &Path, dataset: VideoPairDataset) -> Result<Self> {
        let manifest = checkpoint::read_manifest(dir)?;
        let train = manifest
            .train
            .clone()
            .ok_or_else(|| JokrError::CheckpointInvalid("manifest has no training config".into()))?;
        Self::resume_with(dir, dataset, &manifest.model, train)
    }

    /// Continues from a checkpoint under `train`, after checking that the
    /// stored networks match `model`.
    pub fn resume_with(
        dir: &Path,
        dataset: VideoPairDataset,
        model: &crate::models::ModelConfig,
        train: TrainConfig,
    ) -> Result<Self> {
        let manifest = checkpoint::read_manifest(dir)?;
        manifest.check_compatible(model)?;
        let (models, manifest) = checkpoint::load_models(dir, DType::F32, &Device::Cpu)?;
        let mut trainer = Self::new(models, dataset, train)?;
        trainer.source = manifest.data.clone();
        trainer.state = manifest.state;
        trainer.load_optimizers(dir, &manifest)?;
        Ok(trainer)
    }

    fn load_optimizers(&mut self, dir: &Path, manifest: &Manifest) -> Result<()> {
        let opts = [&mut self.opt_gen, &mut self.opt_d, &mut self.opt_ref];
        for (name, opt) in OPTIMIZER_NAMES.into_iter().zip(opts) {
            if !checkpoint::load_optimizer(dir, manifest, name, opt)? {
                warn!("checkpoint has no {name} optimizer state; starting fresh moments");
            }
        }
        Ok(())
    }

    /// Records where the dataset came from so checkpoints are self-describing.
    pub fn with_source(mut self, source: DataSource) -> Self {
        self.source = Some(source);
        self
    }

    /// Appends NDJSON loss records to `path`.
    pub fn with_log_file(mut self, path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        self.log_file = Some(BufWriter::new(file));
        Ok(self)
    }

    /// Periodic, final and divergence checkpoints are written here.
    pub fn with_checkpoint_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    pub fn state(&self) -> TrainState {
        self.state
    }

    pub fn dataset(&self) -> &VideoPairDataset {
        &self.dataset
    }

    /// Records kept in memory, in emission order.
    pub fn records(&self) -> &[LossRecord] {
        &self.records
    }

    fn iteration_rng(&self, stage: u8, iteration: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &format!("stage{stage}/iter{iteration}")))
    }

    /// Batch indices and augmentation draws for a stage-1 iteration.
    pub fn stage1_draws(&self, iteration: u64) -> Result<(crate::media_io::Batch, Stage1Randomness)> {
        let mut rng = self.iteration_rng(1, iteration);
        let batch = sample_batch(&self.dataset, self.config.batch_size, rng.random())?;
        let n = self.config.batch_size;
        let mut draw = |r: &crate::keypoints::AugmentRanges| (0..n).map(|_| r.sample(&mut rng)).collect::<Vec<_>>();
        let equivariance_a = draw(&self.config.equivariance_ranges);
        let equivariance_b = draw(&self.config.equivariance_ranges);
        let augment_a = draw(&self.config.augment_ranges);
        let augment_b = draw(&self.config.augment_ranges);
        Ok((
            batch,
            Stage1Randomness {
                equivariance_a,
                equivariance_b,
                augment_a,
                augment_b,
            },
        ))
    }

    /// One stage-1 iteration: a discriminator step on detached keypoints,
    /// then a generator-side step against the updated discriminator.
    pub fn step_stage1(&mut self) -> Result<Stage1Step> {
        let iteration = self.state.iteration_stage1;
        let (batch, rand) = self.stage1_draws(iteration)?;
        let a = self.data.gather(&batch, Domain::A)?;
        let b = self.data.gather(&batch, Domain::B)?;
        let fwd = stage1_forward(&self.models, &a, &b, &rand)?;

        let ld = loss_discriminator(&self.models.discriminator, &fwd.critic_input_a, &fwd.critic_input_b)?;
        let d_value = ld.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        self.guard(1, iteration, "discriminator", d_value)?;
        self.opt_d.step(&ld.backward()?)?;

        let terms = stage1_terms(
            &self.models,
            &fwd,
            &a,
            &b,
            &rand,
            &self.config.weights,
            self.config.confusion_mode,
        )?;
        let total = terms.total(&self.config.weights)?;
        let values = terms.values()?;
        let total_value = values.total(&self.config.weights);
        for (name, v) in values.named() {
            self.guard(1, iteration, name, v)?;
        }
        self.guard(1, iteration, "total", total_value)?;
        self.opt_gen.step(&total.backward()?)?;

        self.state.iteration_stage1 += 1;
        let mut named: Vec<(&str, f64)> = values.named().to_vec();
        named.push(("discriminator", d_value));
        named.push(("total", total_value));
        self.record(1, iteration, &named)?;
        Ok(Stage1Step {
            discriminator: d_value,
            terms: values,
            total: total_value,
        })
    }

    fn ensure_stage2_cache(&mut self) -> Result<()> {
        if self.stage2_silhouettes.is_some() {
            return Ok(());
        }
        let chunk = 16;
        let mut per_domain = Vec::new();
        for domain in [Domain::A, Domain::B] {
            let (frames, _) = self.data.video(domain);
            let n = frames.dim(0)?;
            let mut parts = Vec::new();
            for start in (0..n).step_by(chunk) {
                let len = chunk.min(n - start);
                parts.push(frozen_silhouettes(&self.models, &frames.narrow(0, start, len)?, domain)?);
            }
            per_domain.push(Tensor::cat(&parts, 0)?);
        }
        let b = per_domain.pop().expect("two domains");
        let a = per_domain.pop().expect("two domains");
        self.stage2_silhouettes = Some((a, b));
        Ok(())
    }

    /// One stage-2 iteration on the refiners only.
    pub fn step_stage2(&mut self) -> Result<Stage2Step> {
        self.ensure_stage2_cache()?;
        self.state.stage = 2;
        let iteration = self.state.iteration_stage2;
        let mut rng = self.iteration_rng(2, iteration);
        let batch = sample_batch(&self.dataset, self.config.batch_size, rng.random())?;
        let (sil_a, sil_b) = self.stage2_silhouettes.as_ref().expect("cache built");
        let select = |t: &Tensor, domain: Domain| -> Result<Tensor> {
            let idx: Vec<u32> = batch.elements(domain).iter().map(|e| e.index as u32).collect();
            Ok(t.index_select(&Tensor::new(idx.as_slice(), t.device())?, 0)?)
        };
        let sa = select(sil_a, Domain::A)?;
        let sb = select(sil_b, Domain::B)?;
        let fa = select(self.data.video(Domain::A).0, Domain::A)?;
        let fb = select(self.data.video(Domain::B).0, Domain::B)?;
        let (terms, total) =
            stage2_from_silhouettes(&self.models, (&sa, &fa), (&sb, &fb), self.perceptual.as_ref(), &self.config.weights)?;
        let values = terms.values()?;
        let total_value = values.total(&self.config.weights);
        for (name, v) in values.named() {
            self.guard(2, iteration, name, v)?;
        }
        self.guard(2, iteration, "total", total_value)?;
        self.opt_ref.step(&total.backward()?)?;

        self.state.iteration_stage2 += 1;
        let mut named: Vec<(&str, f64)> = values.named().to_vec();
        named.push(("total", total_value));
        self.record(2, iteration, &named)?;
        Ok(Stage2Step {
            terms: values,
            total: total_value,
        })
    }

    /// Runs stage 1 up to `config.iterations_stage1`, then checkpoints.
    pub fn train_stage1(&mut self) -> Result<()> {
        if self.state.stage == 2 {
            return Err(JokrError::InvalidConfig("stage 1 is already complete".into()));
        }
        while self.state.iteration_stage1 < self.config.iterations_stage1 {
            let step = self.step_stage1()?;
            let it = self.state.iteration_stage1;
            if it.is_multiple_of(100) {
                info!("stage 1 iter {it}: total {:.4} D {:.4}", step.total, step.discriminator);
            }
            self.maybe_checkpoint(it)?;
        }
        self.final_checkpoint()
    }

    /// Runs stage 2 up to `config.iterations_stage2`, then checkpoints.
    pub fn train_stage2(&mut self) -> Result<()> {
        self.state.stage = 2;
        while self.state.iteration_stage2 < self.config.iterations_stage2 {
            let step = self.step_stage2()?;
            let it = self.state.iteration_stage2;
            if it.is_multiple_of(100) {
                info!("stage 2 iter {it}: total {:.4} L1 {:.4}", step.total, step.terms.l1);
            }
            self.maybe_checkpoint(it)?;
        }
        self.final_checkpoint()
    }

    fn maybe_checkpoint(&mut self, iteration: u64) -> Result<()> {
        let every = self.config.checkpoint_interval;
        if let Some(dir) = self.checkpoint_dir.clone() {
            if every > 0 && iteration.is_multiple_of(every) {
                self.save_checkpoint(&dir)?;
            }
        }
        Ok(())
    }

    fn final_checkpoint(&mut self) -> Result<()> {
        self.flush_log()?;
        if let Some(dir) = self.checkpoint_dir.clone() {
            self.save_checkpoint(&dir)?;
        }
        Ok(())
    }

    pub fn save_checkpoint(&mut self, dir: &Path) -> Result<Manifest> {
        self.flush_log()?;
        let optimizers: Vec<(&str, &Adam)> = OPTIMIZER_NAMES
            .into_iter()
            .zip([&self.opt_gen, &self.opt_d, &self.opt_ref])
            .collect();
        checkpoint::save_checkpoint(
            dir,
            &self.models,
            &SaveContext {
                state: self.state,
                train: Some(&self.config),
                data: self.source.as_ref(),
                optimizers: &optimizers,
            },
        )
    }

    fn guard(&mut self, stage: u8, iteration: u64, term: &str, value: f64) -> Result<()> {
        if value.is_finite() && value.abs() <= self.config.divergence_threshold {
            return Ok(());
        }
        if let Some(dir) = self.checkpoint_dir.clone() {
            let dump = dir.with_file_name(format!(
                "{}-diverged",
                dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
            ));
            if let Err(e) = self.save_checkpoint(&dump) {
                warn!("could not dump state after divergence: {e}");
            }
        }
        Err(JokrError::DivergenceDetected {
            iteration,
            term: format!("stage{stage}/{term}"),
            value,
        })
    }

    fn record(&mut self, stage: u8, iter: u64, named: &[(&str, f64)]) -> Result<()> {
        let every = self.config.log_interval;
        if every == 0 || !iter.is_multiple_of(every) {
            return Ok(());
        }
        for (term, value) in named {
            let rec = LossRecord {
                stage,
                iter,
                term: term.to_string(),
                value: *value,
            };
            if let Some(f) = self.log_file.as_mut() {
                serde_json::to_writer(&mut *f, &rec)?;
                f.write_all(b"\n")?;
            }
            self.records.push(rec);
        }
        Ok(())
    }

    fn flush_log(&mut self) -> Result<()> {
        if let Some(f) = self.log_file.as_mut() {
            f.flush()?;
        }
        Ok(())
    }
}
