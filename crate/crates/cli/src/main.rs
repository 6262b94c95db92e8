use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand, ValueEnum};
use jokr_core::checkpoint::{load_models, Manifest};
use jokr_core::config::ExperimentConfig;
use jokr_core::inference::{edit_frame, encode_png, retarget, synchronize, write_png_sequence, EditRequest, KeypointOverride, RetargetRequest};
use jokr_core::media_io::{load_frames, resize_frame, DatasetTensors, Domain, Frame};
use jokr_core::metrics::{evaluate, DisplacementNormalization};
use jokr_core::models::JokrModels;
use jokr_core::trainer::Trainer;
use jokr_service::{AppState, Session};

#[derive(Parser)]
#[command(name = "jokr", version, about = "Unsupervised cross-domain motion retargeting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from an experiment TOML file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Run only this stage; both run in order by default.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: Option<u8>,
    },
    /// Render one video's motion with the other video's appearance.
    Retarget(RetargetArgs),
    /// Retarget a short clip onto the other domain.
    Sync(RetargetArgs),
    /// Move keypoints of one frame and render the result.
    Edit {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        frame: PathBuf,
        #[arg(long, default_value = "A")]
        domain: Domain,
        /// `index:u,v` in normalized coordinates; repeatable.
        #[arg(long = "move")]
        moves: Vec<KeypointOverride>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the effective keypoints as JSON.
        #[arg(long)]
        keypoints: Option<PathBuf>,
    },
    /// Score a checkpoint on its training videos and write a JSON report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = Normalization::Diagonal)]
        normalization: Normalization,
        /// Dilation radius in pixels for the keypoints-inside check.
        #[arg(long, default_value_t = 2)]
        radius: usize,
        /// Base for relative video paths stored in the checkpoint.
        #[arg(long, default_value = ".")]
        data_root: PathBuf,
    },
    /// Serve the HTTP API.
    Serve {
        /// Checkpoint to load at startup; `POST /model` can load one later.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long, default_value = ".")]
        data_root: PathBuf,
    },
}

#[derive(Args)]
struct RetargetArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Domain whose motion is transferred.
    #[arg(long, default_value = "B")]
    source: Domain,
    /// GIF or image directory; the checkpoint's training video otherwise.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Render the extracted keypoints without the learned affine map.
    #[arg(long)]
    no_affine: bool,
    #[arg(long, default_value = ".")]
    data_root: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Normalization {
    None,
    Diagonal,
}

impl From<Normalization> for DisplacementNormalization {
    fn from(n: Normalization) -> Self {
        match n {
            Normalization::None => DisplacementNormalization::None,
            Normalization::Diagonal => DisplacementNormalization::Diagonal,
        }
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { config, resume, stage } => train(&config, resume.as_deref(), stage),
        Command::Retarget(args) => run_retarget(&args, false),
        Command::Sync(args) => run_retarget(&args, true),
        Command::Edit {
            ckpt,
            frame,
            domain,
            moves,
            out,
            keypoints,
        } => edit(&ckpt, &frame, domain, moves, &out, keypoints.as_deref()),
        Command::Eval {
            ckpt,
            report,
            normalization,
            radius,
            data_root,
        } => eval(&ckpt, &report, normalization.into(), radius, &data_root),
        Command::Serve {
            ckpt,
            port,
            host,
            data_root,
        } => serve(ckpt.as_deref(), SocketAddr::new(host, port), &data_root),
    }
}

fn train(config_path: &Path, resume: Option<&Path>, stage: Option<u8>) -> Result<()> {
    let cfg = ExperimentConfig::from_file(config_path).with_context(|| format!("reading {}", config_path.display()))?;
    let base = match config_path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    // Checkpoints record absolute video paths so later commands find them.
    let base = std::fs::canonicalize(base)?;
    let source = cfg.data.rebased(&base);
    let dataset = source.load(Path::new("."))?;
    std::fs::create_dir_all(&cfg.output_dir)?;

    let trainer = match resume {
        Some(dir) => Trainer::resume_with(dir, dataset, &cfg.model, cfg.train.clone())?,
        None => {
            let models = JokrModels::new(cfg.model, DType::F32, &Device::Cpu)?;
            Trainer::new(models, dataset, cfg.train.clone())?
        }
    };
    let mut trainer = trainer
        .with_source(source)
        .with_log_file(&cfg.log_path())?
        .with_checkpoint_dir(cfg.checkpoint_dir());

    if stage != Some(2) {
        if trainer.state().stage == 2 {
            log::info!("stage 1 already complete");
        } else {
            trainer.train_stage1()?;
        }
    }
    if stage != Some(1) {
        trainer.train_stage2()?;
    }
    log::info!("checkpoint written to {}", cfg.checkpoint_dir().display());
    Ok(())
}

fn load(ckpt: &Path) -> Result<(JokrModels, Manifest)> {
    load_models(ckpt, DType::F32, &Device::Cpu).with_context(|| format!("loading checkpoint {}", ckpt.display()))
}

fn source_frames(manifest: &Manifest, input: Option<&Path>, domain: Domain, data_root: &Path) -> Result<Vec<Frame>> {
    if let Some(path) = input {
        let [h, w] = manifest.resolution;
        return Ok(load_frames(path, (h, w), domain)?);
    }
    let Some(data) = &manifest.data else {
        bail!("checkpoint records no training data; pass --input");
    };
    Ok(data.load(data_root)?.frames(domain).to_vec())
}

fn run_retarget(args: &RetargetArgs, clip: bool) -> Result<()> {
    if clip && args.input.is_none() {
        bail!("sync needs --input with the clip to align");
    }
    let (models, manifest) = load(&args.ckpt)?;
    let frames = source_frames(&manifest, args.input.as_deref(), args.source, &args.data_root)?;
    let req = RetargetRequest {
        source_domain: args.source,
        apply_learned_affine: !args.no_affine,
        frame_range: None,
    };
    let out = if clip {
        synchronize(&models, &frames, &req)?
    } else {
        retarget(&models, &frames, &req)?
    };
    let written = write_png_sequence(&args.out, &out.frames, Some(&out.keypoints))?;
    println!("{} frames written to {}", written.len(), args.out.display());
    Ok(())
}

fn edit(
    ckpt: &Path,
    frame_path: &Path,
    domain: Domain,
    moves: Vec<KeypointOverride>,
    out: &Path,
    keypoints_out: Option<&Path>,
) -> Result<()> {
    let (models, manifest) = load(ckpt)?;
    let [h, w] = manifest.resolution;
    let rgb = image::open(frame_path)
        .with_context(|| format!("reading {}", frame_path.display()))?
        .to_rgb8();
    let img = resize_frame(&rgb, (h, w), 0, domain);
    let (rendered, set) = edit_frame(
        &models,
        &EditRequest {
            frame: img,
            domain,
            overrides: moves,
        },
    )?;
    std::fs::write(out, encode_png(&rendered)?)?;
    let json = set.to_json()?;
    if let Some(path) = keypoints_out {
        std::fs::write(path, &json)?;
    }
    println!("{json}");
    Ok(())
}

fn eval(ckpt: &Path, report_path: &Path, norm: DisplacementNormalization, radius: usize, data_root: &Path) -> Result<()> {
    let (models, manifest) = load(ckpt)?;
    let Some(data) = &manifest.data else {
        bail!("checkpoint records no training data to evaluate on");
    };
    let dataset = data.load(data_root)?;
    let tensors = DatasetTensors::new(&dataset, models.dtype(), models.device())?;
    let report = evaluate(&models, &tensors, &manifest.checkpoint_id, norm, radius)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(parent) = report_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(report_path, &json)?;
    println!("{json}");
    Ok(())
}

fn serve(ckpt: Option<&Path>, addr: SocketAddr, data_root: &Path) -> Result<()> {
    let state = AppState::new(data_root);
    if let Some(dir) = ckpt {
        state.set_session(Session::load(dir, data_root)?);
    }
    tokio::runtime::Runtime::new()?.block_on(jokr_service::serve(state, addr))?;
    Ok(())
}
