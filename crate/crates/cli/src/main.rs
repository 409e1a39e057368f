use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use detr_kit::annotation::{
    annotate_glottis, annotate_nostril, write_coco, write_synthetic, BoxMode, SynthConfig, DEFAULT_NOSTRIL_POINTS,
};
use detr_kit::eval::{evaluate, read_results, write_eval, write_results};
use detr_kit::model::load_checkpoint;
use detr_kit::selfcheck::{self, Report};
use detr_kit::train::{load_dataset, predict, run_training, RunConfig};

#[derive(Parser)]
#[command(name = "detr-kit", version, about = "Landmark detection with deformable attention and a semantic aligner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a COCO file of nostril boxes from keypoint files.
    AnnotateNostril(NostrilArgs),
    /// Build a COCO file of glottis boxes from segmentation masks.
    AnnotateGlottis(GlottisArgs),
    /// Write a synthetic shapes dataset (images plus annotations.json).
    Synth(SynthArgs),
    /// Train a detector.
    Train(TrainArgs),
    /// Evaluate a checkpoint or a predictions file against ground truth.
    Eval(EvalArgs),
    /// Run the numeric self-checks and print a pass/fail table.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args)]
struct NostrilArgs {
    /// Directory of `.pts` keypoint files.
    #[arg(long)]
    keypoints: PathBuf,
    /// Directory of images sharing the keypoint file stems.
    #[arg(long)]
    images: PathBuf,
    /// Box width in pixels around each nostril point (20 suits 384x286 faces).
    #[arg(long)]
    box_w: f64,
    /// Box height in pixels (14 suits 384x286 faces).
    #[arg(long)]
    box_h: f64,
    /// Zero-based keypoint indices to expand into boxes.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_NOSTRIL_POINTS)]
    points: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GlottisArgs {
    /// Directory of binary PGM masks.
    #[arg(long)]
    masks: PathBuf,
    /// `global` (one box per mask) or `component` (one per 8-connected blob).
    #[arg(long, default_value = "global")]
    mode: BoxMode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// First image and annotation id, to keep splits disjoint.
    #[arg(long, default_value_t = 1)]
    first_id: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr_backbone: Option<f64>,
    #[arg(long)]
    lr_detector: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training annotations (COCO JSON).
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    train_images: Option<PathBuf>,
    /// Validation annotations (COCO JSON).
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    val_images: Option<PathBuf>,
    /// Output directory for the metrics log and checkpoints.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Ground-truth annotations (COCO JSON).
    #[arg(long)]
    annotations: PathBuf,
    /// Image directory; defaults to the annotation file's directory.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Detections in COCO results format, evaluated as given.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Where to write the metrics JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelfcheckArgs {
    /// Random instances per gradient check.
    #[arg(long, default_value_t = 20)]
    instances: usize,
    /// Random configurations per oracle comparison.
    #[arg(long, default_value_t = 100)]
    configs: usize,
    #[arg(long, hide = true)]
    inject_bilinear_fault: bool,
}

fn image_dir(annotations: &Path, images: Option<PathBuf>) -> PathBuf {
    images.unwrap_or_else(|| annotations.parent().map(Path::to_path_buf).unwrap_or_default())
}

fn annotate_nostril_cmd(a: NostrilArgs) -> Result<bool> {
    let ds = annotate_nostril(&a.keypoints, &a.images, a.box_w, a.box_h, &a.points)?;
    write_coco(&ds, &a.out)?;
    println!("{} images, {} boxes -> {}", ds.images.len(), ds.annotations.len(), a.out.display());
    Ok(true)
}

fn annotate_glottis_cmd(a: GlottisArgs) -> Result<bool> {
    let ds = annotate_glottis(&a.masks, a.mode)?;
    write_coco(&ds, &a.out)?;
    println!("{} images, {} boxes -> {}", ds.images.len(), ds.annotations.len(), a.out.display());
    Ok(true)
}

fn synth_cmd(a: SynthArgs) -> Result<bool> {
    let cfg = SynthConfig {
        seed: a.seed,
        count: a.count,
        first_id: a.first_id,
        ..SynthConfig::default()
    };
    let ds = write_synthetic(&cfg, &a.out)?;
    println!("{} images, {} boxes -> {}", ds.images.len(), ds.annotations.len(), a.out.display());
    Ok(true)
}

fn train_cmd(a: TrainArgs) -> Result<bool> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr_backbone {
        cfg.lr_backbone = v;
    }
    if let Some(v) = a.lr_detector {
        cfg.lr_detector = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if a.train.is_some() {
        cfg.train_annotations = a.train;
    }
    if a.train_images.is_some() {
        cfg.train_images = a.train_images;
    }
    if a.val.is_some() {
        cfg.val_annotations = a.val;
    }
    if a.val_images.is_some() {
        cfg.val_images = a.val_images;
    }
    if let Some(v) = a.out {
        cfg.out_dir = v;
    }
    if cfg.train_annotations.is_none() {
        bail!("no training annotations: pass --train or set train_annotations in the config");
    }
    let out_dir = cfg.out_dir.clone();
    let outcome = run_training(cfg)?;
    if let Some(loss) = outcome.epoch_losses.last() {
        println!("final epoch loss {loss:.6}");
    }
    if let Some((epoch, r)) = outcome.evals.last() {
        println!("validation after epoch {epoch}:\n{}", r.table());
    }
    println!("checkpoints and metrics in {}", out_dir.display());
    Ok(true)
}

fn eval_cmd(a: EvalArgs) -> Result<bool> {
    let preds = match (&a.checkpoint, &a.predictions) {
        (_, Some(p)) => read_results(p)?,
        (Some(ckpt), None) => {
            let (det, store) = load_checkpoint(ckpt)?;
            let data = load_dataset(&a.annotations, &image_dir(&a.annotations, a.images.clone()), &det.config)
                .with_context(|| format!("checkpoint {} does not fit this dataset", ckpt.display()))?;
            let preds = predict(&det, &store, &data)?;
            write_results(&preds, &a.out.with_extension("detections.json"))?;
            preds
        }
        (None, None) => unreachable!("clap requires one of --checkpoint / --predictions"),
    };
    let gt = detr_kit::annotation::read_coco(&a.annotations)?;
    let result = evaluate(&preds, &gt)?;
    print!("{}", result.table());
    write_eval(&result, &a.out)?;
    info!("metrics written to {}", a.out.display());
    Ok(true)
}

fn selfcheck_cmd(a: SelfcheckArgs) -> Result<bool> {
    detr_kit::deform::set_bilinear_fault(a.inject_bilinear_fault);
    let checks = selfcheck::run(a.instances, a.configs)?;
    print!("{}", Report(&checks));
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {} failed", checks.len(), failed);
    Ok(failed == 0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::AnnotateNostril(a) => annotate_nostril_cmd(a),
        Command::AnnotateGlottis(a) => annotate_glottis_cmd(a),
        Command::Synth(a) => synth_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Selfcheck(a) => selfcheck_cmd(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
