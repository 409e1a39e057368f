//! Training loop, dataset loading and inference.

mod data;

pub use data::{load_dataset, Dataset, Sample};

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::eval::{evaluate, CocoResult, EvalResult};
use crate::loss::set_loss;
use crate::matching::LossWeights;
use crate::model::{save_checkpoint, Detector, DetectorConfig};
use crate::nn::Ctx;
use crate::tensor::{clip_grad_norm, Adam, AdamConfig, ParamId, ParamStore, Tape, Tensor};

/// Environment variable capping the worker threads of a training step.
pub const THREADS_ENV: &str = "DETR_KIT_THREADS";

/// Everything a training run needs. Serialized as the JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: DetectorConfig,
    pub loss: LossWeights,
    pub lr_backbone: f64,
    pub lr_detector: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// From this epoch on, both learning rates are multiplied by 0.1.
    pub lr_drop: Option<usize>,
    pub train_annotations: Option<PathBuf>,
    /// Directory holding the training images; defaults to the annotation
    /// file's directory.
    pub train_images: Option<PathBuf>,
    pub val_annotations: Option<PathBuf>,
    pub val_images: Option<PathBuf>,
    /// Evaluate on the validation set every this many epochs (0: never).
    pub eval_every: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            model: DetectorConfig::desk(),
            loss: LossWeights::default(),
            lr_backbone: adam.lr_backbone,
            lr_detector: adam.lr_detector,
            epochs: 24,
            batch_size: 4,
            seed: 0,
            clip_norm: 0.1,
            lr_drop: None,
            train_annotations: None,
            train_images: None,
            val_annotations: None,
            val_images: None,
            eval_every: 1,
            out_dir: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::contract("batch size must be positive"));
        }
        for (name, lr) in [("lr_backbone", self.lr_backbone), ("lr_detector", self.lr_detector)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::contract(format!("{name} = {lr} is not a valid learning rate")));
            }
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return Err(Error::contract(format!("clip_norm = {} is invalid", self.clip_norm)));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        self.adam_at(0)
    }

    /// Optimizer settings in effect during `epoch`.
    pub fn adam_at(&self, epoch: usize) -> AdamConfig {
        let factor = match self.lr_drop {
            Some(e) if epoch >= e => 0.1,
            _ => 1.0,
        };
        AdamConfig {
            lr_backbone: self.lr_backbone * factor,
            lr_detector: self.lr_detector * factor,
            ..AdamConfig::default()
        }
    }
}

/// Worker threads for per-image gradient computation: `DETR_KIT_THREADS`
/// if set, otherwise the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Loss terms of one optimizer step, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

struct ImageResult {
    loss: f64,
    class: f64,
    l1: f64,
    giou: f64,
    grads: Vec<(ParamId, Tensor)>,
}

fn image_loss(det: &Detector, store: &ParamStore, sample: &Sample, weights: &LossWeights) -> Result<ImageResult> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store);
    let out = det.forward(&ctx, tape.constant(sample.image.clone()))?;
    let loss = match set_loss(&out.predictions, &sample.targets, det.config.num_classes, weights) {
        Ok(l) => l,
        // non-finite predictions poison the matching cost; report them as a
        // non-finite loss so the caller can dump the batch
        Err(Error::NonFinite(_)) => {
            return Ok(ImageResult {
                loss: f64::NAN,
                class: f64::NAN,
                l1: f64::NAN,
                giou: f64::NAN,
                grads: Vec::new(),
            })
        }
        Err(e) => return Err(e),
    };
    let (class, l1, giou) = loss.components();
    let value = loss.total.item();
    let grads = if value.is_finite() {
        tape.backward(loss.total)?.param_grads()
    } else {
        Vec::new()
    };
    Ok(ImageResult {
        loss: value,
        class,
        l1,
        giou,
        grads,
    })
}

/// Loss and gradients of every sample of a batch, in batch order. Images
/// are spread over `threads` scoped workers; the result does not depend on
/// the thread count.
fn batch_losses(
    det: &Detector,
    store: &ParamStore,
    batch: &[&Sample],
    weights: &LossWeights,
    threads: usize,
) -> Result<Vec<ImageResult>> {
    let threads = threads.clamp(1, batch.len().max(1));
    if threads == 1 {
        return batch.iter().map(|s| image_loss(det, store, s, weights)).collect();
    }
    let chunk = batch.len().div_ceil(threads);
    let parts: Vec<Result<Vec<ImageResult>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = batch
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|s| image_loss(det, store, s, weights))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(batch.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Receives training progress. Step and epoch records are also what the
/// JSONL metrics log contains.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) {}
    fn on_epoch(&mut self, _epoch: usize, _mean_loss: f64, _eval: Option<&EvalResult>) {}
}

impl TrainObserver for () {}

pub struct Trainer {
    pub config: RunConfig,
    pub detector: Detector,
    pub store: ParamStore,
    pub optimizer: Adam,
    pub threads: usize,
    step: usize,
}

/// Summary of a finished run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: Vec<StepRecord>,
    pub epoch_losses: Vec<f64>,
    pub evals: Vec<(usize, EvalResult)>,
    /// Parameters with the best validation mAP, or the lowest epoch loss
    /// when there is no validation set.
    pub best: ParamStore,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let (detector, store) = Detector::new(config.model.clone(), config.seed)?;
        let optimizer = Adam::new(config.adam(), &store);
        Ok(Self {
            config,
            detector,
            store,
            optimizer,
            threads: worker_threads(),
            step: 0,
        })
    }

    /// One optimizer step on `batch`. A non-finite loss aborts with
    /// [`Error::NonFinite`]; when `dump_dir` is given, the offending batch is
    /// described in `nonfinite_batch.json` there first.
    pub fn train_step(&mut self, epoch: usize, batch: &[&Sample], dump_dir: Option<&Path>) -> Result<StepRecord> {
        let results = batch_losses(&self.detector, &self.store, batch, &self.config.loss, self.threads)?;
        let n = batch.len() as f64;
        if results.iter().any(|r| !r.loss.is_finite()) {
            let detail: Vec<_> = batch
                .iter()
                .zip(&results)
                .map(|(s, r)| {
                    json!({
                        "image_id": s.image_id,
                        "file_name": s.file_name,
                        "loss": format!("{}", r.loss),
                        "class": format!("{}", r.class),
                        "l1": format!("{}", r.l1),
                        "giou": format!("{}", r.giou),
                        "targets": s.targets.boxes.iter().zip(&s.targets.labels)
                            .map(|(b, l)| json!({"label": l, "cxcywh": b.to_array()}))
                            .collect::<Vec<_>>(),
                    })
                })
                .collect();
            let mut msg = format!("loss at epoch {epoch}, step {}", self.step);
            if let Some(dir) = dump_dir {
                let path = dir.join("nonfinite_batch.json");
                let body = json!({"epoch": epoch, "step": self.step, "images": detail});
                fs::write(&path, serde_json::to_string_pretty(&body)?).map_err(|e| Error::io(&path, e))?;
                msg.push_str(&format!(" (batch written to {})", path.display()));
            }
            return Err(Error::NonFinite(msg));
        }
        self.store.zero_grad();
        for r in &results {
            for (id, g) in &r.grads {
                self.store.accumulate_grad(*id, g);
            }
        }
        self.store.scale_grads(1.0 / n);
        let grad_norm = if self.config.clip_norm > 0.0 {
            clip_grad_norm(&mut self.store, self.config.clip_norm)
        } else {
            clip_grad_norm(&mut self.store, f64::INFINITY)
        };
        self.optimizer.config = self.config.adam_at(epoch);
        self.optimizer.step(&mut self.store)?;
        let mean = |f: fn(&ImageResult) -> f64| results.iter().map(f).sum::<f64>() / n;
        let record = StepRecord {
            epoch,
            step: self.step,
            loss: mean(|r| r.loss),
            class: mean(|r| r.class),
            l1: mean(|r| r.l1),
            giou: mean(|r| r.giou),
            grad_norm,
        };
        self.step += 1;
        Ok(record)
    }

    /// Shuffled batch order of one epoch; depends only on seed and epoch.
    pub fn epoch_order(&self, epoch: usize, len: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(epoch as u64 + 1)));
        order.shuffle(&mut rng);
        order
    }

    /// Run all configured epochs over `train`.
    pub fn fit(
        &mut self,
        train: &Dataset,
        val: Option<&Dataset>,
        observer: &mut dyn TrainObserver,
        dump_dir: Option<&Path>,
    ) -> Result<TrainOutcome> {
        if train.samples.is_empty() {
            return Err(Error::contract("training set is empty"));
        }
        let mut steps = Vec::new();
        let mut epoch_losses = Vec::new();
        let mut evals = Vec::new();
        let mut best = self.store.clone();
        let mut best_score = f64::NEG_INFINITY;
        for epoch in 0..self.config.epochs {
            let order = self.epoch_order(epoch, train.samples.len());
            let mut total = 0.0;
            for idx in order.chunks(self.config.batch_size) {
                let batch: Vec<&Sample> = idx.iter().map(|&i| &train.samples[i]).collect();
                let record = self.train_step(epoch, &batch, dump_dir)?;
                observer.on_step(&record);
                total += record.loss * batch.len() as f64;
                steps.push(record);
            }
            let mean_loss = total / train.samples.len() as f64;
            epoch_losses.push(mean_loss);
            let eval = match val {
                Some(v) if self.config.eval_every > 0 && (epoch + 1) % self.config.eval_every == 0 => {
                    Some(evaluate(&predict(&self.detector, &self.store, v)?, &v.coco)?)
                }
                _ => None,
            };
            observer.on_epoch(epoch, mean_loss, eval.as_ref());
            let score = match (&eval, val) {
                (Some(e), _) => e.map,
                (None, Some(_)) => f64::NEG_INFINITY,
                (None, None) => -mean_loss,
            };
            if score > best_score {
                best_score = score;
                best = self.store.clone();
            }
            info!("epoch {epoch}: loss {mean_loss:.5}");
            if let Some(e) = eval {
                evals.push((epoch, e));
            }
        }
        Ok(TrainOutcome {
            steps,
            epoch_losses,
            evals,
            best,
        })
    }
}

/// Final-layer detections for every image of `data`, as COCO results in
/// pixel coordinates.
pub fn predict(det: &Detector, store: &ParamStore, data: &Dataset) -> Result<Vec<CocoResult>> {
    let categories: Vec<u64> = data.coco.categories.iter().map(|c| c.id).collect();
    let mut out = Vec::new();
    for s in &data.samples {
        for d in det.detect(store, &s.image)? {
            let b = d.bbox.to_pixel_xywh(s.width as f64, s.height as f64);
            out.push(CocoResult {
                image_id: s.image_id,
                category_id: categories[d.label],
                bbox: b.to_array(),
                score: d.score,
            });
        }
    }
    Ok(out)
}

/// JSONL metrics writer: one object per step and per epoch.
pub struct JsonlLog {
    out: BufWriter<File>,
    config: RunConfig,
    path: PathBuf,
    error: Option<std::io::Error>,
}

impl JsonlLog {
    pub fn create(path: &Path, config: &RunConfig) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
            config: config.clone(),
            path: path.to_path_buf(),
            error: None,
        })
    }

    fn line(&mut self, value: serde_json::Value) {
        if self.error.is_none() {
            if let Err(e) = writeln!(self.out, "{value}") {
                self.error = Some(e);
            }
        }
    }

    pub fn finish(mut self) -> Result<()> {
        if let Some(e) = self.error.take() {
            return Err(Error::io(&self.path, e));
        }
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

impl TrainObserver for JsonlLog {
    fn on_step(&mut self, r: &StepRecord) {
        let adam = self.config.adam_at(r.epoch);
        self.line(json!({
            "kind": "step",
            "epoch": r.epoch,
            "step": r.step,
            "loss": r.loss,
            "class": r.class,
            "l1": r.l1,
            "giou": r.giou,
            "grad_norm": r.grad_norm,
            "lr_backbone": adam.lr_backbone,
            "lr_detector": adam.lr_detector,
        }));
    }

    fn on_epoch(&mut self, epoch: usize, mean_loss: f64, eval: Option<&EvalResult>) {
        let mut v = json!({"kind": "epoch", "epoch": epoch, "loss": mean_loss});
        if let Some(e) = eval {
            v["map"] = json!(e.map);
            v["map50"] = json!(e.map50);
            v["map75"] = json!(e.map75);
        }
        self.line(v);
    }
}

/// Train as configured, writing `metrics.jsonl`, `final.json` and
/// `best.json` into the output directory.
pub fn run_training(config: RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let ann = config
        .train_annotations
        .clone()
        .ok_or_else(|| Error::contract("no training annotations configured"))?;
    let images = config.train_images.clone().unwrap_or_else(|| parent_dir(&ann));
    let train = load_dataset(&ann, &images, &config.model)?;
    let val = match &config.val_annotations {
        Some(a) => {
            let dir = config.val_images.clone().unwrap_or_else(|| parent_dir(a));
            Some(load_dataset(a, &dir, &config.model)?)
        }
        None => None,
    };
    let out_dir = config.out_dir.clone();
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut trainer = Trainer::new(config)?;
    let mut log = JsonlLog::create(&out_dir.join("metrics.jsonl"), &trainer.config)?;
    let start = Instant::now();
    let outcome = if trainer.config.epochs == 0 {
        TrainOutcome {
            steps: Vec::new(),
            epoch_losses: Vec::new(),
            evals: Vec::new(),
            best: trainer.store.clone(),
        }
    } else {
        trainer.fit(&train, val.as_ref(), &mut log, Some(&out_dir))?
    };
    log.finish()?;
    save_checkpoint(&out_dir.join("final.json"), &trainer.config.model, &trainer.store)?;
    save_checkpoint(&out_dir.join("best.json"), &trainer.config.model, &outcome.best)?;
    info!("trained {} steps in {:.1?}", outcome.steps.len(), start.elapsed());
    Ok(outcome)
}

fn parent_dir(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

#[cfg(test)]
mod tests;
