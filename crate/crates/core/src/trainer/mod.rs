//! Optimisation loop: seeded batching, Adam on a cosine schedule, per-epoch
//! validation, best/last checkpoints, early stopping and optional
//! reduced-precision compute with dynamic loss scaling.

mod adam;
mod checkpoint;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{collect_grads, Adam, AdamConfig, LossScaler};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainState, FORMAT, VERSION};

use crate::augment::{apply_paired, sample_seed, AugmentPipeline};
use crate::dataset::{Manifest, Sample, Split};
use crate::error::{Error, Result};
use crate::metrics::{confusion, metrics_from_counts, ConfusionCounts};
use crate::model::{ForwardOptions, SegmentationModel};
use crate::objective::{cosine_lr, loss_tensor, scalar, ScheduleConfig};
use crate::postprocess::binarize;
use crate::raster::{ImageTensor, MaskTensor, ProbMap};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
/// Smallest validation IoU gain that counts as an improvement.
pub const MIN_IMPROVEMENT: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub adam: AdamConfig,
    pub lr_max: f64,
    pub lr_min: f64,
    pub mixed_precision: bool,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    /// JSON-lines epoch log; not written when unset.
    pub log_path: Option<PathBuf>,
    /// Binarisation threshold used during validation.
    pub val_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 300,
            early_stop_patience: 20,
            adam: AdamConfig::default(),
            lr_max: ScheduleConfig::DEFAULT_LR_MAX,
            lr_min: ScheduleConfig::DEFAULT_LR_MIN,
            mixed_precision: false,
            seed: 0,
            checkpoint_dir: PathBuf::from("checkpoints"),
            log_path: None,
            val_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.early_stop_patience == 0 {
            return Err(Error::InvalidArgument(
                "batch_size, max_epochs and early_stop_patience must be >= 1".into(),
            ));
        }
        self.adam.validate()?;
        ScheduleConfig {
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            total_steps: 1,
        }
        .validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_bce: f64,
    pub train_dice: f64,
    pub val_iou: f64,
    pub val_f1: f64,
    /// Rate used by the epoch's last optimizer step.
    pub lr: f64,
    pub wall_time: f64,
    pub best_val_iou: f64,
    pub improved: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_scale: Option<f64>,
}

/// Patience counter over strictly improving scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub since_improvement: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::NEG_INFINITY,
            since_improvement: 0,
        }
    }

    /// Returns whether `score` improved on the best so far.
    pub fn observe(&mut self, score: f64) -> bool {
        if score >= self.best + MIN_IMPROVEMENT {
            self.best = score;
            self.since_improvement = 0;
            true
        } else {
            self.since_improvement += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_improvement >= self.patience
    }
}

/// Anything that maps images to per-pixel probabilities.
pub trait Predictor {
    fn predict(&self, images: &[ImageTensor]) -> Result<Vec<ProbMap>>;
}

pub fn images_to_tensor(images: &[ImageTensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::shape(format!("{h}x{w}"), format!("{}x{}", img.height(), img.width())));
        }
        data.extend(img.to_planar());
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), &Device::Cpu)?)
}

fn masks_to_tensor(masks: &[MaskTensor]) -> Result<Tensor> {
    let (h, w) = (masks[0].height(), masks[0].width());
    let data: Vec<f32> = masks.iter().flat_map(|m| m.data().iter().map(|&v| v as f32)).collect();
    Ok(Tensor::from_vec(data, (masks.len(), 1, h, w), &Device::Cpu)?)
}

impl Predictor for SegmentationModel {
    fn predict(&self, images: &[ImageTensor]) -> Result<Vec<ProbMap>> {
        let x = images_to_tensor(images)?;
        let (_, _, h, w) = x.dims4()?;
        let y = self.forward_t(&x, ForwardOptions::eval())?;
        let flat: Vec<f32> = y.flatten_all()?.to_vec1()?;
        flat.chunks_exact(h * w)
            .map(|c| ProbMap::new(h, w, c.to_vec()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub iou: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
}

/// Pooled IoU/F1 of `predictor` on `samples` after the (deterministic)
/// validation pipeline, binarised at `threshold`.
pub fn validate(
    predictor: &dyn Predictor,
    samples: &[Sample],
    pipeline: &AugmentPipeline,
    threshold: f64,
    batch_size: usize,
) -> Result<ValMetrics> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("validation split is empty".into()));
    }
    let mut counts = ConfusionCounts::default();
    for chunk in samples.chunks(batch_size.max(1)) {
        let mut images = Vec::with_capacity(chunk.len());
        let mut masks = Vec::with_capacity(chunk.len());
        for s in chunk {
            let (img, mask) = s.load()?;
            let (img, mask) = apply_paired(pipeline, &img, &mask, 0)?;
            images.push(img);
            masks.push(mask);
        }
        for (map, mask) in predictor.predict(&images)?.iter().zip(&masks) {
            counts += confusion(&binarize(map, threshold), mask)?;
        }
    }
    let report = metrics_from_counts(&counts)?;
    Ok(ValMetrics {
        iou: report.iou,
        f1: report.f1,
        counts,
    })
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub records: Vec<EpochRecord>,
    pub best_iou: f64,
    pub stopped_early: bool,
}

/// Per-epoch validation hook; the default runs [`validate`].
pub type Validator<'a> = dyn FnMut(&SegmentationModel) -> Result<ValMetrics> + 'a;

/// Trains on the manifest's train split and validates on its val split.
pub fn fit(
    model: &SegmentationModel,
    manifest: &Manifest,
    train_pipeline: &AugmentPipeline,
    val_pipeline: &AugmentPipeline,
    config: &TrainConfig,
) -> Result<FitOutcome> {
    let train = manifest.split(Split::Train);
    let val = manifest.split(Split::Val);
    let mut validator = default_validator(&val, val_pipeline, config);
    fit_samples(model, &train, train_pipeline, config, &mut validator)
}

pub fn default_validator<'a>(
    val: &'a [Sample],
    pipeline: &'a AugmentPipeline,
    config: &TrainConfig,
) -> impl FnMut(&SegmentationModel) -> Result<ValMetrics> + 'a {
    let (threshold, batch) = (config.val_threshold, config.batch_size);
    move |m: &SegmentationModel| validate(m, val, pipeline, threshold, batch)
}

/// Trains from the model's current weights with a custom validator.
pub fn fit_samples(
    model: &SegmentationModel,
    train: &[Sample],
    train_pipeline: &AugmentPipeline,
    config: &TrainConfig,
    validator: &mut Validator<'_>,
) -> Result<FitOutcome> {
    Session::new(model, train, train_pipeline, config, None)?.run(validator)
}

/// Continues a run from a checkpoint written by a previous fit; epoch
/// numbering, schedule position, optimizer moments and patience carry over.
pub fn resume_samples(
    checkpoint: Checkpoint,
    train: &[Sample],
    train_pipeline: &AugmentPipeline,
    config: &TrainConfig,
    validator: &mut Validator<'_>,
) -> Result<(SegmentationModel, FitOutcome)> {
    let Checkpoint {
        model,
        state,
        optimizer,
    } = checkpoint;
    let outcome = Session::new(&model, train, train_pipeline, config, Some((state, optimizer)))?.run(validator)?;
    Ok((model, outcome))
}

struct Session<'a> {
    model: &'a SegmentationModel,
    train: &'a [Sample],
    pipeline: &'a AugmentPipeline,
    config: TrainConfig,
    schedule: ScheduleConfig,
    steps_per_epoch: usize,
    batch_size: usize,
    adam: Adam,
    scaler: Option<LossScaler>,
    /// Index of the next optimizer step.
    next_step: usize,
    first_epoch: usize,
    stopper: EarlyStopping,
}

impl<'a> Session<'a> {
    fn new(
        model: &'a SegmentationModel,
        train: &'a [Sample],
        pipeline: &'a AugmentPipeline,
        config: &TrainConfig,
        resume: Option<(TrainState, BTreeMap<String, Tensor>)>,
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::InvalidArgument("training split is empty".into()));
        }
        let batch_size = if config.batch_size > train.len() {
            log::warn!(
                "batch size {} exceeds {} training samples; using {}",
                config.batch_size,
                train.len(),
                train.len()
            );
            train.len()
        } else {
            config.batch_size
        };
        let steps_per_epoch = train.len() / batch_size;
        let schedule = ScheduleConfig {
            lr_max: config.lr_max,
            lr_min: config.lr_min,
            total_steps: config.max_epochs * steps_per_epoch,
        };
        let mut adam = Adam::new(config.adam, model.params())?;
        let mut scaler = config.mixed_precision.then(LossScaler::new);
        let mut stopper = EarlyStopping::new(config.early_stop_patience);
        let (next_step, first_epoch) = match resume {
            None => (0, 1),
            Some((state, optimizer)) => {
                adam.restore(&optimizer, state.adam_updates)?;
                if config.mixed_precision {
                    scaler = Some(state.loss_scaler.unwrap_or_default());
                }
                stopper.best = state.best_iou;
                stopper.since_improvement = state.epochs_since_improvement;
                (state.step + 1, state.epoch + 1)
            }
        };
        Ok(Self {
            model,
            train,
            pipeline,
            config: config.clone(),
            schedule,
            steps_per_epoch,
            batch_size,
            adam,
            scaler,
            next_step,
            first_epoch,
            stopper,
        })
    }

    fn ckpt_path(&self, name: &str) -> PathBuf {
        self.config.checkpoint_dir.join(name)
    }

    fn run(mut self, validator: &mut Validator<'_>) -> Result<FitOutcome> {
        let mut log = match &self.config.log_path {
            Some(path) => Some(open_log(path, self.first_epoch > 1)?),
            None => None,
        };
        let mut records = Vec::new();
        let mut stopped_early = self.stopper.should_stop();
        for epoch in self.first_epoch..=self.config.max_epochs {
            if stopped_early {
                break;
            }
            let start = Instant::now();
            let (loss, bce, dice, lr) = self.train_epoch(epoch)?;
            let val = validator(self.model)?;
            let improved = self.stopper.observe(val.iou);
            let state = TrainState {
                epoch,
                step: self.next_step - 1,
                best_iou: self.stopper.best,
                epochs_since_improvement: self.stopper.since_improvement,
                adam_updates: self.adam.updates(),
                loss_scaler: self.scaler,
            };
            if improved {
                save_checkpoint(&self.ckpt_path(BEST_CHECKPOINT), self.model, &self.adam, &state)?;
            }
            save_checkpoint(&self.ckpt_path(LAST_CHECKPOINT), self.model, &self.adam, &state)?;
            let record = EpochRecord {
                epoch,
                train_loss: loss,
                train_bce: bce,
                train_dice: dice,
                val_iou: val.iou,
                val_f1: val.f1,
                lr,
                wall_time: start.elapsed().as_secs_f64(),
                best_val_iou: self.stopper.best,
                improved,
                loss_scale: self.scaler.map(|s| s.scale),
            };
            log::info!(
                "epoch {epoch}: loss {:.4} val IoU {:.4} F1 {:.4} lr {:.2e}",
                record.train_loss,
                record.val_iou,
                record.val_f1,
                record.lr
            );
            if let Some((path, file)) = log.as_mut() {
                writeln!(file, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(path.as_path(), e))?;
            }
            records.push(record);
            stopped_early = self.stopper.should_stop();
        }
        Ok(FitOutcome {
            best_checkpoint: self.ckpt_path(BEST_CHECKPOINT),
            last_checkpoint: self.ckpt_path(LAST_CHECKPOINT),
            records,
            best_iou: self.stopper.best,
            stopped_early,
        })
    }

    /// One pass over shuffled, drop-last batches. Returns mean loss terms and the last lr.
    fn train_epoch(&mut self, epoch: usize) -> Result<(f64, f64, f64, f64)> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(self.config.seed, epoch, usize::MAX)));
        let opts = ForwardOptions {
            train: true,
            dtype: if self.config.mixed_precision {
                DType::F16
            } else {
                DType::F32
            },
        };
        let (mut sum, mut sum_bce, mut sum_dice, mut lr) = (0.0, 0.0, 0.0, self.config.lr_max);
        for (batch_index, batch) in order.chunks_exact(self.batch_size).enumerate() {
            lr = cosine_lr(self.next_step, &self.schedule)?;
            let mut images = Vec::with_capacity(batch.len());
            let mut masks = Vec::with_capacity(batch.len());
            for &i in batch {
                let (img, mask) = self.train[i].load()?;
                let (img, mask) = apply_paired(self.pipeline, &img, &mask, sample_seed(self.config.seed, epoch, i))?;
                images.push(img);
                masks.push(mask);
            }
            let x = images_to_tensor(&images)?;
            let y = masks_to_tensor(&masks)?;
            let probs = self.model.forward_t(&x, opts)?;
            let (loss, bce, dice) = loss_tensor(&probs, &y)?;
            let value = scalar(&loss)?;
            let non_finite = Error::NonFiniteLoss {
                epoch,
                batch: batch_index,
                lr,
            };
            if !value.is_finite() {
                return Err(non_finite);
            }
            let scale = self.scaler.map_or(1.0, |s| s.scale);
            let grads = if scale == 1.0 {
                loss.backward()?
            } else {
                loss.affine(scale, 0.0)?.backward()?
            };
            match (collect_grads(self.model.params(), &grads, scale)?, self.scaler.as_mut()) {
                (Some(g), scaler) => {
                    self.adam.step(self.model.params(), &g, lr)?;
                    if let Some(s) = scaler {
                        s.update(true);
                    }
                }
                (None, Some(s)) => {
                    log::warn!("gradient overflow at loss scale {}; skipping step", s.scale);
                    s.update(false);
                }
                (None, None) => return Err(non_finite),
            }
            self.next_step += 1;
            sum += value;
            sum_bce += scalar(&bce)?;
            sum_dice += scalar(&dice)?;
        }
        let n = self.steps_per_epoch as f64;
        Ok((sum / n, sum_bce / n, sum_dice / n, lr))
    }
}

fn open_log(path: &Path, append: bool) -> Result<(PathBuf, std::fs::File)> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok((path.to_path_buf(), file))
}

pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_counts_strict_improvements() {
        let mut s = EarlyStopping::new(2);
        assert!(s.observe(0.3));
        assert!(!s.observe(0.3 + 0.5e-5));
        assert!(!s.should_stop());
        assert!(s.observe(0.31));
        assert!(!s.observe(0.2));
        assert!(!s.observe(0.31));
        assert!(s.should_stop());
    }

    #[test]
    fn constant_score_stops_after_patience_plus_one() {
        let mut s = EarlyStopping::new(2);
        let mut epochs = 0;
        while !s.should_stop() {
            s.observe(0.0);
            epochs += 1;
        }
        assert_eq!(epochs, 3);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            lr_min: 1.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn default_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.max_epochs, c.early_stop_patience), (32, 300, 20));
        assert_eq!((c.lr_max, c.lr_min), (1e-4, 1e-6));
    }
}
