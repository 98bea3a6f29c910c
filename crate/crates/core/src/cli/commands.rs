//! Subcommand bodies. Each takes a fully resolved [`RunConfig`] and returns a
//! JSON summary that is printed and recorded in `run.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::RunConfig;
use super::figures;
use crate::augment::{apply_paired, build_pipeline, AugmentPipeline, Mode};
use crate::dataset::{
    load_image, load_manifest_with, make_synthetic, rle_encode, Manifest, Sample, Split, IMAGE_EXTENSIONS,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_set, Aggregation};
use crate::model::{build_model, SegmentationModel};
use crate::postprocess::{grid_search, GridSearchResult, PostprocessParams};
use crate::raster::{ImageTensor, MaskTensor, ProbMap};
use crate::trainer::{
    default_validator, fit_samples, load_checkpoint, read_epoch_log, resume_samples, Predictor, BEST_CHECKPOINT,
    LAST_CHECKPOINT,
};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const CURVES_FILE: &str = "curves.png";
pub const PARAMS_FILE: &str = "postprocess.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFUSION_FILE: &str = "confusion.png";
pub const OVERLAY_DIR: &str = "overlays";
pub const PREDICTION_DIR: &str = "predictions";
pub const MASK_DIR: &str = "masks";
pub const RLE_FILE: &str = "rle.csv";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn synth(cfg: &RunConfig) -> Result<Value> {
    let stems = make_synthetic(&cfg.data.root, &cfg.synthetic)?;
    log::info!("wrote {} synthetic pairs under {}", stems.len(), cfg.data.root.display());
    Ok(json!({
        "root": cfg.data.root,
        "written": stems.len(),
        "negatives": cfg.synthetic.negatives(),
    }))
}

/// Lists the dataset, assigns the split and writes `manifest.csv`.
pub fn prepare(cfg: &RunConfig, synthetic: bool) -> Result<Value> {
    if synthetic {
        synth(cfg)?;
    }
    let (images, masks) = cfg.data.dirs();
    let manifest = load_manifest_with(&images, &masks, &cfg.data.split_options())?;
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join(MANIFEST_FILE);
    manifest.write_csv(&path)?;
    let counts = manifest.counts()?;
    let (n_train, n_val) = (manifest.split(Split::Train).len(), manifest.split(Split::Val).len());
    println!(
        "{} samples ({} with pneumothorax, {} without); split {} train / {} val",
        counts.total, counts.positive, counts.negative, n_train, n_val
    );
    Ok(json!({
        "manifest": path,
        "counts": counts,
        "train": n_train,
        "val": n_val,
    }))
}

/// Reads `manifest.csv` from the output directory, building it first if absent.
pub fn manifest(cfg: &RunConfig) -> Result<Manifest> {
    let path = cfg.output_dir.join(MANIFEST_FILE);
    let (images, masks) = cfg.data.dirs();
    if path.is_file() {
        return Manifest::read_csv(&path, &images, &masks);
    }
    log::info!("{} not found; building it from {}", path.display(), images.display());
    let manifest = load_manifest_with(&images, &masks, &cfg.data.split_options())?;
    create_dir(&cfg.output_dir)?;
    manifest.write_csv(&path)?;
    Ok(manifest)
}

pub fn train(cfg: &RunConfig, resume: bool) -> Result<Value> {
    let manifest = manifest(cfg)?;
    let train = manifest.split(Split::Train);
    let val = manifest.split(Split::Val);
    let train_pipe = cfg.train_pipeline()?;
    let val_pipe = cfg.val_pipeline()?;
    let mut validator = default_validator(&val, &val_pipe, &cfg.train);
    create_dir(&cfg.output_dir)?;

    let result = if resume {
        let path = cfg.train.checkpoint_dir.join(LAST_CHECKPOINT);
        let ck = load_checkpoint(&path)?;
        if ck.model.config().resolution != cfg.model.resolution {
            return Err(Error::Config(format!(
                "checkpoint was trained at {} px but the config asks for {} px",
                ck.model.config().resolution,
                cfg.model.resolution
            )));
        }
        log::info!("resuming from {} after epoch {}", path.display(), ck.state.epoch);
        resume_samples(ck, &train, &train_pipe, &cfg.train, &mut validator).map(|(_, out)| out)
    } else {
        let model = build_model(&cfg.model.resolve())?;
        log::info!(
            "training {:?} ({} parameters) on {} samples, validating on {}",
            model.config().encoder,
            model.num_params(),
            train.len(),
            val.len()
        );
        fit_samples(&model, &train, &train_pipe, &cfg.train, &mut validator)
    };

    // The curve figure is written even when training aborts.
    let log_path = cfg.train.log_path.clone().expect("resolved by RunConfig::resolve_paths");
    let curves = cfg.output_dir.join(CURVES_FILE);
    if log_path.is_file() {
        let records = read_epoch_log(&log_path)?;
        figures::training_curves(&records, &curves)?;
    }
    let outcome = result?;
    if !curves.exists() {
        figures::training_curves(&outcome.records, &curves)?;
    }
    println!(
        "trained {} epochs; best val IoU {:.4}{}",
        outcome.records.len(),
        outcome.best_iou,
        if outcome.stopped_early { " (early stop)" } else { "" }
    );
    Ok(json!({
        "epochs_run": outcome.records.len(),
        "last_epoch": outcome.records.last().map(|r| r.epoch),
        "best_val_iou": outcome.best_iou,
        "stopped_early": outcome.stopped_early,
        "best_checkpoint": outcome.best_checkpoint,
        "last_checkpoint": outcome.last_checkpoint,
        "epoch_log": log_path,
        "curves": curves,
    }))
}

fn checkpoint_path(cfg: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.train.checkpoint_dir.join(BEST_CHECKPOINT))
}

fn load_model(path: &Path) -> Result<SegmentationModel> {
    let ck = load_checkpoint(path)?;
    log::info!("loaded {} (epoch {})", path.display(), ck.state.epoch);
    Ok(ck.model)
}

fn model_pipeline(model: &SegmentationModel) -> Result<AugmentPipeline> {
    build_pipeline(Mode::Val, model.config().resolution, None)
}

/// Resizes an image to the model's input resolution.
fn model_input(pipe: &AugmentPipeline, image: &ImageTensor) -> Result<ImageTensor> {
    let blank = MaskTensor::zeros(image.height(), image.width());
    Ok(apply_paired(pipe, image, &blank, 0)?.0)
}

/// Probability maps at model resolution for each sample, with the full-size masks.
fn predict_samples(
    model: &SegmentationModel,
    samples: &[Sample],
    batch: usize,
) -> Result<Vec<(ProbMap, MaskTensor)>> {
    let pipe = model_pipeline(model)?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let mut inputs = Vec::with_capacity(chunk.len());
        let mut truths = Vec::with_capacity(chunk.len());
        for s in chunk {
            let (image, mask) = s.load()?;
            inputs.push(model_input(&pipe, &image)?);
            truths.push(mask);
        }
        out.extend(model.predict(&inputs)?.into_iter().zip(truths));
    }
    Ok(out)
}

/// Predicts the validation split once and sweeps the threshold grid.
pub fn tune(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Value> {
    let model = load_model(&checkpoint_path(cfg, checkpoint))?;
    let val = manifest(cfg)?.split(Split::Val);
    let pairs = predict_samples(&model, &val, cfg.train.batch_size)?;
    let result = grid_search(&pairs, &cfg.postprocess)?;
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join(PARAMS_FILE);
    result.save(&path)?;
    println!(
        "best BT {:.2}, RT {} -> val IoU {:.4}",
        result.best.binarization_threshold, result.best.removal_threshold, result.best_iou
    );
    Ok(json!({
        "params": path,
        "best": result.best,
        "best_iou": result.best_iou,
        "cells": result.surface.len(),
    }))
}

/// Tuned parameters from `path`, or BT 0.5 / RT 0 when the file is missing.
pub fn load_params(cfg: &RunConfig, path: Option<&Path>) -> Result<PostprocessParams> {
    let path = path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.join(PARAMS_FILE));
    if !path.exists() {
        log::warn!(
            "post-processing parameters {} not found; using BT 0.5, RT 0",
            path.display()
        );
        return Ok(PostprocessParams {
            connectivity: cfg.postprocess.connectivity,
            ..PostprocessParams::default()
        });
    }
    let params = GridSearchResult::load(&path)?.best;
    params.validate()?;
    Ok(params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    #[default]
    Val,
    Train,
    All,
}

/// Evenly spaced picks of `k` indices out of `n`.
pub fn overlay_indices(n: usize, k: usize) -> Vec<usize> {
    let k = k.min(n);
    (0..k).map(|i| i * n / k).collect()
}

pub fn evaluate(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    params_path: Option<&Path>,
    split: EvalSplit,
    overlays: usize,
) -> Result<Value> {
    let model = load_model(&checkpoint_path(cfg, checkpoint))?;
    let params = load_params(cfg, params_path)?;
    let manifest = manifest(cfg)?;
    let samples = match split {
        EvalSplit::Val => manifest.split(Split::Val),
        EvalSplit::Train => manifest.split(Split::Train),
        EvalSplit::All => manifest.samples().to_vec(),
    };
    let maps = predict_samples(&model, &samples, cfg.train.batch_size)?;
    let pairs: Vec<(MaskTensor, MaskTensor)> = maps
        .iter()
        .map(|(map, truth)| (params.apply(map, truth.height(), truth.width()), truth.clone()))
        .collect();
    let report = evaluate_set(&pairs, Aggregation::Pooled)?;

    create_dir(&cfg.output_dir)?;
    let metrics_path = cfg.output_dir.join(METRICS_FILE);
    write_json(&metrics_path, &report)?;
    let confusion_path = cfg.output_dir.join(CONFUSION_FILE);
    figures::confusion_matrix(&report.counts, &confusion_path)?;

    let overlay_dir = cfg.output_dir.join(OVERLAY_DIR);
    if overlay_dir.is_dir() {
        std::fs::remove_dir_all(&overlay_dir).map_err(|e| Error::io(&overlay_dir, e))?;
    }
    let picks = overlay_indices(samples.len(), overlays);
    for &i in &picks {
        let image = samples[i].load_image()?;
        let (pred, truth) = &pairs[i];
        let path = overlay_dir.join(format!("{}.png", samples[i].stem));
        figures::save_overlay(&image, truth, pred, &path)?;
    }
    println!(
        "{} images: IoU {:.4}, F1 {:.4}, precision {:.4}, recall {:.4}, accuracy {:.4}",
        report.n_images, report.iou, report.f1, report.precision, report.recall, report.accuracy
    );
    Ok(json!({
        "split": split,
        "params": params,
        "metrics": metrics_path,
        "report": report,
        "confusion": confusion_path,
        "overlays": picks.len(),
    }))
}

/// Image files named by `inputs`; directories contribute their images sorted by name.
fn expand_inputs(inputs: &[PathBuf]) -> Vec<PathBuf> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .into_iter()
                .flatten()
                .flatten()
                .map(|e| e.path())
                .filter(|f| {
                    f.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                })
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    files
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictFailure {
    pub path: PathBuf,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictSummary {
    pub written: Vec<String>,
    pub failures: Vec<PredictFailure>,
    pub mask_dir: PathBuf,
    pub rle: Option<PathBuf>,
}

/// Writes a post-processed 0/255 mask per input at the input's resolution,
/// plus `rle.csv` when requested. Unreadable inputs are reported and skipped.
pub fn predict(
    cfg: &RunConfig,
    inputs: &[PathBuf],
    checkpoint: Option<&Path>,
    params_path: Option<&Path>,
    out_dir: Option<&Path>,
    rle: bool,
) -> Result<PredictSummary> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("no input images given".into()));
    }
    let model = load_model(&checkpoint_path(cfg, checkpoint))?;
    let params = load_params(cfg, params_path)?;
    let pipe = model_pipeline(&model)?;
    let out_dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.join(PREDICTION_DIR));
    let mask_dir = out_dir.join(MASK_DIR);
    create_dir(&mask_dir)?;
    let rle_path = out_dir.join(RLE_FILE);
    let mut rle_writer = if rle {
        let mut w = csv::Writer::from_path(&rle_path)?;
        w.write_record(["stem", "width", "height", "rle"])?;
        Some(w)
    } else {
        None
    };

    let mut summary = PredictSummary {
        written: Vec::new(),
        failures: Vec::new(),
        mask_dir: mask_dir.clone(),
        rle: rle.then(|| rle_path.clone()),
    };
    let files = expand_inputs(inputs);
    if files.is_empty() {
        return Err(Error::NoSamples(inputs[0].clone()));
    }
    for chunk in files.chunks(cfg.train.batch_size.max(1)) {
        let mut loaded = Vec::with_capacity(chunk.len());
        for path in chunk {
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned());
            match (stem, load_image(path)) {
                (Some(stem), Ok(image)) => loaded.push((stem, image)),
                (_, Err(e)) => {
                    log::error!("{e}");
                    summary.failures.push(PredictFailure {
                        path: path.clone(),
                        error: e.to_string(),
                    });
                }
                (None, Ok(_)) => summary.failures.push(PredictFailure {
                    path: path.clone(),
                    error: "path has no file stem".into(),
                }),
            }
        }
        if loaded.is_empty() {
            continue;
        }
        let inputs = loaded
            .iter()
            .map(|(_, image)| model_input(&pipe, image))
            .collect::<Result<Vec<_>>>()?;
        for ((stem, image), map) in loaded.iter().zip(model.predict(&inputs)?) {
            let mask = params.apply(&map, image.height(), image.width());
            figures::save_mask(&mask, &mask_dir.join(format!("{stem}.png")))?;
            if let Some(w) = rle_writer.as_mut() {
                let encoded = rle_encode(&mask);
                w.write_record([
                    stem.as_str(),
                    &mask.width().to_string(),
                    &mask.height().to_string(),
                    &encoded.to_string(),
                ])?;
            }
            summary.written.push(stem.clone());
        }
    }
    if let Some(mut w) = rle_writer {
        w.flush().map_err(|e| Error::io(&rle_path, e))?;
    }
    println!(
        "wrote {} masks to {}; {} failed",
        summary.written.len(),
        mask_dir.display(),
        summary.failures.len()
    );
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_picks_are_distinct_and_bounded() {
        assert_eq!(overlay_indices(10, 3), vec![0, 3, 6]);
        assert_eq!(overlay_indices(2, 5), vec![0, 1]);
        assert!(overlay_indices(0, 4).is_empty());
        for n in 1..40 {
            for k in 1..=n {
                let idx = overlay_indices(n, k);
                assert_eq!(idx.len(), k);
                assert!(idx.windows(2).all(|w| w[0] < w[1]));
                assert!(idx.iter().all(|&i| i < n));
            }
        }
    }

    #[test]
    fn missing_params_fall_back_to_defaults() {
        let cfg = RunConfig::default();
        let p = load_params(&cfg, Some(Path::new("/nonexistent/postprocess.json"))).unwrap();
        assert_eq!(p.binarization_threshold, 0.5);
        assert_eq!(p.removal_threshold, 0);
    }

    #[test]
    fn directories_expand_to_sorted_images() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b.png", "a.jpg", "notes.txt"] {
            std::fs::write(dir.path().join(name), b"x").unwrap();
        }
        let files = expand_inputs(&[dir.path().to_path_buf()]);
        let names: Vec<_> = files.iter().map(|f| f.file_name().unwrap().to_str().unwrap()).collect();
        assert_eq!(names, vec!["a.jpg", "b.png"]);
    }
}
