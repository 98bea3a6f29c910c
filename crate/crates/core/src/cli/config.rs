//! Run configuration loaded from TOML.
//!
//! Precedence, highest first: command-line flags, the `PNEUMOSEG_OUTPUT`
//! environment variable (output root only), the config file, built-in
//! defaults. Relative paths resolve against the working directory, except
//! `train.checkpoint_dir` and `train.log_path`, which resolve against
//! `output_dir`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{build_pipeline, AugmentPipeline, Mode, TransformSpec};
use crate::dataset::{dataset_dirs, SplitOptions, SyntheticConfig, DEFAULT_TRAIN_FRACTION};
use crate::error::{Error, Result};
use crate::model::{EncoderKind, ModelConfig, UpsampleMode, DEFAULT_DECODER_CHANNELS, TINY_DECODER_CHANNELS};
use crate::postprocess::GridConfig;
use crate::trainer::TrainConfig;

pub const DEFAULT_OUTPUT_DIR: &str = "runs/default";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub augment: AugmentConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub postprocess: GridConfig,
    pub evaluate: EvaluateConfig,
    pub synthetic: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from(DEFAULT_OUTPUT_DIR),
            data: DataConfig::default(),
            augment: AugmentConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig {
                batch_size: 8,
                max_epochs: 30,
                early_stop_patience: 10,
                lr_max: 1e-3,
                lr_min: 1e-5,
                checkpoint_dir: PathBuf::from("checkpoints"),
                log_path: Some(PathBuf::from("epoch_log.jsonl")),
                ..TrainConfig::default()
            },
            postprocess: GridConfig::default(),
            evaluate: EvaluateConfig::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

/// Dataset location and split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Holds `images/` and `masks/` unless those are set explicitly.
    pub root: PathBuf,
    pub image_dir: Option<PathBuf>,
    pub mask_dir: Option<PathBuf>,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub stratify: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            image_dir: None,
            mask_dir: None,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            split_seed: 0,
            stratify: false,
        }
    }
}

impl DataConfig {
    pub fn dirs(&self) -> (PathBuf, PathBuf) {
        let (images, masks) = dataset_dirs(&self.root);
        (
            self.image_dir.clone().unwrap_or(images),
            self.mask_dir.clone().unwrap_or(masks),
        )
    }

    pub fn split_options(&self) -> SplitOptions {
        SplitOptions {
            train_fraction: self.train_fraction,
            seed: self.split_seed,
            stratify: self.stratify,
        }
    }
}

/// Training transforms after the implicit resize. `None` selects the defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub transforms: Option<Vec<TransformSpec>>,
}

/// Model settings; `decoder_channels` defaults per encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub encoder: EncoderKind,
    pub resolution: usize,
    pub decoder_channels: Option<[usize; 5]>,
    pub upsample: UpsampleMode,
    pub pretrained_source: Option<PathBuf>,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::Tiny,
            resolution: 128,
            decoder_channels: None,
            upsample: UpsampleMode::default(),
            pretrained_source: None,
            seed: 0,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self) -> ModelConfig {
        let channels = match self.encoder {
            EncoderKind::Tiny => TINY_DECODER_CHANNELS,
            _ => DEFAULT_DECODER_CHANNELS,
        };
        ModelConfig {
            encoder: self.encoder,
            resolution: self.resolution,
            decoder_channels: self.decoder_channels.unwrap_or(channels),
            upsample: self.upsample,
            pretrained_source: self.pretrained_source.clone(),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Number of overlay figures to render.
    pub overlays: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self { overlays: 8 }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Anchors the trainer's output paths under `output_dir`.
    pub fn resolve_paths(&mut self) {
        let out = self.output_dir.clone();
        if self.train.checkpoint_dir.is_relative() {
            self.train.checkpoint_dir = out.join(&self.train.checkpoint_dir);
        }
        let log = self.train.log_path.get_or_insert_with(|| PathBuf::from("epoch_log.jsonl"));
        if log.is_relative() {
            *log = out.join(&*log);
        }
    }

    pub fn train_pipeline(&self) -> Result<AugmentPipeline> {
        build_pipeline(Mode::Train, self.model.resolution, self.augment.transforms.as_deref())
    }

    pub fn val_pipeline(&self) -> Result<AugmentPipeline> {
        build_pipeline(Mode::Val, self.model.resolution, None)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.resolve().validate()?;
        self.train.validate()?;
        self.train_pipeline()?;
        if !(0.0..1.0).contains(&self.data.train_fraction) || self.data.train_fraction == 0.0 {
            return Err(Error::Config(format!(
                "data.train_fraction must lie in (0, 1), got {}",
                self.data.train_fraction
            )));
        }
        if self.postprocess.bt_grid.is_empty() || self.postprocess.rt_grid.is_empty() {
            return Err(Error::Config("postprocess grids must be nonempty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::TransformKind;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn nested_sections_parse() {
        let cfg = RunConfig::from_toml(
            r#"
output_dir = "out"
[model]
encoder = "efficientnet-b4"
resolution = 512
[train]
batch_size = 4
mixed_precision = true
[postprocess]
rt_grid = [0, 64]
connectivity = 4
[[augment.transforms]]
kind = "affine"
probability = 0.5
parameters = { rotate = 10.0 }
"#,
        )
        .unwrap();
        let model = cfg.model.resolve();
        assert_eq!(model.encoder, EncoderKind::EfficientnetB4);
        assert_eq!(model.decoder_channels, DEFAULT_DECODER_CHANNELS);
        assert_eq!(cfg.train.batch_size, 4);
        assert!(cfg.train.mixed_precision);
        assert_eq!(cfg.postprocess.rt_grid, vec![0, 64]);
        let t = &cfg.augment.transforms.as_ref().unwrap()[0];
        assert_eq!(t.kind, TransformKind::Affine);
        assert_eq!(t.param("rotate"), 10.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("[train]\nepochs = 3"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("colour = 1"), Err(Error::Config(_))));
    }

    #[test]
    fn shipped_configs_validate() {
        let b4 = RunConfig::from_toml(include_str!("../../../../configs/b4-512.toml")).unwrap();
        b4.validate().unwrap();
        assert_eq!(b4.model.resolve().encoder, EncoderKind::EfficientnetB4);
        assert_eq!((b4.train.lr_max, b4.train.lr_min), (1e-4, 1e-6));
        let tiny = RunConfig::from_toml(include_str!("../../../../configs/synthetic-tiny.toml")).unwrap();
        tiny.validate().unwrap();
        assert_eq!(tiny.train_pipeline().unwrap().transforms().len(), 3);
    }

    #[test]
    fn trainer_paths_anchor_under_output() {
        let mut cfg = RunConfig {
            output_dir: PathBuf::from("o"),
            ..RunConfig::default()
        };
        cfg.resolve_paths();
        assert_eq!(cfg.train.checkpoint_dir, Path::new("o/checkpoints"));
        assert_eq!(cfg.train.log_path.as_deref(), Some(Path::new("o/epoch_log.jsonl")));
    }
}
