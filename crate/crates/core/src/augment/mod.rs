//! Paired image/mask augmentation.
//!
//! A pipeline is an ordered list of probability-gated transforms. The first
//! step is always a deterministic resize to the target resolution so every
//! later parameter is resolution-relative. Geometric steps (flip, affine,
//! optical distortion) apply identical coordinate maps to image and mask and
//! consecutive geometric steps are composed into one resampling pass.
//! Photometric steps touch the image only.

mod warp;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ImageTensor, MaskTensor};

use warp::{resize_image, resize_mask, warp_pair, Warp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TransformKind {
    Resize,
    HorizontalFlip,
    Affine,
    OpticalDistortion,
    BrightnessContrast,
}

impl TransformKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TransformKind::Resize => "resize",
            TransformKind::HorizontalFlip => "horizontal_flip",
            TransformKind::Affine => "affine",
            TransformKind::OpticalDistortion => "optical_distortion",
            TransformKind::BrightnessContrast => "brightness_contrast",
        }
    }

    pub fn is_geometric(self) -> bool {
        matches!(
            self,
            TransformKind::HorizontalFlip | TransformKind::Affine | TransformKind::OpticalDistortion
        )
    }

    /// Parameter names and their defaults.
    fn defaults(self) -> &'static [(&'static str, f64)] {
        match self {
            TransformKind::Resize => &[("size", 512.0)],
            TransformKind::HorizontalFlip => &[],
            TransformKind::Affine => &[("shift", 0.1), ("scale", 0.1), ("rotate", 15.0)],
            TransformKind::OpticalDistortion => &[("strength", 0.2)],
            TransformKind::BrightnessContrast => &[("brightness", 0.2), ("contrast", 0.2)],
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "resize" => TransformKind::Resize,
            "horizontal_flip" => TransformKind::HorizontalFlip,
            "affine" => TransformKind::Affine,
            "optical_distortion" => TransformKind::OpticalDistortion,
            "brightness_contrast" => TransformKind::BrightnessContrast,
            other => return Err(Error::UnknownTransform(other.to_string())),
        })
    }
}

impl TryFrom<String> for TransformKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TransformKind> for String {
    fn from(kind: TransformKind) -> Self {
        kind.as_str().to_string()
    }
}

/// One pipeline entry: `{kind, probability, parameters}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub kind: TransformKind,
    pub probability: f64,
    #[serde(default)]
    pub parameters: BTreeMap<String, f64>,
}

impl TransformSpec {
    pub fn new(kind: TransformKind, probability: f64) -> Self {
        Self {
            kind,
            probability,
            parameters: BTreeMap::new(),
        }
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.parameters.insert(name.to_string(), value);
        self
    }

    /// Explicit value or the kind's default.
    pub fn param(&self, name: &str) -> f64 {
        self.parameters.get(name).copied().unwrap_or_else(|| {
            self.kind
                .defaults()
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, v)| *v)
                .unwrap_or(0.0)
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::InvalidArgument(format!(
                "{} probability {} outside [0, 1]",
                self.kind, self.probability
            )));
        }
        let known = self.kind.defaults();
        for (name, &value) in &self.parameters {
            if !known.iter().any(|(n, _)| n == name) {
                return Err(Error::InvalidArgument(format!(
                    "{} has no parameter `{name}`",
                    self.kind
                )));
            }
            if !value.is_finite() || value < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "{}.{name} must be finite and non-negative, got {value}",
                    self.kind
                )));
            }
        }
        if self.kind == TransformKind::Resize && self.param("size") < 1.0 {
            return Err(Error::InvalidArgument("resize target must be positive".into()));
        }
        Ok(())
    }
}

/// Default training transforms applied after the resize.
pub fn default_train_transforms() -> Vec<TransformSpec> {
    vec![
        TransformSpec::new(TransformKind::HorizontalFlip, 0.5),
        TransformSpec::new(TransformKind::Affine, 0.5)
            .with("shift", 0.1)
            .with("scale", 0.1)
            .with("rotate", 15.0),
        TransformSpec::new(TransformKind::OpticalDistortion, 0.3).with("strength", 0.2),
        TransformSpec::new(TransformKind::BrightnessContrast, 0.3)
            .with("brightness", 0.2)
            .with("contrast", 0.2),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPipeline {
    mode: Mode,
    transforms: Vec<TransformSpec>,
}

/// Builds the validation pipeline (resize only) or the training pipeline
/// (resize, then `overrides` or the default transforms).
///
/// `overrides` replaces everything after the resize and may not contain a
/// resize itself. It is ignored in validation mode.
pub fn build_pipeline(
    mode: Mode,
    target_resolution: usize,
    overrides: Option<&[TransformSpec]>,
) -> Result<AugmentPipeline> {
    if target_resolution == 0 {
        return Err(Error::InvalidArgument("target resolution must be positive".into()));
    }
    let resize =
        TransformSpec::new(TransformKind::Resize, 1.0).with("size", target_resolution as f64);
    let mut transforms = vec![resize];
    if mode == Mode::Train {
        let rest = match overrides {
            Some(specs) => specs.to_vec(),
            None => default_train_transforms(),
        };
        for spec in &rest {
            if spec.kind == TransformKind::Resize {
                return Err(Error::InvalidArgument(
                    "resize is implicit and must not appear in transform overrides".into(),
                ));
            }
            spec.validate()?;
        }
        transforms.extend(rest);
    }
    Ok(AugmentPipeline { mode, transforms })
}

impl AugmentPipeline {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn transforms(&self) -> &[TransformSpec] {
        &self.transforms
    }

    pub fn target_resolution(&self) -> usize {
        self.transforms[0].param("size") as usize
    }

    /// Same pipeline with every probability replaced.
    pub fn with_probabilities(&self, probability: f64) -> Self {
        let mut out = self.clone();
        for t in out.transforms.iter_mut().skip(1) {
            t.probability = probability;
        }
        out
    }
}

/// Applies `pipeline` to a congruent image/mask pair. The same `seed` always
/// yields bit-identical outputs.
pub fn apply_paired(
    pipeline: &AugmentPipeline,
    image: &ImageTensor,
    mask: &MaskTensor,
    seed: u64,
) -> Result<(ImageTensor, MaskTensor)> {
    if image.height() != mask.height() || image.width() != mask.width() {
        return Err(Error::shape(
            format!("mask {}x{}", image.height(), image.width()),
            format!("{}x{}", mask.height(), mask.width()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = image.clone();
    let mut mask = mask.clone();
    let mut pending: Vec<Warp> = Vec::new();

    for spec in &pipeline.transforms {
        let fire = spec.probability >= 1.0 || rng.random::<f64>() < spec.probability;
        if !fire {
            continue;
        }
        let (h, w) = (image.height(), image.width());
        let center = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        match spec.kind {
            TransformKind::Resize => {
                flush(&mut pending, &mut image, &mut mask);
                let size = spec.param("size") as usize;
                image = resize_image(&image, size, size);
                mask = resize_mask(&mask, size, size);
            }
            TransformKind::HorizontalFlip => pending.push(Warp::HorizontalFlip { width: w }),
            TransformKind::Affine => {
                let shift = spec.param("shift");
                let scale = spec.param("scale");
                let rotate = spec.param("rotate");
                let tx = symmetric(&mut rng, shift) * w as f64;
                let ty = symmetric(&mut rng, shift) * h as f64;
                let s = 1.0 + symmetric(&mut rng, scale);
                let degrees = symmetric(&mut rng, rotate);
                pending.push(Warp::Affine {
                    center,
                    shift: (tx, ty),
                    scale: s.max(1e-3),
                    radians: degrees.to_radians(),
                });
            }
            TransformKind::OpticalDistortion => {
                let k = symmetric(&mut rng, spec.param("strength"));
                pending.push(Warp::Radial {
                    center,
                    norm: center.0.max(center.1).max(1.0),
                    k,
                });
            }
            TransformKind::BrightnessContrast => {
                flush(&mut pending, &mut image, &mut mask);
                let beta = symmetric(&mut rng, spec.param("brightness")) as f32;
                let alpha = 1.0 + symmetric(&mut rng, spec.param("contrast")) as f32;
                for v in image.data_mut() {
                    *v = (alpha * *v + beta).clamp(0.0, 1.0);
                }
            }
        }
    }
    flush(&mut pending, &mut image, &mut mask);
    for v in image.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok((image, mask))
}

fn flush(pending: &mut Vec<Warp>, image: &mut ImageTensor, mask: &mut MaskTensor) {
    if pending.is_empty() {
        return;
    }
    let (img, msk) = warp_pair(pending, image, mask);
    *image = img;
    *mask = msk;
    pending.clear();
}

fn symmetric(rng: &mut ChaCha8Rng, limit: f64) -> f64 {
    if limit == 0.0 {
        0.0
    } else {
        rng.random_range(-limit..=limit)
    }
}

/// Per-sample seed from the run seed, epoch and sample index, so a sample's
/// augmentation does not depend on which worker processes it.
pub fn sample_seed(global: u64, epoch: usize, index: usize) -> u64 {
    let mut z = global
        ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (index as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
