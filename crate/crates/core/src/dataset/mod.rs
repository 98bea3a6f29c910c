//! Dataset discovery, lazy sample loading, train/validation splitting and
//! mask codecs.
//!
//! A dataset lives under a root with two sibling folders, `images/` holding
//! H×W×3 rasters and `masks/` holding H×W 0/255 rasters that share the image's
//! file stem. Nothing is decoded while a [`Manifest`] is built; pixels are read
//! only when a sample is loaded or the positive/negative counts are requested.

mod rle;
mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use image::DynamicImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ImageTensor, MaskTensor};

pub use rle::{rle_decode, rle_encode, RleMask};
pub use synthetic::{make_synthetic, SyntheticConfig};

/// Image extensions recognised when listing `images/`.
pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// Fraction of samples assigned to training.
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.85;

/// Mask pixels strictly above this 8-bit value are foreground.
pub const MASK_THRESHOLD: u8 = 127;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

/// An image/mask pair on disk.
#[derive(Debug)]
pub struct Sample {
    pub stem: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    has_positive: OnceLock<bool>,
}

impl Clone for Sample {
    fn clone(&self) -> Self {
        let has_positive = OnceLock::new();
        if let Some(&v) = self.has_positive.get() {
            let _ = has_positive.set(v);
        }
        Self {
            stem: self.stem.clone(),
            image_path: self.image_path.clone(),
            mask_path: self.mask_path.clone(),
            has_positive,
        }
    }
}

impl Sample {
    pub fn new(stem: impl Into<String>, image_path: PathBuf, mask_path: PathBuf) -> Self {
        Self {
            stem: stem.into(),
            image_path,
            mask_path,
            has_positive: OnceLock::new(),
        }
    }

    /// Whether the mask has at least one foreground pixel. Decodes the mask on
    /// first use and caches the answer.
    pub fn has_positive(&self) -> Result<bool> {
        if let Some(&v) = self.has_positive.get() {
            return Ok(v);
        }
        let positive = !self.load_mask()?.is_empty();
        Ok(*self.has_positive.get_or_init(|| positive))
    }

    /// Cached positivity, if known without decoding.
    pub fn cached_has_positive(&self) -> Option<bool> {
        self.has_positive.get().copied()
    }

    pub(crate) fn set_has_positive(&self, v: bool) {
        let _ = self.has_positive.set(v);
    }

    pub fn load_image(&self) -> Result<ImageTensor> {
        load_image(&self.image_path)
    }

    pub fn load_mask(&self) -> Result<MaskTensor> {
        let raw = open_image(&self.mask_path)?;
        decode_mask(&raw).map_err(|e| match e {
            Error::InvalidArgument(msg) => {
                Error::InvalidArgument(format!("{}: {msg}", self.mask_path.display()))
            }
            other => other,
        })
    }

    /// Loads the pair and checks that the two rasters are spatially congruent.
    pub fn load(&self) -> Result<(ImageTensor, MaskTensor)> {
        let image = self.load_image()?;
        let mask = self.load_mask()?;
        if image.height() != mask.height() || image.width() != mask.width() {
            return Err(Error::shape(
                format!("mask {} to match image {}x{}", self.stem, image.height(), image.width()),
                format!("{}x{}", mask.height(), mask.width()),
            ));
        }
        self.set_has_positive(!mask.is_empty());
        Ok((image, mask))
    }
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads an image as H×W×3 with intensities scaled to `[0, 1]`. Grey inputs are
/// replicated across channels.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let rgb = open_image(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    ImageTensor::new(h as usize, w as usize, data)
}

/// Binarises a single-channel 8-bit (or 16-bit) mask raster at [`MASK_THRESHOLD`].
pub fn decode_mask(raw: &DynamicImage) -> Result<MaskTensor> {
    let gray = match raw {
        DynamicImage::ImageLuma8(g) => g.clone(),
        DynamicImage::ImageLuma16(_) => raw.to_luma8(),
        other => {
            return Err(Error::InvalidArgument(format!(
                "mask must be single-channel, got {:?}",
                other.color()
            )))
        }
    };
    let (w, h) = gray.dimensions();
    Ok(decode_mask_bytes(h as usize, w as usize, gray.as_raw()))
}

/// Binarises a raw 8-bit grey buffer.
pub fn decode_mask_bytes(height: usize, width: usize, raw: &[u8]) -> MaskTensor {
    let data = raw.iter().map(|&v| (v > MASK_THRESHOLD) as u8).collect();
    MaskTensor::new(height, width, data).expect("binarised buffer matches its shape")
}

/// Training/validation sizes for `n` samples: `floor(fraction * n)` train, the
/// rest validation.
pub fn split_sizes(n: usize, train_fraction: f64) -> Result<(usize, usize)> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 samples to form train and validation splits, got {n}"
        )));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    // The epsilon absorbs binary representation error in fractions like 0.85.
    let n_train = ((train_fraction * n as f64) + 1e-9).floor() as usize;
    let n_train = n_train.clamp(1, n - 1);
    Ok((n_train, n - n_train))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitOptions {
    pub train_fraction: f64,
    pub seed: u64,
    /// Keep the positive/negative ratio equal in both splits. Requires decoding
    /// every mask.
    pub stratify: bool,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self {
            train_fraction: DEFAULT_TRAIN_FRACTION,
            seed: 0,
            stratify: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub total: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Ordered samples plus their split assignment.
#[derive(Debug, Clone)]
pub struct Manifest {
    samples: Vec<Sample>,
    splits: Vec<Split>,
    options: SplitOptions,
}

/// Lists `image_dir`, pairs every image with `<stem>.png` in `mask_dir` and
/// assigns a seeded random 85/15 split.
pub fn load_manifest(image_dir: &Path, mask_dir: &Path, seed: u64) -> Result<Manifest> {
    load_manifest_with(
        image_dir,
        mask_dir,
        &SplitOptions {
            seed,
            ..SplitOptions::default()
        },
    )
}

pub fn load_manifest_with(
    image_dir: &Path,
    mask_dir: &Path,
    options: &SplitOptions,
) -> Result<Manifest> {
    let samples = discover_samples(image_dir, mask_dir)?;
    Manifest::from_samples(samples, options.clone())
}

/// Image/mask pairs found under the two folders, sorted by stem.
pub fn discover_samples(image_dir: &Path, mask_dir: &Path) -> Result<Vec<Sample>> {
    for dir in [image_dir, mask_dir] {
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "directory does not exist"),
            ));
        }
    }
    let mut images: BTreeMap<String, PathBuf> = BTreeMap::new();
    let entries = std::fs::read_dir(image_dir).map_err(|e| Error::io(image_dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(image_dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        let Some(ext) = ext else { continue };
        if !IMAGE_EXTENSIONS.contains(&ext.as_str()) || !path.is_file() {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        images.insert(stem.to_string(), path);
    }
    if images.is_empty() {
        return Err(Error::NoSamples(image_dir.to_path_buf()));
    }
    images
        .into_iter()
        .map(|(stem, image_path)| {
            let mask_path = mask_dir.join(format!("{stem}.png"));
            if !mask_path.is_file() {
                return Err(Error::MissingMask {
                    stem,
                    mask_dir: mask_dir.to_path_buf(),
                });
            }
            Ok(Sample::new(stem, image_path, mask_path))
        })
        .collect()
}

impl Manifest {
    pub fn from_samples(samples: Vec<Sample>, options: SplitOptions) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::NoSamples(PathBuf::new()));
        }
        let (n_train, _) = split_sizes(samples.len(), options.train_fraction)?;
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let mut splits = vec![Split::Val; samples.len()];
        if options.stratify {
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for (i, s) in samples.iter().enumerate() {
                if s.has_positive()? {
                    pos.push(i)
                } else {
                    neg.push(i)
                }
            }
            pos.shuffle(&mut rng);
            neg.shuffle(&mut rng);
            let want_pos = (options.train_fraction * pos.len() as f64).round() as usize;
            let n_pos = want_pos.min(pos.len()).min(n_train);
            let n_neg = (n_train - n_pos).min(neg.len());
            let n_pos = n_train - n_neg;
            for &i in pos[..n_pos].iter().chain(&neg[..n_neg]) {
                splits[i] = Split::Train;
            }
        } else {
            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.shuffle(&mut rng);
            for &i in &order[..n_train] {
                splits[i] = Split::Train;
            }
        }
        Ok(Self {
            samples,
            splits,
            options,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn options(&self) -> &SplitOptions {
        &self.options
    }

    pub fn split_of(&self, index: usize) -> Split {
        self.splits[index]
    }

    pub fn split(&self, which: Split) -> Vec<Sample> {
        self.samples
            .iter()
            .zip(&self.splits)
            .filter(|(_, &s)| s == which)
            .map(|(sample, _)| sample.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Positive/negative counts; decodes any mask whose positivity is not cached.
    pub fn counts(&self) -> Result<Counts> {
        let mut positive = 0;
        for s in &self.samples {
            if s.has_positive()? {
                positive += 1;
            }
        }
        Ok(Counts {
            total: self.samples.len(),
            positive,
            negative: self.samples.len() - positive,
        })
    }

    /// Persists `stem,split,has_positive`. Computes positivity if needed.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(["stem", "split", "has_positive"])?;
        for (sample, split) in self.samples.iter().zip(&self.splits) {
            let positive = sample.has_positive()?;
            writer.write_record([
                sample.stem.as_str(),
                &split.to_string(),
                if positive { "true" } else { "false" },
            ])?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads a manifest written by [`Manifest::write_csv`], resolving paths
    /// against the two folders. The stored positivity acts as a cache.
    pub fn read_csv(path: &Path, image_dir: &Path, mask_dir: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            stem: String,
            split: Split,
            has_positive: bool,
        }
        let on_disk: BTreeMap<String, Sample> = discover_samples(image_dir, mask_dir)?
            .into_iter()
            .map(|s| (s.stem.clone(), s))
            .collect();
        let mut reader = csv::Reader::from_path(path)?;
        let mut samples = Vec::new();
        let mut splits = Vec::new();
        for row in reader.deserialize() {
            let row: Row = row?;
            let sample = on_disk.get(&row.stem).cloned().ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "manifest {} lists `{}` which is not in {}",
                    path.display(),
                    row.stem,
                    image_dir.display()
                ))
            })?;
            sample.set_has_positive(row.has_positive);
            samples.push(sample);
            splits.push(row.split);
        }
        if samples.is_empty() {
            return Err(Error::NoSamples(path.to_path_buf()));
        }
        Ok(Self {
            samples,
            splits,
            options: SplitOptions::default(),
        })
    }
}

/// Conventional folder names under a dataset root.
pub fn dataset_dirs(root: &Path) -> (PathBuf, PathBuf) {
    (root.join("images"), root.join("masks"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb, RgbImage};

    #[test]
    fn split_sizes_examples() {
        assert_eq!(split_sizes(12047, 0.85).unwrap(), (10239, 1808));
        assert_eq!(split_sizes(20, 0.85).unwrap(), (17, 3));
        assert_eq!(split_sizes(2, 0.5).unwrap(), (1, 1));
        assert_eq!(split_sizes(16, 0.85).unwrap(), (13, 3));
    }

    #[test]
    fn split_sizes_rejects_degenerate_inputs() {
        assert!(split_sizes(1, 0.85).is_err());
        assert!(split_sizes(0, 0.85).is_err());
        assert!(split_sizes(10, 0.0).is_err());
        assert!(split_sizes(10, 1.0).is_err());
    }

    #[test]
    fn split_sizes_keeps_both_sides_nonempty() {
        for n in 2..200 {
            for f in [0.01, 0.5, 0.85, 0.99] {
                let (t, v) = split_sizes(n, f).unwrap();
                assert!(t >= 1 && v >= 1 && t + v == n);
            }
        }
    }

    #[test]
    fn decode_mask_thresholds_at_127() {
        let mut g = GrayImage::new(3, 1);
        g.put_pixel(0, 0, Luma([0]));
        g.put_pixel(1, 0, Luma([200]));
        g.put_pixel(2, 0, Luma([255]));
        let m = decode_mask(&DynamicImage::ImageLuma8(g)).unwrap();
        assert_eq!(m.data(), &[0, 1, 1]);

        let edge = decode_mask_bytes(1, 2, &[127, 128]);
        assert_eq!(edge.data(), &[0, 1]);
    }

    #[test]
    fn decode_mask_constant_rasters() {
        let zeros = decode_mask(&DynamicImage::ImageLuma8(GrayImage::new(4, 4))).unwrap();
        assert!(zeros.data().iter().all(|&v| v == 0));
        let ones = GrayImage::from_pixel(4, 4, Luma([255]));
        let ones = decode_mask(&DynamicImage::ImageLuma8(ones)).unwrap();
        assert!(ones.data().iter().all(|&v| v == 1));
    }

    #[test]
    fn decode_mask_rejects_colour() {
        let rgb = DynamicImage::ImageRgb8(RgbImage::from_pixel(2, 2, Rgb([255, 0, 0])));
        assert!(matches!(decode_mask(&rgb), Err(Error::InvalidArgument(_))));
    }

    fn touch_pair(root: &Path, stem: &str, mask: bool) {
        let (img, msk) = dataset_dirs(root);
        std::fs::create_dir_all(&img).unwrap();
        std::fs::create_dir_all(&msk).unwrap();
        RgbImage::new(4, 4)
            .save(img.join(format!("{stem}.png")))
            .unwrap();
        if mask {
            GrayImage::new(4, 4)
                .save(msk.join(format!("{stem}.png")))
                .unwrap();
        }
    }

    #[test]
    fn missing_mask_names_the_stem() {
        let dir = tempfile::tempdir().unwrap();
        touch_pair(dir.path(), "a", true);
        touch_pair(dir.path(), "b", false);
        let (img, msk) = dataset_dirs(dir.path());
        match load_manifest(&img, &msk, 0) {
            Err(Error::MissingMask { stem, .. }) => assert_eq!(stem, "b"),
            other => panic!("expected missing mask, got {other:?}"),
        }
    }

    #[test]
    fn empty_directories_have_no_samples() {
        let dir = tempfile::tempdir().unwrap();
        let (img, msk) = dataset_dirs(dir.path());
        std::fs::create_dir_all(&img).unwrap();
        std::fs::create_dir_all(&msk).unwrap();
        let err = load_manifest(&img, &msk, 0).unwrap_err();
        assert!(err.to_string().contains("no samples found"));
        assert!(err.is_user_error());
    }

    #[test]
    fn manifest_construction_does_not_decode() {
        let dir = tempfile::tempdir().unwrap();
        let (img, msk) = dataset_dirs(dir.path());
        std::fs::create_dir_all(&img).unwrap();
        std::fs::create_dir_all(&msk).unwrap();
        for stem in ["a", "b", "c"] {
            std::fs::write(img.join(format!("{stem}.png")), b"not a png").unwrap();
            std::fs::write(msk.join(format!("{stem}.png")), b"not a png").unwrap();
        }
        let manifest = load_manifest(&img, &msk, 3).unwrap();
        assert_eq!(manifest.len(), 3);
        assert!(manifest.samples().iter().all(|s| s.cached_has_positive().is_none()));
        assert!(matches!(manifest.counts(), Err(Error::Image { .. })));
    }

    #[test]
    fn stratified_split_respects_sizes() {
        let samples: Vec<Sample> = (0..40)
            .map(|i| {
                let s = Sample::new(format!("{i:02}"), PathBuf::new(), PathBuf::new());
                s.set_has_positive(i % 4 == 0);
                s
            })
            .collect();
        let opts = SplitOptions {
            stratify: true,
            seed: 5,
            ..SplitOptions::default()
        };
        let m = Manifest::from_samples(samples, opts).unwrap();
        let train = m.split(Split::Train);
        assert_eq!(train.len(), 34);
        let pos = train.iter().filter(|s| s.has_positive().unwrap()).count();
        assert_eq!(pos, 9); // round(0.85 * 10)
    }
}
