//! Desk-scale stand-in for chest radiographs: noisy intensity gradients with a
//! brighter elliptical blob whose footprint is the ground-truth mask.

use std::path::Path;

use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::dataset_dirs;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n: usize,
    pub resolution: usize,
    pub seed: u64,
    /// Share of samples written with an empty mask. At least one sample stays
    /// positive unless this is 1.
    pub negative_fraction: f64,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    /// Intensity added inside the blob.
    pub contrast: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n: 16,
            resolution: 128,
            seed: 0,
            negative_fraction: 0.25,
            noise: 0.03,
            contrast: 0.3,
        }
    }
}

impl SyntheticConfig {
    pub fn new(n: usize, resolution: usize, seed: u64) -> Self {
        Self {
            n,
            resolution,
            seed,
            ..Self::default()
        }
    }

    pub fn negatives(&self) -> usize {
        let want = (self.n as f64 * self.negative_fraction).round() as usize;
        if self.negative_fraction >= 1.0 {
            self.n
        } else {
            want.min(self.n.saturating_sub(1))
        }
    }
}

pub fn synthetic_stem(index: usize) -> String {
    format!("synth_{index:05}")
}

/// Writes `images/<stem>.png` and `masks/<stem>.png` under `root` and returns
/// the stems in order.
pub fn make_synthetic(root: &Path, config: &SyntheticConfig) -> Result<Vec<String>> {
    if config.n == 0 {
        return Err(Error::InvalidArgument("synthetic sample count must be >= 1".into()));
    }
    if config.resolution < 32 {
        return Err(Error::InvalidArgument(format!(
            "synthetic resolution must be >= 32, got {}",
            config.resolution
        )));
    }
    if !(0.0..=1.0).contains(&config.negative_fraction) {
        return Err(Error::InvalidArgument(format!(
            "negative fraction must lie in [0, 1], got {}",
            config.negative_fraction
        )));
    }
    let (image_dir, mask_dir) = dataset_dirs(root);
    for dir in [&image_dir, &mask_dir] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut order: Vec<usize> = (0..config.n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15));
    let mut negative = vec![false; config.n];
    for &i in &order[..config.negatives()] {
        negative[i] = true;
    }

    let mut stems = Vec::with_capacity(config.n);
    for (index, &is_negative) in negative.iter().enumerate() {
        let stem = synthetic_stem(index);
        let seed = config.seed.wrapping_mul(0x1000_0000_01b3).wrapping_add(index as u64);
        let (image, mask) = render(config, seed, !is_negative);
        let image_path = image_dir.join(format!("{stem}.png"));
        image.save(&image_path).map_err(|source| Error::Image {
            path: image_path.clone(),
            source,
        })?;
        let mask_path = mask_dir.join(format!("{stem}.png"));
        mask.save(&mask_path).map_err(|source| Error::Image {
            path: mask_path.clone(),
            source,
        })?;
        stems.push(stem);
    }
    Ok(stems)
}

fn render(config: &SyntheticConfig, seed: u64, positive: bool) -> (RgbImage, GrayImage) {
    let res = config.resolution;
    let r = res as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let base = rng.random_range(0.15..0.35);
    let slope_y = rng.random_range(0.1..0.3);
    let slope_x = rng.random_range(-0.1..0.1);

    let cx = rng.random_range(0.25..0.75) * r;
    let cy = rng.random_range(0.25..0.75) * r;
    let a = rng.random_range(0.10..0.22) * r;
    let b = rng.random_range(0.06..0.14) * r;
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (sin, cos) = theta.sin_cos();

    let noise = Normal::new(0.0, config.noise.max(0.0)).expect("finite standard deviation");
    let mut image = RgbImage::new(res as u32, res as u32);
    let mut mask = GrayImage::new(res as u32, res as u32);
    for y in 0..res {
        for x in 0..res {
            let (fx, fy) = (x as f64, y as f64);
            let mut v = base + slope_y * fy / r + slope_x * fx / r;
            let dx = fx - cx;
            let dy = fy - cy;
            let u = (dx * cos + dy * sin) / a;
            let w = (-dx * sin + dy * cos) / b;
            let inside = positive && u * u + w * w <= 1.0;
            if inside {
                v += config.contrast;
                mask.put_pixel(x as u32, y as u32, image::Luma([255]));
            }
            v += noise.sample(&mut rng);
            let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            image.put_pixel(x as u32, y as u32, image::Rgb([byte, byte, byte]));
        }
    }
    (image, mask)
}
