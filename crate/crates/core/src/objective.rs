//! Combined BCE + soft Dice loss and the cosine learning-rate decay.
//!
//! The slice functions are the reference definitions in `f64`, with
//! closed-form gradients. [`loss_tensor`] is the differentiable version used
//! in training.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability clipping in the log terms.
pub const BCE_EPS: f64 = 1e-7;
/// Added to numerator and denominator of the soft Dice.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub bce: f64,
    pub dice_loss: f64,
    pub combined: f64,
}

fn check(p: &[f64], y: &[f64], images: usize) -> Result<usize> {
    if p.len() != y.len() {
        return Err(Error::shape(y.len(), p.len()));
    }
    if p.is_empty() || images == 0 || !p.len().is_multiple_of(images) {
        return Err(Error::InvalidArgument(format!(
            "{} values do not split into {images} nonempty images",
            p.len()
        )));
    }
    Ok(p.len() / images)
}

#[inline]
fn clip(p: f64) -> f64 {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

/// Mean binary cross-entropy over every pixel.
pub fn bce(p: &[f64], y: &[f64]) -> Result<f64> {
    check(p, y, 1)?;
    let sum: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = clip(p);
            -((1.0 - y) * (1.0 - p).ln() + y * p.ln())
        })
        .sum();
    Ok(sum / p.len() as f64)
}

/// Soft Dice loss computed per image over `images` equal chunks, then averaged.
pub fn dice_loss(p: &[f64], y: &[f64], images: usize) -> Result<f64> {
    let n = check(p, y, images)?;
    let sum: f64 = p
        .chunks(n)
        .zip(y.chunks(n))
        .map(|(p, y)| {
            let (inter, sp, sy) = dice_sums(p, y);
            1.0 - (2.0 * inter + DICE_SMOOTH) / (sp + sy + DICE_SMOOTH)
        })
        .sum();
    Ok(sum / images as f64)
}

fn dice_sums(p: &[f64], y: &[f64]) -> (f64, f64, f64) {
    p.iter().zip(y).fold((0.0, 0.0, 0.0), |(i, a, b), (&p, &y)| (i + p * y, a + p, b + y))
}

pub fn combined_loss(p: &[f64], y: &[f64], images: usize) -> Result<LossTerms> {
    let bce = bce(p, y)?;
    let dice_loss = dice_loss(p, y, images)?;
    Ok(LossTerms {
        bce,
        dice_loss,
        combined: bce + dice_loss,
    })
}

/// d bce / d p. Zero where the clip is active.
pub fn bce_grad(p: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    check(p, y, 1)?;
    let n = p.len() as f64;
    Ok(p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            if p <= BCE_EPS || p >= 1.0 - BCE_EPS {
                0.0
            } else {
                (p - y) / (p * (1.0 - p)) / n
            }
        })
        .collect())
}

/// d dice_loss / d p.
pub fn dice_loss_grad(p: &[f64], y: &[f64], images: usize) -> Result<Vec<f64>> {
    let n = check(p, y, images)?;
    let mut out = Vec::with_capacity(p.len());
    for (p, y) in p.chunks(n).zip(y.chunks(n)) {
        let (inter, sp, sy) = dice_sums(p, y);
        let num = 2.0 * inter + DICE_SMOOTH;
        let den = sp + sy + DICE_SMOOTH;
        out.extend(y.iter().map(|&y| -(2.0 * y * den - num) / (den * den) / images as f64));
    }
    Ok(out)
}

pub fn combined_loss_grad(p: &[f64], y: &[f64], images: usize) -> Result<Vec<f64>> {
    let a = bce_grad(p, y)?;
    let b = dice_loss_grad(p, y, images)?;
    Ok(a.iter().zip(&b).map(|(a, b)| a + b).collect())
}

/// Differentiable loss on batched tensors with the batch on dimension 0.
/// Returns `(combined, bce, dice_loss)` as scalars in the input dtype.
pub fn loss_tensor(probs: &Tensor, target: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    if probs.dims() != target.dims() {
        return Err(Error::shape(format!("{:?}", target.dims()), format!("{:?}", probs.dims())));
    }
    let b = probs.dim(0)?;
    let target = target.to_dtype(probs.dtype())?;
    let p = probs.clamp(BCE_EPS, 1.0 - BCE_EPS)?;
    let pos = (&target * p.log()?)?;
    let neg = (target.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    let bce = (pos + neg)?.mean_all()?.neg()?;

    let flat_p = probs.reshape((b, ()))?;
    let flat_y = target.reshape((b, ()))?;
    let inter = (&flat_p * &flat_y)?.sum(D::Minus1)?;
    let den = (flat_p.sum(D::Minus1)? + flat_y.sum(D::Minus1)?)?.affine(1.0, DICE_SMOOTH)?;
    let ratio = (inter.affine(2.0, DICE_SMOOTH)? / den)?;
    let dice = ratio.affine(-1.0, 1.0)?.mean_all()?;
    let combined = (&bce + &dice)?;
    Ok((combined, bce, dice))
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: usize,
}

impl ScheduleConfig {
    pub const DEFAULT_LR_MAX: f64 = 1e-4;
    pub const DEFAULT_LR_MIN: f64 = 1e-6;

    pub fn new(total_steps: usize) -> Self {
        Self {
            lr_max: Self::DEFAULT_LR_MAX,
            lr_min: Self::DEFAULT_LR_MIN,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "schedule needs 0 < lr_min < lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::InvalidArgument("schedule needs total_steps >= 1".into()));
        }
        Ok(())
    }
}

/// Single cosine decay from `lr_max` at step 0 to `lr_min` at `total_steps`.
pub fn cosine_lr(step: usize, config: &ScheduleConfig) -> Result<f64> {
    config.validate()?;
    if step > config.total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond total_steps {}",
            config.total_steps
        )));
    }
    if step == config.total_steps {
        return Ok(config.lr_min);
    }
    let t = step as f64 / config.total_steps as f64;
    let decay = 0.5 * (1.0 - (std::f64::consts::PI * t).cos());
    Ok(config.lr_max - (config.lr_max - config.lr_min) * decay)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bce_examples() {
        let y = [0.0, 1.0, 1.0, 0.0];
        assert!(bce(&y, &y).unwrap() <= 2e-7);
        assert!((bce(&[0.5; 4], &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce(&[1.0], &[0.0]).unwrap() - 16.118).abs() < 1e-3);
    }

    #[test]
    fn dice_examples() {
        let y = [1.0, 1.0, 0.0, 0.0];
        assert!(dice_loss(&y, &y, 1).unwrap().abs() < 1e-12);
        let d = dice_loss(&[0.0, 0.0, 1.0, 1.0], &y, 1).unwrap();
        assert!((d - (1.0 - 1.0 / 5.0)).abs() < 1e-12 && d > 0.75);
        let a = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        let b = [0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        let d = dice_loss(&a, &b, 1).unwrap();
        assert!((d - 0.5).abs() < 0.06);
        assert!((d - (1.0 - 5.0 / 9.0)).abs() < 1e-12);
    }

    #[test]
    fn dice_is_per_image() {
        // One perfect image and one empty-vs-full image.
        let p = [1.0, 1.0, 0.0, 0.0];
        let y = [1.0, 1.0, 1.0, 1.0];
        let per_image = dice_loss(&p, &y, 2).unwrap();
        assert!((per_image - 0.5 * (1.0 - 1.0 / 3.0)).abs() < 1e-12);
        assert!((dice_loss(&p, &y, 1).unwrap() - (1.0 - 5.0 / 7.0)).abs() < 1e-12);
    }

    #[test]
    fn combined_examples() {
        let y = [0.0; 4];
        let t = combined_loss(&[0.5; 4], &y, 1).unwrap();
        let expect_dice = 1.0 - DICE_SMOOTH / (2.0 + DICE_SMOOTH);
        assert!((t.bce - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((t.dice_loss - expect_dice).abs() < 1e-12);
        assert_eq!(t.combined, t.bce + t.dice_loss);
        let perfect = combined_loss(&[1.0, 0.0], &[1.0, 0.0], 1).unwrap();
        assert!(perfect.combined < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(bce(&[0.5; 3], &[0.0; 4]).is_err());
        assert!(dice_loss(&[0.5; 4], &[0.0; 4], 3).is_err());
    }

    fn central_diff(f: impl Fn(&[f64]) -> f64, p: &[f64], i: usize, h: f64) -> f64 {
        let mut a = p.to_vec();
        let mut b = p.to_vec();
        a[i] += h;
        b[i] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    fn random_case(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
        let p = (0..n).map(|_| rng.random_range(0.02..0.98)).collect();
        let y = (0..n).map(|_| rng.random_bool(0.4) as u8 as f64).collect();
        (p, y)
    }

    #[test]
    fn closed_form_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (p, y) = random_case(&mut rng, 128);
            let g = combined_loss_grad(&p, &y, 2).unwrap();
            let gb = bce_grad(&p, &y).unwrap();
            let gd = dice_loss_grad(&p, &y, 2).unwrap();
            for i in 0..p.len() {
                let fb = central_diff(|q| bce(q, &y).unwrap(), &p, i, 1e-6);
                let fd = central_diff(|q| dice_loss(q, &y, 2).unwrap(), &p, i, 1e-6);
                let fc = central_diff(|q| combined_loss(q, &y, 2).unwrap().combined, &p, i, 1e-6);
                assert!(rel_err(gb[i], fb) < 1e-5, "bce {i}: {} vs {fb}", gb[i]);
                assert!(rel_err(gd[i], fd) < 1e-5, "dice {i}: {} vs {fd}", gd[i]);
                assert!(rel_err(g[i], fc) < 1e-5, "combined {i}: {} vs {fc}", g[i]);
            }
        }
    }

    #[test]
    fn autograd_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (p, y) = random_case(&mut rng, 2 * 8 * 8);
        let dev = Device::Cpu;
        let pv = Var::from_vec(p.clone(), (2, 1, 8, 8), &dev).unwrap();
        let yt = Tensor::from_vec(y.clone(), (2, 1, 8, 8), &dev).unwrap();
        let (total, b, d) = loss_tensor(pv.as_tensor(), &yt).unwrap();
        let reference = combined_loss(&p, &y, 2).unwrap();
        assert!((scalar(&b).unwrap() - reference.bce).abs() < 1e-12);
        assert!((scalar(&d).unwrap() - reference.dice_loss).abs() < 1e-12);
        let grads = total.backward().unwrap();
        let g: Vec<f64> = grads.get(&pv).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let expect = combined_loss_grad(&p, &y, 2).unwrap();
        for (a, b) in g.iter().zip(&expect) {
            assert!(rel_err(*a, *b) < 1e-9);
        }
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let cfg = ScheduleConfig::new(1000);
        assert_eq!(cosine_lr(0, &cfg).unwrap(), 1e-4);
        assert_eq!(cosine_lr(1000, &cfg).unwrap(), 1e-6);
        assert!((cosine_lr(500, &cfg).unwrap() - 5.05e-5).abs() < 1e-15);
        assert!(cosine_lr(1001, &cfg).is_err());
    }

    #[test]
    fn schedule_validation() {
        let mut cfg = ScheduleConfig::new(0);
        assert!(cosine_lr(0, &cfg).is_err());
        cfg.total_steps = 10;
        cfg.lr_min = 1e-3;
        assert!(cosine_lr(0, &cfg).is_err());
    }

    proptest! {
        #[test]
        fn loss_ranges(values in proptest::collection::vec((0.0f64..=1.0, any::<bool>()), 1..64)) {
            let p: Vec<f64> = values.iter().map(|v| v.0).collect();
            let y: Vec<f64> = values.iter().map(|v| v.1 as u8 as f64).collect();
            let t = combined_loss(&p, &y, 1).unwrap();
            prop_assert!(t.bce >= 0.0);
            prop_assert!((0.0..=1.0).contains(&t.dice_loss));
            prop_assert!(t.combined >= 0.0);
        }

        #[test]
        fn dice_symmetric_on_binary(values in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..64)) {
            let a: Vec<f64> = values.iter().map(|v| v.0 as u8 as f64).collect();
            let b: Vec<f64> = values.iter().map(|v| v.1 as u8 as f64).collect();
            prop_assert_eq!(dice_loss(&a, &b, 1).unwrap(), dice_loss(&b, &a, 1).unwrap());
        }

        #[test]
        fn cosine_nonincreasing(total in 1usize..5000, frac in 0.0f64..1.0) {
            let cfg = ScheduleConfig::new(total);
            let s = ((total as f64) * frac) as usize;
            let s = s.min(total - 1);
            prop_assert!(cosine_lr(s + 1, &cfg).unwrap() <= cosine_lr(s, &cfg).unwrap());
        }
    }
}
