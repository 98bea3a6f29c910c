//! Resampling primitives. Images are sampled bilinearly and masks by nearest
//! neighbour so masks stay binary.

use crate::raster::{bilinear_axis, ImageTensor, MaskTensor};

/// Inverse coordinate map for one geometric transform: takes an output pixel
/// centre and returns the source position it reads from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Warp {
    HorizontalFlip {
        width: usize,
    },
    Affine {
        center: (f64, f64),
        shift: (f64, f64),
        scale: f64,
        radians: f64,
    },
    Radial {
        center: (f64, f64),
        norm: f64,
        k: f64,
    },
}

impl Warp {
    #[inline]
    pub(crate) fn source(&self, x: f64, y: f64) -> (f64, f64) {
        match *self {
            Warp::HorizontalFlip { width } => ((width - 1) as f64 - x, y),
            Warp::Affine {
                center: (cx, cy),
                shift: (tx, ty),
                scale,
                radians,
            } => {
                let (sin, cos) = radians.sin_cos();
                let dx = x - cx - tx;
                let dy = y - cy - ty;
                (
                    cx + (dx * cos + dy * sin) / scale,
                    cy + (-dx * sin + dy * cos) / scale,
                )
            }
            Warp::Radial {
                center: (cx, cy),
                norm,
                k,
            } => {
                let dx = x - cx;
                let dy = y - cy;
                let r2 = (dx * dx + dy * dy) / (norm * norm);
                let f = 1.0 + k * r2;
                (cx + dx * f, cy + dy * f)
            }
        }
    }
}

/// Applies the composition of `warps` (first element applied first) to the
/// image and mask in a single resampling pass. Out-of-frame reads are 0.
pub(crate) fn warp_pair(warps: &[Warp], image: &ImageTensor, mask: &MaskTensor) -> (ImageTensor, MaskTensor) {
    let (h, w) = (image.height(), image.width());
    let mut out_img = ImageTensor::zeros(h, w);
    let mut out_mask = MaskTensor::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let (mut x, mut y) = (c as f64, r as f64);
            for warp in warps.iter().rev() {
                (x, y) = warp.source(x, y);
            }
            for ch in 0..ImageTensor::CHANNELS {
                out_img.set(r, c, ch, sample_zero_fill(image, x, y, ch));
            }
            let (nx, ny) = ((x + 0.5).floor(), (y + 0.5).floor());
            if nx >= 0.0 && ny >= 0.0 && (nx as usize) < w && (ny as usize) < h {
                out_mask.set(r, c, mask.get(ny as usize, nx as usize) == 1);
            }
        }
    }
    (out_img, out_mask)
}

#[inline]
fn sample_zero_fill(image: &ImageTensor, x: f64, y: f64, ch: usize) -> f32 {
    let (h, w) = (image.height() as isize, image.width() as isize);
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let mut acc = 0.0f64;
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        let yy = y0 + dy;
        if wy == 0.0 || yy < 0 || yy >= h {
            continue;
        }
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let xx = x0 + dx;
            if wx == 0.0 || xx < 0 || xx >= w {
                continue;
            }
            acc += wy * wx * image.get(yy as usize, xx as usize, ch) as f64;
        }
    }
    acc as f32
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub(crate) fn resize_image(image: &ImageTensor, height: usize, width: usize) -> ImageTensor {
    if image.height() == height && image.width() == width {
        return image.clone();
    }
    let sy = image.height() as f64 / height as f64;
    let sx = image.width() as f64 / width as f64;
    let mut out = ImageTensor::zeros(height, width);
    for r in 0..height {
        let (y0, y1, fy) = bilinear_axis((r as f64 + 0.5) * sy - 0.5, image.height());
        for c in 0..width {
            let (x0, x1, fx) = bilinear_axis((c as f64 + 0.5) * sx - 0.5, image.width());
            for ch in 0..ImageTensor::CHANNELS {
                let top = image.get(y0, x0, ch) as f64 * (1.0 - fx) + image.get(y0, x1, ch) as f64 * fx;
                let bot = image.get(y1, x0, ch) as f64 * (1.0 - fx) + image.get(y1, x1, ch) as f64 * fx;
                out.set(r, c, ch, (top * (1.0 - fy) + bot * fy) as f32);
            }
        }
    }
    out
}

/// Nearest-neighbour resize sampling the source pixel containing each output
/// pixel centre.
pub(crate) fn resize_mask(mask: &MaskTensor, height: usize, width: usize) -> MaskTensor {
    if mask.height() == height && mask.width() == width {
        return mask.clone();
    }
    let sy = mask.height() as f64 / height as f64;
    let sx = mask.width() as f64 / width as f64;
    let mut out = MaskTensor::zeros(height, width);
    for r in 0..height {
        let y = (((r as f64 + 0.5) * sy).floor() as usize).min(mask.height() - 1);
        for c in 0..width {
            let x = (((c as f64 + 0.5) * sx).floor() as usize).min(mask.width() - 1);
            out.set(r, c, mask.get(y, x) == 1);
        }
    }
    out
}
