//! PNG figures: training curves, confusion matrix and mask overlays.

use std::path::Path;

use font8x8::UnicodeFonts;
use image::imageops::FilterType;
use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_filled_rect_mut, draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;

use crate::error::{Error, Result};
use crate::metrics::ConfusionCounts;
use crate::raster::{ImageTensor, MaskTensor};
use crate::trainer::EpochRecord;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const IOU: Rgb<u8> = Rgb([31, 119, 180]);
const F1: Rgb<u8> = Rgb([255, 127, 14]);
const LOSS: Rgb<u8> = Rgb([120, 120, 120]);

pub const TRUTH: Rgb<u8> = Rgb([0, 200, 0]);
pub const PREDICTION: Rgb<u8> = Rgb([220, 30, 30]);
pub const INTERSECTION: Rgb<u8> = Rgb([255, 215, 0]);

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Draws `s` with the 8x8 bitmap font; pixels outside the canvas are dropped.
pub fn draw_text(img: &mut RgbImage, x: i64, y: i64, s: &str, color: Rgb<u8>, scale: u32) {
    let scale = scale.max(1) as i64;
    for (i, ch) in s.chars().enumerate() {
        let Some(glyph) = font8x8::BASIC_FONTS.get(ch) else { continue };
        let ox = x + i as i64 * 8 * scale;
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..8 {
                if bits >> col & 1 == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let px = ox + col * scale + dx;
                        let py = y + row as i64 * scale + dy;
                        if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                            img.put_pixel(px as u32, py as u32, color);
                        }
                    }
                }
            }
        }
    }
}

fn text_width(s: &str, scale: u32) -> i64 {
    (s.chars().count() * 8 * scale as usize) as i64
}

/// Validation IoU and F1 per epoch on a fixed [0, 1] axis, with training loss
/// scaled to its own maximum. The best epoch is marked.
pub fn training_curves(records: &[EpochRecord], path: &Path) -> Result<()> {
    let (w, h) = (720u32, 440u32);
    let (left, right, top, bottom) = (60.0f32, 20.0f32, 40.0f32, 50.0f32);
    let (pw, ph) = (w as f32 - left - right, h as f32 - top - bottom);
    let mut img = RgbImage::from_pixel(w, h, WHITE);

    for k in 0..=10 {
        let y = top + ph * (1.0 - k as f32 / 10.0);
        draw_line_segment_mut(&mut img, (left, y), (left + pw, y), GRID);
        if k % 2 == 0 {
            draw_text(&mut img, 16, y as i64 - 4, &format!("{:.1}", k as f32 / 10.0), BLACK, 1);
        }
    }
    draw_hollow_rect_mut(&mut img, Rect::at(left as i32, top as i32).of_size(pw as u32 + 1, ph as u32 + 1), BLACK);
    draw_text(&mut img, left as i64, 12, "validation IoU / F1 per epoch", BLACK, 2);

    let n = records.len();
    let first = records.first().map_or(1, |r| r.epoch);
    let last = records.last().map_or(1, |r| r.epoch);
    let span = (last - first).max(1) as f32;
    let x_of = |epoch: usize| left + pw * (epoch - first) as f32 / span;
    let y_of = |v: f64| top + ph * (1.0 - v.clamp(0.0, 1.0) as f32);

    let ticks = 6.min(n.max(1));
    for t in 0..ticks {
        let epoch = first + ((last - first) * t) / (ticks - 1).max(1);
        let label = epoch.to_string();
        let x = x_of(epoch);
        draw_line_segment_mut(&mut img, (x, top + ph), (x, top + ph + 4.0), BLACK);
        draw_text(&mut img, x as i64 - text_width(&label, 1) / 2, (top + ph + 8.0) as i64, &label, BLACK, 1);
    }
    draw_text(&mut img, (left + pw / 2.0) as i64 - 20, h as i64 - 20, "epoch", BLACK, 1);

    let max_loss = records
        .iter()
        .map(|r| r.train_loss)
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max);
    let scaled_loss = |r: &EpochRecord| if max_loss > 0.0 { r.train_loss / max_loss } else { 0.0 };
    let series: [(&str, Rgb<u8>, Vec<f64>); 3] = [
        ("val IoU", IOU, records.iter().map(|r| r.val_iou).collect()),
        ("val F1", F1, records.iter().map(|r| r.val_f1).collect()),
        ("train loss (scaled)", LOSS, records.iter().map(scaled_loss).collect()),
    ];
    for (s, (label, color, values)) in series.iter().enumerate() {
        for (i, pair) in records.windows(2).enumerate() {
            let a = (x_of(pair[0].epoch), y_of(values[i]));
            let b = (x_of(pair[1].epoch), y_of(values[i + 1]));
            draw_line_segment_mut(&mut img, a, b, *color);
        }
        if n == 1 {
            let r = &records[0];
            draw_filled_circle_mut(&mut img, (x_of(r.epoch) as i32, y_of(values[0]) as i32), 3, *color);
        }
        let lx = left as i64 + 10 + 190 * s as i64;
        draw_filled_rect_mut(&mut img, Rect::at(lx as i32, top as i32 + 8).of_size(14, 8), *color);
        draw_text(&mut img, lx + 20, top as i64 + 8, label, BLACK, 1);
    }
    if let Some(best) = records
        .iter()
        .filter(|r| r.val_iou.is_finite())
        .max_by(|a, b| a.val_iou.total_cmp(&b.val_iou).then(b.epoch.cmp(&a.epoch)))
    {
        let (x, y) = (x_of(best.epoch), y_of(best.val_iou));
        draw_filled_circle_mut(&mut img, (x as i32, y as i32), 5, IOU);
        let label = format!("best {:.3} @ {}", best.val_iou, best.epoch);
        draw_text(&mut img, (x as i64 - text_width(&label, 1)).max(left as i64 + 2), y as i64 + 10, &label, BLACK, 1);
    }
    save(&img, path)
}

/// Two-by-two pixel confusion matrix: rows are the truth, columns the
/// prediction. Cell shade is the row-normalised rate.
pub fn confusion_matrix(counts: &ConfusionCounts, path: &Path) -> Result<()> {
    let cell = 180u32;
    let (left, top) = (150u32, 90u32);
    let (w, h) = (left + 2 * cell + 30, top + 2 * cell + 40);
    let mut img = RgbImage::from_pixel(w, h, WHITE);
    draw_text(&mut img, 20, 16, "pixel confusion matrix", BLACK, 2);

    let cells = [
        [counts.true_neg, counts.false_pos],
        [counts.false_neg, counts.true_pos],
    ];
    let names = ["negative", "positive"];
    for (r, row) in cells.iter().enumerate() {
        let row_total: u64 = row.iter().sum();
        for (c, &count) in row.iter().enumerate() {
            let rate = if row_total == 0 { 0.0 } else { count as f64 / row_total as f64 };
            let shade = |full: u8| (255.0 - rate * (255.0 - full as f64)).round() as u8;
            let fill = Rgb([shade(8), shade(48), shade(107)]);
            let (x, y) = (left + c as u32 * cell, top + r as u32 * cell);
            draw_filled_rect_mut(&mut img, Rect::at(x as i32, y as i32).of_size(cell, cell), fill);
            draw_hollow_rect_mut(&mut img, Rect::at(x as i32, y as i32).of_size(cell, cell), BLACK);
            let ink = if rate > 0.5 { WHITE } else { BLACK };
            let n = count.to_string();
            let pct = format!("{:.2}%", 100.0 * rate);
            let cx = (x + cell / 2) as i64;
            draw_text(&mut img, cx - text_width(&n, 2) / 2, (y + cell / 2) as i64 - 20, &n, ink, 2);
            draw_text(&mut img, cx - text_width(&pct, 1) / 2, (y + cell / 2) as i64 + 6, &pct, ink, 1);
        }
        let y = (top + r as u32 * cell + cell / 2) as i64 - 4;
        draw_text(&mut img, left as i64 - 12 - text_width(names[r], 1), y, names[r], BLACK, 1);
        let x = (left + r as u32 * cell + cell / 2) as i64;
        draw_text(&mut img, x - text_width(names[r], 1) / 2, top as i64 - 14, names[r], BLACK, 1);
    }
    draw_text(&mut img, (left + cell) as i64 - 36, top as i64 - 34, "predicted", BLACK, 1);
    draw_text(&mut img, 12, (top + cell) as i64 - 4, "truth", BLACK, 1);
    save(&img, path)
}

/// Colour for an overlay pixel, or `None` where both masks are background.
pub fn overlay_color(truth: bool, pred: bool) -> Option<Rgb<u8>> {
    match (truth, pred) {
        (true, true) => Some(INTERSECTION),
        (true, false) => Some(TRUTH),
        (false, true) => Some(PREDICTION),
        (false, false) => None,
    }
}

/// Panels smaller than this are enlarged by an integer nearest-neighbour factor.
pub const MIN_PANEL: usize = 256;

/// The radiograph beside a copy tinted with truth, prediction and their
/// intersection in three hues, plus a legend strip.
pub fn render_overlay(image: &ImageTensor, truth: &MaskTensor, pred: &MaskTensor) -> Result<RgbImage> {
    let (h, w) = (image.height(), image.width());
    if !truth.same_shape(pred) || truth.height() != h || truth.width() != w {
        return Err(Error::shape(
            format!("{h}x{w} masks"),
            format!("{}x{} and {}x{}", truth.height(), truth.width(), pred.height(), pred.width()),
        ));
    }
    let mut panels = RgbImage::new(2 * w as u32, h as u32);
    let alpha = 0.55f32;
    for r in 0..h {
        for c in 0..w {
            let base = |ch: usize| (image.get(r, c, ch).clamp(0.0, 1.0) * 255.0).round();
            let px = Rgb([base(0) as u8, base(1) as u8, base(2) as u8]);
            panels.put_pixel(c as u32, r as u32, px);
            let tinted = match overlay_color(truth.get(r, c) == 1, pred.get(r, c) == 1) {
                Some(Rgb(t)) => {
                    let mix = |ch: usize| ((1.0 - alpha) * base(ch) + alpha * t[ch] as f32).round() as u8;
                    Rgb([mix(0), mix(1), mix(2)])
                }
                None => px,
            };
            panels.put_pixel((w + c) as u32, r as u32, tinted);
        }
    }
    let scale = MIN_PANEL.div_ceil(h.max(w).max(1)).max(1) as u32;
    let panels = if scale > 1 {
        image::imageops::resize(&panels, panels.width() * scale, panels.height() * scale, FilterType::Nearest)
    } else {
        panels
    };
    let legend = 14u32;
    let mut img = RgbImage::from_pixel(panels.width(), panels.height() + legend, WHITE);
    image::imageops::replace(&mut img, &panels, 0, 0);
    let y = panels.height() as i64 + 3;
    let mut x = 2i64;
    for (label, color) in [("truth", TRUTH), ("pred", PREDICTION), ("both", INTERSECTION)] {
        draw_filled_rect_mut(&mut img, Rect::at(x as i32, y as i32).of_size(8, 8), color);
        draw_text(&mut img, x + 10, y, label, BLACK, 1);
        x += 12 + text_width(label, 1) + 6;
    }
    Ok(img)
}

pub fn save_overlay(image: &ImageTensor, truth: &MaskTensor, pred: &MaskTensor, path: &Path) -> Result<()> {
    save(&render_overlay(image, truth, pred)?, path)
}

/// Writes a mask as an 8-bit PNG with values 0 and 255.
pub fn save_mask(mask: &MaskTensor, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let img = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.to_gray_u8())
        .ok_or_else(|| Error::shape(format!("{}x{}", mask.height(), mask.width()), "buffer length"))?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(epoch: usize, iou: f64) -> EpochRecord {
        EpochRecord {
            epoch,
            train_loss: 1.0 / epoch as f64,
            train_bce: 0.5,
            train_dice: 0.5,
            val_iou: iou,
            val_f1: 2.0 * iou / (1.0 + iou),
            lr: 1e-4,
            wall_time: 1.0,
            best_val_iou: iou,
            improved: true,
            loss_scale: None,
        }
    }

    #[test]
    fn curves_render_for_one_and_many_epochs() {
        let dir = tempfile::tempdir().unwrap();
        for n in [1, 2, 17] {
            let recs: Vec<EpochRecord> = (1..=n).map(|e| record(e, e as f64 / 20.0)).collect();
            let path = dir.path().join(format!("c{n}.png"));
            training_curves(&recs, &path).unwrap();
            assert_eq!(image::open(&path).unwrap().width(), 720);
        }
    }

    #[test]
    fn confusion_renders_with_empty_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cm.png");
        confusion_matrix(&ConfusionCounts::new(0, 0, 0, 100), &path).unwrap();
        assert!(path.exists());
    }

    #[test]
    fn overlay_uses_three_hues() {
        let image = ImageTensor::zeros(4, 4);
        let mut truth = MaskTensor::zeros(4, 4);
        let mut pred = MaskTensor::zeros(4, 4);
        truth.set(0, 0, true);
        truth.set(1, 1, true);
        pred.set(1, 1, true);
        pred.set(2, 2, true);
        let img = render_overlay(&image, &truth, &pred).unwrap();
        let s = (MIN_PANEL / 4) as u32;
        assert_eq!(img.dimensions(), (8 * s, 4 * s + 14));
        let at = |x: u32, y: u32| *img.get_pixel(x * s + s / 2, y * s + s / 2);
        let tint = |c: Rgb<u8>| Rgb(c.0.map(|v| (0.55 * v as f32).round() as u8));
        assert_eq!(at(4, 0), tint(TRUTH));
        assert_eq!(at(5, 1), tint(INTERSECTION));
        assert_eq!(at(6, 2), tint(PREDICTION));
        assert_eq!(at(7, 3), Rgb([0, 0, 0]));
        assert_eq!(at(0, 0), Rgb([0, 0, 0]));
    }

    #[test]
    fn mask_png_is_zero_or_255() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = MaskTensor::zeros(3, 5);
        m.set(2, 4, true);
        let path = dir.path().join("m.png");
        save_mask(&m, &path).unwrap();
        let g = image::open(&path).unwrap().to_luma8();
        assert_eq!(g.dimensions(), (5, 3));
        assert_eq!(g.get_pixel(4, 2).0[0], 255);
        assert_eq!(g.pixels().filter(|p| p.0[0] == 255).count(), 1);
        assert!(g.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
    }

    #[test]
    fn text_clips_at_edges() {
        let mut img = RgbImage::from_pixel(10, 10, WHITE);
        draw_text(&mut img, -4, 6, "AB", BLACK, 2);
        assert!(img.pixels().any(|p| *p == BLACK));
    }
}
