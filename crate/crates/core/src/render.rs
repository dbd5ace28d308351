//! Drawing detections and confusion matrices onto rasters.

use font8x8::{UnicodeFonts, BASIC_FONTS};
use image::{Rgb, RgbImage};

use crate::dataset::CategoryTable;
use crate::detector::Detection;
use crate::evaluator::ConfusionMatrix;

pub const DEFAULT_CONFIDENCE: f64 = 0.60;

const GOLDEN: f64 = 0.618_033_988_749_895;

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> Rgb<u8> {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let (r, g, b) = match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    Rgb([(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8])
}

/// Fixed colour for a category id. Hues advance by the golden ratio so
/// neighbouring ids land far apart on the colour wheel.
pub fn class_color(category_id: u64) -> Rgb<u8> {
    let h = (category_id as f64 * GOLDEN).fract();
    let v = if category_id.is_multiple_of(2) { 0.95 } else { 0.80 };
    hsv_to_rgb(h, 0.85, v)
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

pub fn fill_rect(img: &mut RgbImage, x0: i64, y0: i64, w: i64, h: i64, c: Rgb<u8>) {
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            put(img, x, y, c);
        }
    }
}

fn stroke_rect(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, thickness: i64, c: Rgb<u8>) {
    for t in 0..thickness {
        for x in x0..=x1 {
            put(img, x, y0 + t, c);
            put(img, x, y1 - t, c);
        }
        for y in y0..=y1 {
            put(img, x0 + t, y, c);
            put(img, x1 - t, y, c);
        }
    }
}

pub const GLYPH: i64 = 8;

/// Draws `text` with the 8x8 bitmap font magnified by `scale`.
pub fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, scale: i64, c: Rgb<u8>) {
    for (i, ch) in text.chars().enumerate() {
        let glyph = BASIC_FONTS.get(ch).or_else(|| BASIC_FONTS.get('?')).unwrap_or([0; 8]);
        let gx = x + i as i64 * GLYPH * scale;
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..8 {
                if bits >> col & 1 == 1 {
                    fill_rect(img, gx + col * scale, y + row as i64 * scale, scale, scale, c);
                }
            }
        }
    }
}

fn text_color_on(bg: Rgb<u8>) -> Rgb<u8> {
    let [r, g, b] = bg.0;
    let luma = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
    if luma > 140.0 {
        Rgb([0, 0, 0])
    } else {
        Rgb([255, 255, 255])
    }
}

pub fn label_text(det: &Detection, categories: &CategoryTable) -> String {
    let name = categories
        .get(det.category_id)
        .map(|c| c.name.clone())
        .unwrap_or_else(|| det.category_id.to_string());
    format!("{name} {:.2}", det.score)
}

/// Draws every detection scoring at least `threshold` (inclusive) as a box
/// with a filled label holding the class name and two-decimal score.
pub fn render_detections(
    base: &RgbImage,
    dets: &[Detection],
    categories: &CategoryTable,
    threshold: f64,
) -> RgbImage {
    let mut img = base.clone();
    let thickness = ((img.width().max(img.height()) / 1000) as i64).clamp(1, 4);
    let scale = thickness;
    let mut shown: Vec<&Detection> = dets.iter().filter(|d| d.score >= threshold).collect();
    // Lowest scores first so the most confident labels end up on top.
    shown.sort_by(|a, b| b.rank_cmp(a));
    for d in shown {
        let c = class_color(d.category_id);
        let (x0, y0) = (d.bbox.x().floor() as i64, d.bbox.y().floor() as i64);
        let (x1, y1) = ((d.bbox.x2().ceil() as i64 - 1).max(x0), (d.bbox.y2().ceil() as i64 - 1).max(y0));
        stroke_rect(&mut img, x0, y0, x1, y1, thickness, c);
        let text = label_text(d, categories);
        let (tw, th) = (text.chars().count() as i64 * GLYPH * scale + 2 * scale, GLYPH * scale + 2 * scale);
        let ty = if y0 - th >= 0 { y0 - th } else { y0 };
        fill_rect(&mut img, x0, ty, tw, th, c);
        draw_text(&mut img, x0 + scale, ty + scale, &text, scale, text_color_on(c));
    }
    img
}

/// Heat map of a confusion matrix with each true-class row normalised.
/// Rows and columns follow the matrix label order.
pub fn render_confusion(m: &ConfusionMatrix) -> RgbImage {
    const CELL: i64 = 24;
    let n = m.labels.len() as i64;
    let mut img = RgbImage::from_pixel((n * CELL + 1) as u32, (n * CELL + 1) as u32, Rgb([255, 255, 255]));
    for (r, row) in m.cells.iter().enumerate() {
        let total: u64 = row.iter().sum();
        for (c, &v) in row.iter().enumerate() {
            let frac = if total == 0 { 0.0 } else { v as f64 / total as f64 };
            let shade = (255.0 * (1.0 - frac)).round() as u8;
            let colour = Rgb([shade, shade, 255]);
            fill_rect(&mut img, c as i64 * CELL + 1, r as i64 * CELL + 1, CELL - 1, CELL - 1, colour);
        }
    }
    for i in 0..=n {
        fill_rect(&mut img, i * CELL, 0, 1, n * CELL + 1, Rgb([128, 128, 128]));
        fill_rect(&mut img, 0, i * CELL, n * CELL + 1, 1, Rgb([128, 128, 128]));
    }
    img
}
