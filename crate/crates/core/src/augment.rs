//! Box-aware augmentations for patch rasters.
//!
//! Three strategies are offered. `Pixel` uses motion blur, brightness/contrast
//! and random shadow. `Spatial` uses the bbox-safe crop, both flips and pixel
//! dropout. `Both` uses all seven. Each transform in a strategy fires
//! independently with the configured probability, in a fixed order.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, DatasetIndex, ImageRecord};
use crate::error::{Error, Result};
use crate::geometry::{union_box, BBox};
use crate::slicer::{load_raster, save_raster};

pub const DROPOUT_RATE: f64 = 0.01;
pub const CONTRAST_RANGE: (f64, f64) = (0.8, 1.2);
/// Brightness offset range as a fraction of the channel maximum.
pub const BRIGHTNESS_RANGE: (f64, f64) = (-0.2, 0.2);
pub const BLUR_LENGTHS: [u32; 3] = [3, 5, 7];
pub const SHADOW_FACTOR_RANGE: (f64, f64) = (0.3, 0.7);
pub const SHADOW_VERTICES: (usize, usize) = (3, 6);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Pixel,
    Spatial,
    Both,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Transform {
    Crop,
    HFlip,
    VFlip,
    Dropout,
    Blur,
    BrightnessContrast,
    Shadow,
}

/// Application order shared by all strategies.
const ORDER: [Transform; 7] = [
    Transform::Crop,
    Transform::HFlip,
    Transform::VFlip,
    Transform::Dropout,
    Transform::Blur,
    Transform::BrightnessContrast,
    Transform::Shadow,
];

impl Strategy {
    fn includes(self, t: Transform) -> bool {
        let spatial = matches!(t, Transform::Crop | Transform::HFlip | Transform::VFlip | Transform::Dropout);
        match self {
            Strategy::None => false,
            Strategy::Both => true,
            Strategy::Spatial => spatial,
            Strategy::Pixel => !spatial,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationSpec {
    pub strategy: Strategy,
    pub probability: f64,
    pub seed: u64,
    /// Output size of the bbox-safe crop; `None` keeps the patch size.
    pub crop_target: Option<(u32, u32)>,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            strategy: Strategy::Spatial,
            probability: 0.5,
            seed: 0,
            crop_target: None,
        }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::Config(format!("augmentation probability {} outside [0, 1]", self.probability)));
        }
        if let Some((w, h)) = self.crop_target {
            if w == 0 || h == 0 {
                return Err(Error::Config("crop target must be positive".into()));
            }
        }
        Ok(())
    }
}

pub use crate::seed::stream_rng as patch_rng;

pub fn hflip(raster: &RgbImage, boxes: &[Annotation]) -> (RgbImage, Vec<Annotation>) {
    let w = raster.width() as f64;
    let out = boxes
        .iter()
        .map(|a| {
            let mut a = a.clone();
            let b = a.bbox;
            a.bbox = BBox::new((w - b.x() - b.w()).max(0.0), b.y(), b.w(), b.h()).expect("reflection keeps size");
            a
        })
        .collect();
    (image::imageops::flip_horizontal(raster), out)
}

pub fn vflip(raster: &RgbImage, boxes: &[Annotation]) -> (RgbImage, Vec<Annotation>) {
    let h = raster.height() as f64;
    let out = boxes
        .iter()
        .map(|a| {
            let mut a = a.clone();
            let b = a.bbox;
            a.bbox = BBox::new(b.x(), (h - b.y() - b.h()).max(0.0), b.w(), b.h()).expect("reflection keeps size");
            a
        })
        .collect();
    (image::imageops::flip_vertical(raster), out)
}

/// Picks a crop window containing every box, then rescales it to `target`.
/// Without boxes any window of at least one pixel is allowed.
pub fn bbox_safe_random_crop(
    raster: &RgbImage,
    boxes: &[Annotation],
    target: (u32, u32),
    rng: &mut impl Rng,
) -> (RgbImage, Vec<Annotation>) {
    let (w, h) = raster.dimensions();
    let (x0, y0, x1, y1) = match boxes.iter().map(|a| a.bbox).reduce(|a, b| union_box(&a, &b)) {
        Some(hull) => {
            let hx0 = hull.x().floor().clamp(0.0, w as f64 - 1.0) as u32;
            let hy0 = hull.y().floor().clamp(0.0, h as f64 - 1.0) as u32;
            let hx1 = (hull.x2().ceil() as u32).clamp(hx0 + 1, w);
            let hy1 = (hull.y2().ceil() as u32).clamp(hy0 + 1, h);
            (
                rng.gen_range(0..=hx0),
                rng.gen_range(0..=hy0),
                rng.gen_range(hx1..=w),
                rng.gen_range(hy1..=h),
            )
        }
        None => {
            let cw = rng.gen_range(1..=w);
            let ch = rng.gen_range(1..=h);
            let x0 = rng.gen_range(0..=w - cw);
            let y0 = rng.gen_range(0..=h - ch);
            (x0, y0, x0 + cw, y0 + ch)
        }
    };
    let (cw, ch) = (x1 - x0, y1 - y0);
    let crop = image::imageops::crop_imm(raster, x0, y0, cw, ch).to_image();
    let resized = if (cw, ch) == target {
        crop
    } else {
        image::imageops::resize(&crop, target.0, target.1, image::imageops::FilterType::Triangle)
    };
    let sx = target.0 as f64 / cw as f64;
    let sy = target.1 as f64 / ch as f64;
    let (tw, th) = (target.0 as f64, target.1 as f64);
    let out = boxes
        .iter()
        .map(|a| {
            let b = a.bbox;
            let bx1 = ((b.x() - x0 as f64) * sx).clamp(0.0, tw);
            let by1 = ((b.y() - y0 as f64) * sy).clamp(0.0, th);
            let bx2 = ((b.x2() - x0 as f64) * sx).clamp(0.0, tw);
            let by2 = ((b.y2() - y0 as f64) * sy).clamp(0.0, th);
            let mut a = a.clone();
            a.bbox = BBox::from_corners(bx1, by1, bx2, by2).expect("crop window contains every box");
            a
        })
        .collect();
    (resized, out)
}

/// Zeroes each pixel independently with probability `rate`.
pub fn pixel_dropout(raster: &RgbImage, rate: f64, rng: &mut impl Rng) -> RgbImage {
    let mut out = raster.clone();
    if rate <= 0.0 {
        return out;
    }
    for px in out.pixels_mut() {
        if rate >= 1.0 || rng.gen_bool(rate) {
            *px = Rgb([0, 0, 0]);
        }
    }
    out
}

/// `out = clamp(alpha * in + beta * 255)` per channel.
pub fn adjust_brightness_contrast(raster: &RgbImage, alpha: f64, beta: f64) -> RgbImage {
    let mut out = raster.clone();
    let lut: Vec<u8> = (0..=255u32)
        .map(|v| (alpha * v as f64 + beta * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    for px in out.pixels_mut() {
        for c in px.0.iter_mut() {
            *c = lut[*c as usize];
        }
    }
    out
}

pub fn brightness_contrast(raster: &RgbImage, rng: &mut impl Rng) -> RgbImage {
    let alpha = rng.gen_range(CONTRAST_RANGE.0..=CONTRAST_RANGE.1);
    let beta = rng.gen_range(BRIGHTNESS_RANGE.0..=BRIGHTNESS_RANGE.1);
    adjust_brightness_contrast(raster, alpha, beta)
}

/// Averages `length` samples along a line at `angle` radians through each
/// pixel, clamping sample positions to the raster.
pub fn motion_blur_with(raster: &RgbImage, length: u32, angle: f64) -> RgbImage {
    let half = (length / 2) as i64;
    let offsets: Vec<(i64, i64)> = (-half..=half)
        .map(|t| ((t as f64 * angle.cos()).round() as i64, (t as f64 * angle.sin()).round() as i64))
        .collect();
    let (w, h) = (raster.width() as i64, raster.height() as i64);
    let n = offsets.len() as u32;
    RgbImage::from_fn(raster.width(), raster.height(), |x, y| {
        let mut acc = [0u32; 3];
        for &(dx, dy) in &offsets {
            let sx = (x as i64 + dx).clamp(0, w - 1) as u32;
            let sy = (y as i64 + dy).clamp(0, h - 1) as u32;
            let p = raster.get_pixel(sx, sy);
            for c in 0..3 {
                acc[c] += p[c] as u32;
            }
        }
        Rgb(acc.map(|v| ((v + n / 2) / n) as u8))
    })
}

pub fn motion_blur(raster: &RgbImage, rng: &mut impl Rng) -> RgbImage {
    let length = BLUR_LENGTHS[rng.gen_range(0..BLUR_LENGTHS.len())];
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    motion_blur_with(raster, length, angle)
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Counter-clockwise convex hull (monotone chain).
fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(pts.len() * 2);
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn inside_convex(hull: &[(f64, f64)], p: (f64, f64)) -> bool {
    hull.len() >= 3 && (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], p) >= 0.0)
}

/// Multiplies pixels whose centres fall inside `polygon` by `factor`.
pub fn shadow_polygon(raster: &RgbImage, polygon: &[(f64, f64)], factor: f64) -> RgbImage {
    let hull = convex_hull(polygon.to_vec());
    let mut out = raster.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if inside_convex(&hull, (x as f64 + 0.5, y as f64 + 0.5)) {
            for c in px.0.iter_mut() {
                *c = (*c as f64 * factor).round() as u8;
            }
        }
    }
    out
}

pub fn random_shadow(raster: &RgbImage, rng: &mut impl Rng) -> RgbImage {
    let n = rng.gen_range(SHADOW_VERTICES.0..=SHADOW_VERTICES.1);
    let (w, h) = (raster.width() as f64, raster.height() as f64);
    let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen_range(0.0..=w), rng.gen_range(0.0..=h))).collect();
    let factor = rng.gen_range(SHADOW_FACTOR_RANGE.0..=SHADOW_FACTOR_RANGE.1);
    shadow_polygon(raster, &pts, factor)
}

/// Runs the strategy's transforms in the fixed order. A coin is drawn for
/// every transform of the strategy, fired or not, so the stream layout only
/// depends on the strategy.
pub fn apply_strategy(
    raster: &RgbImage,
    boxes: &[Annotation],
    spec: &AugmentationSpec,
    rng: &mut impl Rng,
) -> (RgbImage, Vec<Annotation>) {
    let mut img = raster.clone();
    let mut anns = boxes.to_vec();
    let target = spec.crop_target.unwrap_or(raster.dimensions());
    for t in ORDER {
        if !spec.strategy.includes(t) {
            continue;
        }
        if !rng.gen_bool(spec.probability) {
            continue;
        }
        match t {
            Transform::Crop => (img, anns) = bbox_safe_random_crop(&img, &anns, target, rng),
            Transform::HFlip => (img, anns) = hflip(&img, &anns),
            Transform::VFlip => (img, anns) = vflip(&img, &anns),
            Transform::Dropout => img = pixel_dropout(&img, DROPOUT_RATE, rng),
            Transform::Blur => img = motion_blur(&img, rng),
            Transform::BrightnessContrast => img = brightness_contrast(&img, rng),
            Transform::Shadow => img = random_shadow(&img, rng),
        }
    }
    (img, anns)
}

/// Augments every patch of a patched dataset, writing rasters to `out_dir`
/// with file names suffixed by the seed, and returns the augmented dataset.
pub fn materialize(
    patched: &DatasetIndex,
    patch_dir: &Path,
    out_dir: &Path,
    spec: &AugmentationSpec,
) -> Result<DatasetIndex> {
    spec.validate()?;
    let by_image = patched.annotations_by_image();
    let results: Vec<Result<(ImageRecord, Vec<Annotation>)>> = patched
        .images
        .par_iter()
        .map(|img| {
            let raster = load_raster(&patch_dir.join(&img.file_path))?;
            let boxes: Vec<Annotation> = by_image[&img.image_id].iter().map(|a| (*a).clone()).collect();
            let mut rng = patch_rng(spec.seed, img.image_id);
            let (out, anns) = apply_strategy(&raster, &boxes, spec, &mut rng);
            let stem = Path::new(&img.file_path)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("patch_{}", img.image_id));
            let name = format!("{stem}_aug{}.png", spec.seed);
            save_raster(&out_dir.join(&name), &out)?;
            let mut rec = img.clone();
            rec.file_path = name;
            rec.width = out.width();
            rec.height = out.height();
            Ok((rec, anns))
        })
        .collect();
    let mut images = Vec::with_capacity(results.len());
    let mut annotations = Vec::new();
    for r in results {
        let (img, anns) = r?;
        images.push(img);
        annotations.extend(anns);
    }
    Ok(DatasetIndex {
        images,
        annotations,
        categories: patched.categories.clone(),
        extra: patched.extra.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    fn ann(id: u64, cat: u64, b: BBox) -> Annotation {
        Annotation::new(id, 1, cat, b)
    }

    fn noise(w: u32, h: u32, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(w, h, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]))
    }

    fn boxes_inside(img: &RgbImage, anns: &[Annotation]) -> bool {
        anns.iter().all(|a| {
            a.bbox.w() > 0.0
                && a.bbox.h() > 0.0
                && a.bbox.x2() <= img.width() as f64 + 1e-9
                && a.bbox.y2() <= img.height() as f64 + 1e-9
        })
    }

    #[test]
    fn flips_are_involutions() {
        let img = noise(100, 60, 1);
        let boxes = vec![ann(1, 3, bx(0.0, 0.0, 10.0, 10.0)), ann(2, 4, bx(30.5, 20.0, 12.0, 7.5))];
        let (once, b1) = hflip(&img, &boxes);
        assert_eq!(b1[0].bbox, bx(90.0, 0.0, 10.0, 10.0));
        let (twice, b2) = hflip(&once, &b1);
        assert_eq!((twice, b2), (img.clone(), boxes.clone()));
        let (v, vb) = vflip(&img, &boxes);
        assert_eq!(vflip(&v, &vb), (img, boxes));
    }

    #[test]
    fn centred_box_survives_vflip() {
        let img = noise(100, 100, 2);
        let boxes = vec![ann(1, 1, bx(40.0, 40.0, 20.0, 20.0))];
        assert_eq!(vflip(&img, &boxes).1, boxes);
    }

    #[test]
    fn crop_without_boxes_hits_target() {
        let img = noise(100, 80, 3);
        for seed in 0..20 {
            let (out, anns) = bbox_safe_random_crop(&img, &[], (64, 48), &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(out.dimensions(), (64, 48));
            assert!(anns.is_empty());
        }
    }

    #[test]
    fn crop_with_full_box_is_rescale_only() {
        let img = noise(100, 100, 4);
        let boxes = vec![ann(1, 1, bx(0.0, 0.0, 100.0, 100.0))];
        let (out, anns) = bbox_safe_random_crop(&img, &boxes, (100, 100), &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(out, img);
        assert_eq!(anns, boxes);
    }

    #[test]
    fn crop_keeps_boxes_inside_over_many_seeds() {
        let img = noise(100, 100, 5);
        let boxes = vec![
            ann(1, 1, bx(10.0, 10.0, 30.0, 20.0)),
            ann(2, 2, bx(60.0, 70.0, 30.0, 20.0)),
            ann(3, 2, bx(40.5, 30.25, 3.0, 2.0)),
        ];
        for seed in 0..1000 {
            let (out, anns) = bbox_safe_random_crop(&img, &boxes, (100, 100), &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(out.dimensions(), (100, 100));
            assert!(boxes_inside(&out, &anns), "seed {seed}");
            assert_eq!(anns.iter().map(|a| a.category_id).collect::<Vec<_>>(), vec![1, 2, 2]);
        }
    }

    #[test]
    fn dropout_extremes_and_rate() {
        let img = noise(500, 500, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        assert_eq!(pixel_dropout(&img, 0.0, &mut rng), img);
        assert!(pixel_dropout(&img, 1.0, &mut rng).pixels().all(|p| p.0 == [0, 0, 0]));
        // Count pixels zeroed by the transform (the source has almost no black pixels).
        let out = pixel_dropout(&img, 0.01, &mut rng);
        let dropped = img
            .pixels()
            .zip(out.pixels())
            .filter(|(a, b)| a != b)
            .count() as f64;
        let (mean, sd) = (2500.0, (250_000.0f64 * 0.01 * 0.99).sqrt());
        assert!((dropped - mean).abs() <= 3.0 * sd, "dropped {dropped}");
    }

    #[test]
    fn brightness_identity_and_offset() {
        let img = noise(30, 30, 7);
        assert_eq!(adjust_brightness_contrast(&img, 1.0, 0.0), img);
        let gray = RgbImage::from_pixel(8, 8, Rgb([128, 128, 128]));
        let out = adjust_brightness_contrast(&gray, 1.0, 0.2);
        assert!(out.pixels().all(|p| p.0 == [179, 179, 179]));
        let white = RgbImage::from_pixel(4, 4, Rgb([250, 250, 250]));
        assert!(adjust_brightness_contrast(&white, 1.0, 0.2).pixels().all(|p| p.0 == [255; 3]));
    }

    #[test]
    fn blur_leaves_constant_raster_alone() {
        let flat = RgbImage::from_pixel(40, 30, Rgb([12, 200, 77]));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            assert_eq!(motion_blur(&flat, &mut rng), flat);
        }
    }

    #[test]
    fn horizontal_blur_averages_along_row() {
        let img = RgbImage::from_fn(5, 1, |x, _| Rgb([(x * 30) as u8, 0, 0]));
        let out = motion_blur_with(&img, 3, 0.0);
        assert_eq!(out.get_pixel(2, 0)[0], 60);
        // Edge samples clamp: (0 + 0 + 30) / 3.
        assert_eq!(out.get_pixel(0, 0)[0], 10);
    }

    #[test]
    fn shadow_darkens_only_inside_polygon() {
        let img = RgbImage::from_pixel(20, 20, Rgb([100, 100, 100]));
        let out = shadow_polygon(&img, &[(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)], 0.5);
        assert_eq!(out.get_pixel(5, 5).0, [50; 3]);
        assert_eq!(out.get_pixel(15, 15).0, [100; 3]);
        assert_eq!(convex_hull(vec![(0.0, 0.0), (1.0, 1.0), (2.0, 0.0), (1.0, 0.2), (1.0, -1.0)]).len(), 4);
    }

    fn spec(strategy: Strategy, seed: u64) -> AugmentationSpec {
        AugmentationSpec {
            strategy,
            seed,
            ..AugmentationSpec::default()
        }
    }

    #[test]
    fn strategies_respect_contracts() {
        let img = noise(64, 64, 9);
        let boxes = vec![ann(1, 5, bx(5.0, 6.0, 20.0, 10.0)), ann(2, 7, bx(40.0, 30.0, 10.0, 30.0))];
        let none = apply_strategy(&img, &boxes, &spec(Strategy::None, 1), &mut patch_rng(1, 1));
        assert_eq!(none, (img.clone(), boxes.clone()));
        for seed in 0..50 {
            let (_, pb) = apply_strategy(&img, &boxes, &spec(Strategy::Pixel, seed), &mut patch_rng(seed, 3));
            assert_eq!(pb, boxes);
            for strategy in [Strategy::Spatial, Strategy::Both] {
                let s = spec(strategy, seed);
                let a = apply_strategy(&img, &boxes, &s, &mut patch_rng(seed, 3));
                let b = apply_strategy(&img, &boxes, &s, &mut patch_rng(seed, 3));
                assert_eq!(a, b);
                assert!(boxes_inside(&a.0, &a.1));
                assert_eq!(a.1.iter().map(|x| x.category_id).collect::<Vec<_>>(), vec![5, 7]);
            }
        }
    }

    #[test]
    fn probability_zero_is_identity() {
        let img = noise(32, 32, 10);
        let boxes = vec![ann(1, 1, bx(1.0, 1.0, 5.0, 5.0))];
        let mut s = spec(Strategy::Both, 4);
        s.probability = 0.0;
        assert_eq!(apply_strategy(&img, &boxes, &s, &mut patch_rng(4, 1)), (img, boxes));
    }

    #[test]
    fn patch_streams_differ() {
        let a: u64 = patch_rng(7, 1).gen();
        let b: u64 = patch_rng(7, 2).gen();
        assert_ne!(a, b);
        assert_eq!(a, patch_rng(7, 1).gen::<u64>());
    }
}
