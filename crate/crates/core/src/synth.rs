//! Seeded synthetic datasets: coloured shapes on textured backgrounds with
//! exact annotations and long-tailed class frequencies.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, Category, CategoryTable, DatasetIndex, EnvMetadata, ImageRecord, Substrate};
use crate::error::{Error, Result};
use crate::evaluator::{MEDIUM_MAX_AREA, SMALL_MAX_AREA};
use crate::geometry::BBox;
use crate::render::class_color;
use crate::seed::stream_rng;
use crate::slicer::save_raster;

/// Objects never exceed this many pixels per side, so with 500 px windows at
/// a 250 px step each one lies wholly inside at least one patch.
pub const MAX_OBJECT_SIDE: u32 = 240;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_images: usize,
    pub width_range: (u32, u32),
    pub height_range: (u32, u32),
    /// Exact object count per class; class `i` gets category id `i + 1`.
    pub class_counts: Vec<usize>,
    /// Probability of drawing a small, medium or large object.
    pub size_mix: [f64; 3],
    /// Nominal side length range of small, medium and large objects. Drawn
    /// sizes are resampled until their area falls in the matching bucket.
    pub side_ranges: [(f64, f64); 3],
    /// Minimum free pixels between two objects.
    pub margin: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_images: 20,
            width_range: (2900, 3100),
            height_range: (3900, 4100),
            class_counts: long_tail_counts(25, 200, 2),
            size_mix: [0.4, 0.4, 0.2],
            side_ranges: [(6.0, 30.0), (36.0, 92.0), (100.0, 230.0)],
            margin: 4,
            seed: 0,
        }
    }
}

/// Geometric decay from `head` down to `tail` over `classes` classes.
pub fn long_tail_counts(classes: usize, head: usize, tail: usize) -> Vec<usize> {
    if classes == 1 {
        return vec![head];
    }
    let ratio = tail as f64 / head as f64;
    (0..classes)
        .map(|k| (head as f64 * ratio.powf(k as f64 / (classes - 1) as f64)).round() as usize)
        .collect()
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_images == 0 {
            return Err(Error::Config("synth needs at least one image".into()));
        }
        let (w0, w1) = self.width_range;
        let (h0, h1) = self.height_range;
        if w0 == 0 || h0 == 0 || w0 > w1 || h0 > h1 {
            return Err(Error::Config("synth size ranges must be non-empty and positive".into()));
        }
        if self.class_counts.is_empty() {
            return Err(Error::Config("synth needs at least one class".into()));
        }
        let total: f64 = self.size_mix.iter().sum();
        if self.size_mix.iter().any(|p| *p < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config("size_mix must be non-negative and sum to 1".into()));
        }
        let [(s0, s1), (m0, m1), (l0, l1)] = self.side_ranges;
        let bucket_ok = s0 >= 1.0
            && s0 <= s1
            && s0 * s0 < SMALL_MAX_AREA
            && m0 <= m1
            && m1 * m1 >= SMALL_MAX_AREA
            && m0 * m0 < MEDIUM_MAX_AREA
            && l0 <= l1
            && l1 * l1 >= MEDIUM_MAX_AREA
            && l1 <= MAX_OBJECT_SIDE as f64;
        if !bucket_ok {
            return Err(Error::Config("side_ranges must reach into their size buckets".into()));
        }
        let min_side = if self.size_mix[2] > 0.0 { 100 } else if self.size_mix[1] > 0.0 { 40 } else { 8 };
        if w0 < min_side + 2 * self.margin || h0 < min_side + 2 * self.margin {
            return Err(Error::Config("synth images are too small for the requested objects".into()));
        }
        Ok(())
    }

    pub fn categories(&self) -> CategoryTable {
        let wsbd = CategoryTable::wsbd();
        if self.class_counts.len() <= wsbd.len() {
            let entries = wsbd.entries()[..self.class_counts.len()].to_vec();
            CategoryTable::new(entries).expect("prefix of a valid table")
        } else {
            let entries = (0..self.class_counts.len())
                .map(|i| Category::new(i as u64 + 1, format!("class_{}", i + 1), false))
                .collect();
            CategoryTable::new(entries).expect("generated names are unique")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Ellipse,
    Diamond,
    Block,
}

impl Shape {
    pub fn for_class(category_id: u64) -> Shape {
        match category_id % 3 {
            0 => Shape::Ellipse,
            1 => Shape::Diamond,
            _ => Shape::Block,
        }
    }
}

/// Paints an organism filling exactly the integer box: the shape body plus a
/// full-width and full-height cross so the painted extent equals the box.
pub fn draw_object(img: &mut RgbImage, bbox: &BBox, shape: Shape, colour: Rgb<u8>) {
    let (x0, y0) = (bbox.x() as u32, bbox.y() as u32);
    let (w, h) = (bbox.w() as u32, bbox.h() as u32);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (mx, my) = (w / 2, h / 2);
    let dark = Rgb(colour.0.map(|v| v / 2));
    for dy in 0..h {
        for dx in 0..w {
            let u = (dx as f64 + 0.5 - cx) / cx;
            let v = (dy as f64 + 0.5 - cy) / cy;
            let inside = match shape {
                Shape::Ellipse => u * u + v * v <= 1.0,
                Shape::Diamond => u.abs() + v.abs() <= 1.0,
                Shape::Block => u.abs() <= 0.8 && v.abs() <= 0.8,
            };
            if dx == mx || dy == my {
                img.put_pixel(x0 + dx, y0 + dy, dark);
            } else if inside {
                img.put_pixel(x0 + dx, y0 + dy, colour);
            }
        }
    }
}

fn background(width: u32, height: u32, seed: u64, stream: u64) -> RgbImage {
    let mut rng = stream_rng(seed, stream);
    let tint: [i32; 3] = [rng.gen_range(90..130), rng.gen_range(85..115), rng.gen_range(60..95)];
    let mut img = RgbImage::new(width, height);
    for p in img.pixels_mut() {
        let n: i32 = rng.gen_range(-18..=18);
        *p = Rgb(tint.map(|t| (t + n).clamp(0, 255) as u8));
    }
    img
}

fn draw_size(rng: &mut impl Rng, mix: &[f64; 3], ranges: &[(f64, f64); 3]) -> (u32, u32) {
    let u: f64 = rng.gen();
    let bucket = if u < mix[0] {
        0
    } else if u < mix[0] + mix[1] {
        1
    } else {
        2
    };
    let (lo, hi) = ranges[bucket];
    loop {
        let side: f64 = rng.gen_range(lo..=hi);
        let aspect: f64 = rng.gen_range(0.75f64..=1.33).sqrt();
        let w = ((side * aspect).round() as u32).clamp(1, MAX_OBJECT_SIDE);
        let h = ((side / aspect).round() as u32).clamp(1, MAX_OBJECT_SIDE);
        let area = (w * h) as f64;
        let fits = match bucket {
            0 => area < SMALL_MAX_AREA,
            1 => (SMALL_MAX_AREA..MEDIUM_MAX_AREA).contains(&area),
            _ => area >= MEDIUM_MAX_AREA,
        };
        if fits {
            return (w, h);
        }
    }
}

/// Generated dataset; rasters are produced separately on demand.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub dataset: DatasetIndex,
}

pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let categories = spec.categories();
    let mut rng = stream_rng(spec.seed, 0);

    let mut images = Vec::with_capacity(spec.num_images);
    for i in 0..spec.num_images {
        let id = i as u64 + 1;
        let w = rng.gen_range(spec.width_range.0..=spec.width_range.1);
        let h = rng.gen_range(spec.height_range.0..=spec.height_range.1);
        let substrate = if rng.gen_bool(0.5) { Substrate::Hard } else { Substrate::Soft };
        let depth = (rng.gen_range(400.0f64..2500.0) * 10.0).round() / 10.0;
        let incline = (rng.gen_range(0.0f64..60.0) * 10.0).round() / 10.0;
        images.push(
            ImageRecord::new(id, format!("synth_{id:04}.png"), w, h).with_metadata(EnvMetadata::new(substrate, depth, incline)?),
        );
    }

    // Every object gets a class from the exact count table and a random image.
    let mut labels: Vec<u64> = spec
        .class_counts
        .iter()
        .enumerate()
        .flat_map(|(i, &n)| std::iter::repeat_n(i as u64 + 1, n))
        .collect();
    labels.shuffle(&mut rng);
    let mut per_image: Vec<Vec<u64>> = vec![Vec::new(); spec.num_images];
    for label in labels {
        per_image[rng.gen_range(0..spec.num_images)].push(label);
    }

    let placed: Vec<Result<Vec<(u64, BBox)>>> = images
        .par_iter()
        .zip(per_image.par_iter())
        .map(|(img, labels)| place_objects(img, labels, spec))
        .collect();
    let mut annotations = Vec::new();
    for (img, objs) in images.iter().zip(placed) {
        for (label, bbox) in objs? {
            annotations.push(Annotation::new(annotations.len() as u64 + 1, img.image_id, label, bbox));
        }
    }
    let dataset = DatasetIndex::new(images, annotations, categories)?;
    Ok(SynthDataset {
        spec: spec.clone(),
        dataset,
    })
}

fn place_objects(img: &ImageRecord, labels: &[u64], spec: &SynthSpec) -> Result<Vec<(u64, BBox)>> {
    let mut rng = stream_rng(spec.seed, 1_000_000 + img.image_id);
    let m = spec.margin as f64;
    let mut boxes: Vec<(u64, BBox)> = Vec::with_capacity(labels.len());
    for &label in labels {
        let mut done = false;
        for _ in 0..10_000 {
            let (w, h) = draw_size(&mut rng, &spec.size_mix, &spec.side_ranges);
            if w + 2 * spec.margin > img.width || h + 2 * spec.margin > img.height {
                continue;
            }
            let x = rng.gen_range(spec.margin..=img.width - w - spec.margin);
            let y = rng.gen_range(spec.margin..=img.height - h - spec.margin);
            let b = BBox::new(x as f64, y as f64, w as f64, h as f64)?;
            let clear = boxes.iter().all(|(_, o)| {
                b.x2() + m <= o.x() || o.x2() + m <= b.x() || b.y2() + m <= o.y() || o.y2() + m <= b.y()
            });
            if clear {
                boxes.push((label, b));
                done = true;
                break;
            }
        }
        if !done {
            return Err(Error::Infeasible(format!("could not place all objects in image {}", img.image_id)));
        }
    }
    Ok(boxes)
}

pub fn render_image(ds: &DatasetIndex, image_id: u64, seed: u64) -> Result<RgbImage> {
    let record = ds
        .image(image_id)
        .ok_or_else(|| Error::Structural(format!("unknown image {image_id}")))?;
    let mut img = background(record.width, record.height, seed, 2_000_000 + image_id);
    for a in ds.annotations.iter().filter(|a| a.image_id == image_id) {
        draw_object(&mut img, &a.bbox, Shape::for_class(a.category_id), class_color(a.category_id));
    }
    Ok(img)
}

/// Writes `annotations.json` and, when `with_rasters`, one PNG per image
/// under `images/`.
pub fn write_synth(synth: &SynthDataset, out_dir: &Path, with_rasters: bool) -> Result<()> {
    synth.dataset.save(&out_dir.join("annotations.json"))?;
    if with_rasters {
        let dir = out_dir.join("images");
        synth.dataset.images.par_iter().try_for_each(|img| {
            let raster = render_image(&synth.dataset, img.image_id, synth.spec.seed)?;
            save_raster(&dir.join(&img.file_path), &raster)
        })?;
    }
    Ok(())
}
