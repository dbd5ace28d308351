//! Overlapping sliding-window tiling of large images and their annotations.
//!
//! Windows advance by `step = patch - floor(overlap * patch)` pixels on each
//! axis. The last window on an axis is pulled back so it ends flush with the
//! image edge; images narrower than a patch get a single clamped window.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{inside, Annotation, DatasetIndex, ImageRecord};
use crate::error::{Error, Result};
use crate::geometry::{intersection_area, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceConfig {
    pub patch_w: u32,
    pub patch_h: u32,
    pub overlap: f64,
    pub min_visibility: f64,
}

impl Default for SliceConfig {
    fn default() -> Self {
        Self {
            patch_w: 500,
            patch_h: 500,
            overlap: 0.5,
            min_visibility: 0.25,
        }
    }
}

impl SliceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_w == 0 || self.patch_h == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!("overlap {} outside [0, 1)", self.overlap)));
        }
        if !(self.min_visibility > 0.0 && self.min_visibility <= 1.0) {
            return Err(Error::Config(format!(
                "min_visibility {} outside (0, 1]",
                self.min_visibility
            )));
        }
        Ok(())
    }

    pub fn step_x(&self) -> u32 {
        axis_step(self.patch_w, self.overlap)
    }

    pub fn step_y(&self) -> u32 {
        axis_step(self.patch_h, self.overlap)
    }
}

/// Window advance for one axis; the overlap is floored to whole pixels.
pub fn axis_step(patch: u32, overlap: f64) -> u32 {
    let shared = (overlap * patch as f64).floor() as u32;
    patch.saturating_sub(shared).max(1)
}

/// Window origins along one axis of length `size`.
pub fn axis_origins(size: u32, patch: u32, step: u32) -> Vec<u32> {
    if size <= patch {
        return vec![0];
    }
    let last = size - patch;
    let mut origins = Vec::with_capacity((last / step + 2) as usize);
    let mut o = 0;
    while o < last {
        origins.push(o);
        o += step;
    }
    origins.push(last);
    origins
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub parent_image_id: u64,
    pub x_origins: Vec<u32>,
    pub y_origins: Vec<u32>,
    /// Window size, clamped to the image on axes shorter than a patch.
    pub window_w: u32,
    pub window_h: u32,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.x_origins.len() * self.y_origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Windows in row-major order (top row first, left to right).
    pub fn windows(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.y_origins
            .iter()
            .flat_map(move |&y| self.x_origins.iter().map(move |&x| (x, y)))
    }

    pub fn window_box(&self, origin_x: u32, origin_y: u32) -> BBox {
        BBox::new(
            origin_x as f64,
            origin_y as f64,
            self.window_w as f64,
            self.window_h as f64,
        )
        .expect("window sizes are positive")
    }
}

pub fn compute_patch_grid(img: &ImageRecord, cfg: &SliceConfig) -> PatchGrid {
    PatchGrid {
        parent_image_id: img.image_id,
        x_origins: axis_origins(img.width, cfg.patch_w, cfg.step_x()),
        y_origins: axis_origins(img.height, cfg.patch_h, cfg.step_y()),
        window_w: cfg.patch_w.min(img.width),
        window_h: cfg.patch_h.min(img.height),
    }
}

/// Fraction of `ann_box` that falls inside `window`.
pub fn visibility(ann_box: &BBox, window: &BBox) -> f64 {
    intersection_area(ann_box, window) / ann_box.area()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub patch_id: u64,
    pub parent_image_id: u64,
    pub origin_x: u32,
    pub origin_y: u32,
    pub width: u32,
    pub height: u32,
    /// Patch-local annotations; `source_id` points at the whole-image annotation.
    pub annotations: Vec<Annotation>,
}

impl PatchRecord {
    pub fn window(&self) -> BBox {
        BBox::new(
            self.origin_x as f64,
            self.origin_y as f64,
            self.width as f64,
            self.height as f64,
        )
        .expect("patch sizes are positive")
    }
}

/// Running id allocator for patches and patch-local annotations.
#[derive(Debug, Clone, Copy)]
pub struct IdCursor {
    pub next_patch_id: u64,
    pub next_annotation_id: u64,
}

impl Default for IdCursor {
    fn default() -> Self {
        Self {
            next_patch_id: 1,
            next_annotation_id: 1,
        }
    }
}

/// Clips annotations into every window of `grid`. A box is kept in a window
/// when its visibility there is at least `cfg.min_visibility`.
pub fn slice_annotations(
    img_annotations: &[&Annotation],
    grid: &PatchGrid,
    cfg: &SliceConfig,
    ids: &mut IdCursor,
) -> Vec<PatchRecord> {
    let mut records = Vec::with_capacity(grid.len());
    for (ox, oy) in grid.windows() {
        let window = grid.window_box(ox, oy);
        let mut annotations = Vec::new();
        for ann in img_annotations {
            if visibility(&ann.bbox, &window) < cfg.min_visibility {
                continue;
            }
            let Some(clipped) = ann.bbox.intersection(&window) else {
                continue;
            };
            let local = BBox::new(
                clipped.x() - ox as f64,
                clipped.y() - oy as f64,
                clipped.w(),
                clipped.h(),
            )
            .expect("clipped box lies inside its window");
            let mut sliced = Annotation::new(ids.next_annotation_id, ids.next_patch_id, ann.category_id, local);
            sliced.source_id = Some(ann.id);
            ids.next_annotation_id += 1;
            annotations.push(sliced);
        }
        records.push(PatchRecord {
            patch_id: ids.next_patch_id,
            parent_image_id: grid.parent_image_id,
            origin_x: ox,
            origin_y: oy,
            width: grid.window_w,
            height: grid.window_h,
            annotations,
        });
        ids.next_patch_id += 1;
    }
    records
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub patch_id: u64,
    pub parent_image_id: u64,
    pub origin_x: u32,
    pub origin_y: u32,
    pub width: u32,
    pub height: u32,
    pub patch_file_name: String,
    pub parent_width: u32,
    pub parent_height: u32,
}

impl ManifestEntry {
    pub fn parent_bounds(&self) -> BBox {
        BBox::new(0.0, 0.0, self.parent_width as f64, self.parent_height as f64)
            .expect("parent sizes are positive")
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PatchManifest {
    pub entries: Vec<ManifestEntry>,
}

impl PatchManifest {
    pub fn load(path: &Path) -> Result<Self> {
        crate::io::read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn lookup(&self) -> HashMap<u64, &ManifestEntry> {
        self.entries.iter().map(|e| (e.patch_id, e)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlicedDataset {
    /// COCO dataset whose images are the patches.
    pub dataset: DatasetIndex,
    pub manifest: PatchManifest,
    pub patches: Vec<PatchRecord>,
}

fn patch_file_name(parent: &ImageRecord, ox: u32, oy: u32) -> String {
    let stem = Path::new(&parent.file_path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| format!("image_{}", parent.image_id));
    format!("{stem}_{ox}_{oy}.png")
}

/// Slices every image of `ds`, in image-id order, into a patched dataset and manifest.
pub fn slice_dataset(ds: &DatasetIndex, cfg: &SliceConfig) -> Result<SlicedDataset> {
    cfg.validate()?;
    let mut images: Vec<&ImageRecord> = ds.images.iter().collect();
    images.sort_by_key(|i| i.image_id);
    let by_image = ds.annotations_by_image();
    let mut ids = IdCursor::default();
    let mut patches = Vec::new();
    let mut manifest = Vec::new();
    let mut patch_images = Vec::new();
    let mut patch_annotations = Vec::new();
    for img in images {
        let anns = by_image.get(&img.image_id).map(Vec::as_slice).unwrap_or(&[]);
        for ann in anns {
            if !inside(&ann.bbox, img.width, img.height) {
                return Err(Error::Structural(format!(
                    "annotation {} lies outside image {} ({}x{})",
                    ann.id, img.image_id, img.width, img.height
                )));
            }
        }
        let grid = compute_patch_grid(img, cfg);
        for record in slice_annotations(anns, &grid, cfg, &mut ids) {
            let file_name = patch_file_name(img, record.origin_x, record.origin_y);
            manifest.push(ManifestEntry {
                patch_id: record.patch_id,
                parent_image_id: img.image_id,
                origin_x: record.origin_x,
                origin_y: record.origin_y,
                width: record.width,
                height: record.height,
                patch_file_name: file_name.clone(),
                parent_width: img.width,
                parent_height: img.height,
            });
            let mut patch_img = ImageRecord::new(record.patch_id, file_name, record.width, record.height);
            patch_img.metadata = img.metadata;
            patch_images.push(patch_img);
            patch_annotations.extend(record.annotations.iter().cloned());
            patches.push(record);
        }
    }
    let dataset = DatasetIndex {
        images: patch_images,
        annotations: patch_annotations,
        categories: ds.categories.clone(),
        extra: ds.extra.clone(),
    };
    Ok(SlicedDataset {
        dataset,
        manifest: PatchManifest { entries: manifest },
        patches,
    })
}

/// Rebuilds patch records from a patched dataset and its manifest.
pub fn patches_from_files(patched: &DatasetIndex, manifest: &PatchManifest) -> Result<Vec<PatchRecord>> {
    let by_image = patched.annotations_by_image();
    manifest
        .entries
        .iter()
        .map(|e| {
            if patched.image(e.patch_id).is_none() {
                return Err(Error::Structural(format!(
                    "manifest patch {} missing from patched dataset",
                    e.patch_id
                )));
            }
            Ok(PatchRecord {
                patch_id: e.patch_id,
                parent_image_id: e.parent_image_id,
                origin_x: e.origin_x,
                origin_y: e.origin_y,
                width: e.width,
                height: e.height,
                annotations: by_image
                    .get(&e.patch_id)
                    .map(|v| v.iter().map(|a| (*a).clone()).collect())
                    .unwrap_or_default(),
            })
        })
        .collect()
}

pub fn load_raster(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8())
}

pub fn save_raster(path: &Path, raster: &RgbImage) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    raster
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::image(path, e))
}

/// Exact pixel crop; the window is rounded to whole pixels.
pub fn slice_image_pixels(img: &RgbImage, window: &BBox) -> Result<RgbImage> {
    let x = window.x().round() as u64;
    let y = window.y().round() as u64;
    let w = window.w().round().max(1.0) as u64;
    let h = window.h().round().max(1.0) as u64;
    if x + w > img.width() as u64 || y + h > img.height() as u64 {
        return Err(Error::Bounds {
            window: format!("{:?}", window.to_array()),
            width: img.width(),
            height: img.height(),
        });
    }
    Ok(image::imageops::crop_imm(img, x as u32, y as u32, w as u32, h as u32).to_image())
}

/// Crops and writes the pixel patches of `sliced`. Parent images are read from
/// `images_root` and processed in parallel; output files are independent.
pub fn write_patch_rasters(
    source: &DatasetIndex,
    sliced: &SlicedDataset,
    images_root: &Path,
    out_dir: &Path,
) -> Result<()> {
    let mut by_parent: BTreeMap<u64, Vec<&ManifestEntry>> = BTreeMap::new();
    for e in &sliced.manifest.entries {
        by_parent.entry(e.parent_image_id).or_default().push(e);
    }
    by_parent.into_par_iter().try_for_each(|(parent_id, entries)| {
        let parent = source.image(parent_id).ok_or_else(|| {
            Error::Structural(format!("manifest references unknown image {parent_id}"))
        })?;
        let path = images_root.join(&parent.file_path);
        let raster = load_raster(&path)?;
        if raster.width() != parent.width || raster.height() != parent.height {
            return Err(Error::Structural(format!(
                "{} is {}x{}, dataset says {}x{}",
                path.display(),
                raster.width(),
                raster.height(),
                parent.width,
                parent.height
            )));
        }
        for e in entries {
            let window = BBox::new(e.origin_x as f64, e.origin_y as f64, e.width as f64, e.height as f64)?;
            let crop = slice_image_pixels(&raster, &window)?;
            save_raster(&out_dir.join(&e.patch_file_name), &crop)?;
        }
        Ok(())
    })
}

/// Scales boxes by `(sx, sy)`; sides below one pixel are widened to one pixel
/// and kept inside a `target_w` x `target_h` image.
pub fn scale_annotations(
    annotations: &[Annotation],
    sx: f64,
    sy: f64,
    target_w: u32,
    target_h: u32,
) -> Vec<Annotation> {
    annotations
        .iter()
        .map(|a| {
            let b = &a.bbox;
            let w = (b.w() * sx).max(1.0).min(target_w as f64);
            let h = (b.h() * sy).max(1.0).min(target_h as f64);
            let x = (b.x() * sx).min(target_w as f64 - w).max(0.0);
            let y = (b.y() * sy).min(target_h as f64 - h).max(0.0);
            let mut out = a.clone();
            out.bbox = BBox::new(x, y, w, h).expect("scaled sides are at least one pixel");
            out
        })
        .collect()
}

/// Bilinear resize of a whole image, with its boxes scaled to match.
pub fn downscale_image(
    img: &RgbImage,
    target_w: u32,
    target_h: u32,
    annotations: &[Annotation],
) -> Result<(RgbImage, Vec<Annotation>)> {
    if target_w == 0 || target_h == 0 {
        return Err(Error::Config("downscale target must be positive".into()));
    }
    let sx = target_w as f64 / img.width() as f64;
    let sy = target_h as f64 / img.height() as f64;
    let raster = if (target_w, target_h) == img.dimensions() {
        img.clone()
    } else {
        image::imageops::resize(img, target_w, target_h, image::imageops::FilterType::Triangle)
    };
    Ok((raster, scale_annotations(annotations, sx, sy, target_w, target_h)))
}

/// Annotation-only counterpart of [`downscale_image`] for a whole dataset;
/// `target` picks the new size of each image.
pub fn downscale_dataset(ds: &DatasetIndex, target: impl Fn(&ImageRecord) -> (u32, u32)) -> DatasetIndex {
    let by_image = ds.annotations_by_image();
    let mut images = Vec::with_capacity(ds.images.len());
    let mut annotations = Vec::with_capacity(ds.annotations.len());
    for img in &ds.images {
        let (tw, th) = target(img);
        let sx = tw as f64 / img.width as f64;
        let sy = th as f64 / img.height as f64;
        let anns: Vec<Annotation> = by_image[&img.image_id].iter().map(|a| (*a).clone()).collect();
        annotations.extend(scale_annotations(&anns, sx, sy, tw, th));
        let mut scaled = img.clone();
        scaled.width = tw;
        scaled.height = th;
        images.push(scaled);
    }
    DatasetIndex {
        images,
        annotations,
        categories: ds.categories.clone(),
        extra: ds.extra.clone(),
    }
}

pub fn downscaled_file_path(img: &ImageRecord) -> PathBuf {
    let stem = Path::new(&img.file_path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("image_{}", img.image_id));
    PathBuf::from(format!("{stem}_downscaled.png"))
}
