//! Patch-level detection backends.
//!
//! No neural network runs inside this crate. [`FileBackend`] replays
//! detections produced by an external model runner, and [`OracleBackend`]
//! derives detections from the sliced ground truth with controllable
//! corruption, which lets the whole pipeline be verified end to end.

use std::collections::HashMap;
use std::path::Path;

use image::RgbImage;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::seed::stream_rng;
use crate::slicer::PatchRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Set for patch-local detections, absent once reprojected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_id: Option<u64>,
    /// Set for whole-image detections.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<u64>,
    pub category_id: u64,
    pub bbox: BBox,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, category_id: u64, score: f64) -> Self {
        Self {
            patch_id: None,
            image_id: None,
            category_id,
            bbox,
            score,
        }
    }

    /// Score descending, then box coordinates, then class.
    pub fn rank_cmp(&self, other: &Detection) -> std::cmp::Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.bbox.lexical_cmp(&other.bbox))
            .then(self.category_id.cmp(&other.category_id))
    }
}

pub fn load_detections(path: &Path) -> Result<Vec<Detection>> {
    let dets: Vec<Detection> = crate::io::read_json(path)?;
    for (i, d) in dets.iter().enumerate() {
        if !(0.0..=1.0).contains(&d.score) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: format!("detection {i} has score {} outside [0, 1]", d.score),
            });
        }
    }
    Ok(dets)
}

pub fn save_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    crate::io::write_json(path, dets)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Capability {
    pub name: String,
    /// Patch size the backend was built for, if it cares.
    pub patch_size: Option<(u32, u32)>,
    /// Whether `detect` may be called from several workers at once.
    pub concurrent: bool,
    /// Whether `detect` needs the patch raster.
    pub needs_pixels: bool,
}

pub trait DetectorBackend: Send + Sync {
    fn capability(&self) -> Capability;

    /// Detections in patch-local coordinates, each tagged with the patch id.
    fn detect(&self, patch: &PatchRecord, raster: Option<&RgbImage>) -> Result<Vec<Detection>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreModel {
    /// Every detection scores 1.0.
    Constant1,
    /// Score is the IoU between the emitted box and its source truth box.
    IouWithTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub drop_rate: f64,
    /// Half-width of the uniform noise added to each box corner coordinate.
    pub jitter_px: f64,
    /// Probability of relabelling to a uniformly chosen other class.
    pub confusion_rate: f64,
    pub score_model: ScoreModel,
    /// Round boxes outward to whole pixels of the raster the oracle "sees".
    pub snap_to_pixels: bool,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            drop_rate: 0.0,
            jitter_px: 0.0,
            confusion_rate: 0.0,
            score_model: ScoreModel::Constant1,
            snap_to_pixels: false,
            seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("drop_rate", self.drop_rate), ("confusion_rate", self.confusion_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("oracle {name} {v} outside [0, 1]")));
            }
        }
        if !(self.jitter_px >= 0.0 && self.jitter_px.is_finite()) {
            return Err(Error::Config(format!("oracle jitter {} must be >= 0", self.jitter_px)));
        }
        Ok(())
    }
}

pub struct OracleBackend {
    config: OracleConfig,
    categories: Vec<u64>,
}

impl OracleBackend {
    /// `categories` is the label pool used for confusion.
    pub fn new(config: OracleConfig, categories: Vec<u64>) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, categories })
    }

    fn corrupt(&self, truth: &BBox, limit_w: f64, limit_h: f64, rng: &mut impl Rng) -> BBox {
        let j = self.config.jitter_px;
        let mut noise = [0.0; 4];
        for n in noise.iter_mut() {
            let u: f64 = rng.gen();
            *n = j * (2.0 * u - 1.0);
        }
        let mut b = *truth;
        if j > 0.0 {
            let (xa, xb) = (truth.x() + noise[0], truth.x2() + noise[2]);
            let (ya, yb) = (truth.y() + noise[1], truth.y2() + noise[3]);
            let x1 = xa.min(xb).clamp(0.0, limit_w);
            let x2 = xa.max(xb).clamp(0.0, limit_w);
            let y1 = ya.min(yb).clamp(0.0, limit_h);
            let y2 = ya.max(yb).clamp(0.0, limit_h);
            if let Ok(jittered) = BBox::from_corners(x1, y1, x2, y2) {
                b = jittered;
            }
        }
        if self.config.snap_to_pixels {
            let x1 = b.x().floor();
            let y1 = b.y().floor();
            let x2 = b.x2().ceil().min(limit_w.ceil());
            let y2 = b.y2().ceil().min(limit_h.ceil());
            b = BBox::from_corners(x1, y1, x2, y2).expect("outward rounding keeps the box non-empty");
        }
        b
    }
}

impl DetectorBackend for OracleBackend {
    fn capability(&self) -> Capability {
        Capability {
            name: "oracle".into(),
            patch_size: None,
            concurrent: true,
            needs_pixels: false,
        }
    }

    fn detect(&self, patch: &PatchRecord, _raster: Option<&RgbImage>) -> Result<Vec<Detection>> {
        let mut rng = stream_rng(self.config.seed, patch.patch_id);
        let mut out = Vec::with_capacity(patch.annotations.len());
        for ann in &patch.annotations {
            // Fixed number of draws per annotation keeps the streams aligned
            // across corruption settings.
            let drop: f64 = rng.gen();
            let bbox = self.corrupt(&ann.bbox, patch.width as f64, patch.height as f64, &mut rng);
            let confuse: f64 = rng.gen();
            let pick: f64 = rng.gen();
            if drop < self.config.drop_rate {
                continue;
            }
            let mut category_id = ann.category_id;
            let others: Vec<u64> = self.categories.iter().copied().filter(|&c| c != category_id).collect();
            if confuse < self.config.confusion_rate && !others.is_empty() {
                category_id = others[((pick * others.len() as f64) as usize).min(others.len() - 1)];
            }
            let score = match self.config.score_model {
                ScoreModel::Constant1 => 1.0,
                ScoreModel::IouWithTruth => iou(&bbox, &ann.bbox),
            };
            out.push(Detection {
                patch_id: Some(patch.patch_id),
                image_id: None,
                category_id,
                bbox,
                score,
            });
        }
        Ok(out)
    }
}

/// Replays detections written by an external model runner.
pub struct FileBackend {
    by_patch: HashMap<u64, Vec<Detection>>,
    /// When set, a patch with no records is an error rather than an empty result.
    strict: bool,
}

impl FileBackend {
    pub fn new(dets: Vec<Detection>, strict: bool) -> Result<Self> {
        let mut by_patch: HashMap<u64, Vec<Detection>> = HashMap::new();
        for d in dets {
            let id = d
                .patch_id
                .ok_or_else(|| Error::Structural("file backend needs patch-level detections".into()))?;
            by_patch.entry(id).or_default().push(d);
        }
        Ok(Self { by_patch, strict })
    }

    pub fn load(path: &Path, strict: bool) -> Result<Self> {
        Self::new(load_detections(path)?, strict)
    }
}

impl DetectorBackend for FileBackend {
    fn capability(&self) -> Capability {
        Capability {
            name: "file".into(),
            patch_size: None,
            concurrent: true,
            needs_pixels: false,
        }
    }

    fn detect(&self, patch: &PatchRecord, _raster: Option<&RgbImage>) -> Result<Vec<Detection>> {
        match self.by_patch.get(&patch.patch_id) {
            Some(d) => Ok(d.clone()),
            None if self.strict => Err(Error::MissingDetections {
                patch_id: patch.patch_id,
            }),
            None => Ok(Vec::new()),
        }
    }
}

/// Runs `backend` over every patch. Output is ordered by patch id, then by
/// descending score, independent of scheduling. Rasters are fetched through
/// `raster_for` only when the backend asks for pixels.
pub fn run_inference(
    patches: &[PatchRecord],
    backend: &dyn DetectorBackend,
    raster_for: Option<&(dyn Fn(&PatchRecord) -> Result<RgbImage> + Sync)>,
) -> Result<Vec<Detection>> {
    let cap = backend.capability();
    if cap.needs_pixels && raster_for.is_none() {
        return Err(Error::Config(format!("backend {} needs patch rasters", cap.name)));
    }
    let run_one = |patch: &PatchRecord| -> Result<Vec<Detection>> {
        let raster = match (cap.needs_pixels, raster_for) {
            (true, Some(f)) => Some(f(patch)?),
            _ => None,
        };
        let mut dets = backend
            .detect(patch, raster.as_ref())
            .map_err(|e| e.context(format!("patch {}", patch.patch_id)))?;
        for d in &mut dets {
            d.patch_id = Some(patch.patch_id);
        }
        dets.sort_by(|a, b| a.rank_cmp(b));
        Ok(dets)
    };
    let mut per_patch: Vec<(u64, Vec<Detection>)> = if cap.concurrent {
        patches
            .par_iter()
            .map(|p| run_one(p).map(|d| (p.patch_id, d)))
            .collect::<Result<_>>()?
    } else {
        patches
            .iter()
            .map(|p| run_one(p).map(|d| (p.patch_id, d)))
            .collect::<Result<_>>()?
    };
    per_patch.sort_by_key(|(id, _)| *id);
    Ok(per_patch.into_iter().flat_map(|(_, d)| d).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Annotation;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    fn patch(id: u64, boxes: &[(u64, BBox)]) -> PatchRecord {
        PatchRecord {
            patch_id: id,
            parent_image_id: 1,
            origin_x: 0,
            origin_y: 0,
            width: 500,
            height: 500,
            annotations: boxes
                .iter()
                .enumerate()
                .map(|(i, (c, b))| {
                    let mut a = Annotation::new(i as u64 + 1, id, *c, *b);
                    a.source_id = Some(100 + i as u64);
                    a
                })
                .collect(),
        }
    }

    fn oracle(cfg: OracleConfig) -> OracleBackend {
        OracleBackend::new(cfg, vec![1, 2, 3]).unwrap()
    }

    #[test]
    fn identity_oracle_reproduces_truth() {
        let p = patch(4, &[(1, bx(10.0, 10.0, 50.0, 50.0)), (3, bx(200.5, 100.0, 20.0, 7.0))]);
        let dets = oracle(OracleConfig::default()).detect(&p, None).unwrap();
        assert_eq!(dets.len(), 2);
        for (d, a) in dets.iter().zip(&p.annotations) {
            assert_eq!((d.bbox, d.category_id, d.score, d.patch_id), (a.bbox, a.category_id, 1.0, Some(4)));
        }
    }

    #[test]
    fn full_drop_is_empty() {
        let p = patch(1, &[(1, bx(10.0, 10.0, 50.0, 50.0))]);
        let cfg = OracleConfig {
            drop_rate: 1.0,
            ..OracleConfig::default()
        };
        assert!(oracle(cfg).detect(&p, None).unwrap().is_empty());
    }

    #[test]
    fn jitter_respects_worst_case_iou_bound() {
        // Worst case for 2 px corner noise on a 50 px square: every side pulled
        // inwards by 2 px, IoU = 46^2 / 50^2.
        let bound = (46.0f64 / 50.0).powi(2);
        let boxes: Vec<(u64, BBox)> = (0..8).map(|i| (1, bx(20.0 + 55.0 * i as f64, 100.0, 50.0, 50.0))).collect();
        let mut worst = 1.0f64;
        for seed in 0..500 {
            let cfg = OracleConfig {
                jitter_px: 2.0,
                score_model: ScoreModel::IouWithTruth,
                seed,
                ..OracleConfig::default()
            };
            let p = patch(seed + 1, &boxes);
            for (d, a) in oracle(cfg).detect(&p, None).unwrap().iter().zip(&p.annotations) {
                let v = iou(&d.bbox, &a.bbox);
                assert!(v >= bound - 1e-12);
                assert_eq!(d.score, v);
                worst = worst.min(v);
            }
        }
        assert!(worst < 0.95);
    }

    #[test]
    fn confusion_relabels_to_other_class() {
        let p = patch(1, &[(2, bx(1.0, 1.0, 5.0, 5.0)); 20]);
        let cfg = OracleConfig {
            confusion_rate: 1.0,
            ..OracleConfig::default()
        };
        let dets = oracle(cfg).detect(&p, None).unwrap();
        assert!(dets.iter().all(|d| d.category_id != 2));
        assert!(dets.iter().any(|d| d.category_id == 1) && dets.iter().any(|d| d.category_id == 3));
    }

    #[test]
    fn snapping_rounds_outward() {
        let p = patch(1, &[(1, bx(10.25, 3.5, 4.5, 2.0))]);
        let cfg = OracleConfig {
            snap_to_pixels: true,
            ..OracleConfig::default()
        };
        let d = &oracle(cfg).detect(&p, None).unwrap()[0];
        assert_eq!(d.bbox, bx(10.0, 3.0, 5.0, 3.0));
    }

    #[test]
    fn oracle_is_deterministic_and_order_independent() {
        let patches: Vec<PatchRecord> = (1..=30)
            .map(|i| patch(i, &[(1, bx(i as f64, 2.0, 30.0, 30.0)), (2, bx(100.0, i as f64, 40.0, 20.0))]))
            .collect();
        let cfg = OracleConfig {
            drop_rate: 0.3,
            jitter_px: 3.0,
            confusion_rate: 0.2,
            score_model: ScoreModel::IouWithTruth,
            seed: 11,
            snap_to_pixels: false,
        };
        let backend = oracle(cfg);
        let a = run_inference(&patches, &backend, None).unwrap();
        let mut reversed = patches.clone();
        reversed.reverse();
        let b = run_inference(&reversed, &backend, None).unwrap();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0].patch_id <= w[1].patch_id));
    }

    #[test]
    fn file_backend_round_trip_and_missing_patch() {
        let dets = vec![
            Detection {
                patch_id: Some(1),
                image_id: None,
                category_id: 2,
                bbox: bx(0.1, 0.2, 10.3, 4.7),
                score: 0.3141592653589793,
            },
            Detection {
                patch_id: Some(1),
                image_id: None,
                category_id: 1,
                bbox: bx(5.0, 5.0, 1.0, 1.0),
                score: 0.9,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        save_detections(&path, &dets).unwrap();
        assert_eq!(load_detections(&path).unwrap(), dets);

        let backend = FileBackend::load(&path, true).unwrap();
        let out = run_inference(&[patch(1, &[])], &backend, None).unwrap();
        assert_eq!(out[0].score, 0.9);
        let err = run_inference(&[patch(2, &[])], &backend, None).unwrap_err();
        assert!(err.to_string().contains("patch 2"));
        let lenient = FileBackend::load(&path, false).unwrap();
        assert!(run_inference(&[patch(2, &[])], &lenient, None).unwrap().is_empty());
    }

    #[test]
    fn empty_input_gives_empty_output() {
        assert!(run_inference(&[], &oracle(OracleConfig::default()), None).unwrap().is_empty());
    }

    #[test]
    fn out_of_range_score_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        std::fs::write(&path, r#"[{"patch_id": 1, "category_id": 1, "bbox": [0,0,1,1], "score": 1.5}]"#).unwrap();
        assert!(load_detections(&path).is_err());
    }
}
