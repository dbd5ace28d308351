//! End-to-end run: split, slice, augment, infer, merge and evaluate, with
//! every stage's artifacts written under one output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{materialize, AugmentationSpec};
use crate::dataset::DatasetIndex;
use crate::detector::{run_inference, save_detections, Detection, DetectorBackend, FileBackend, OracleBackend, OracleConfig};
use crate::error::{Error, Result};
use crate::evaluator::{coco_map, EvalConfig, EvalReport};
use crate::io::{sha256_hex, write_json, write_text};
use crate::postprocess::{postprocess_pipeline, PostprocessConfig};
use crate::render::render_confusion;
use crate::slicer::{
    downscale_dataset, downscale_image, load_raster, save_raster, slice_dataset, write_patch_rasters, PatchRecord,
    SliceConfig,
};
use crate::splitter::{stratified_split, validate_split, Split, SplitSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    /// Directory holding the source rasters; needed only with `write_rasters`.
    pub images: Option<PathBuf>,
    /// Not written to the resolved config, so outputs do not depend on it.
    #[serde(skip_serializing)]
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("annotations.json"),
            images: None,
            output: PathBuf::from("run"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentStage {
    pub enabled: bool,
    #[serde(flatten)]
    pub spec: AugmentationSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Oracle,
    File,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorStage {
    pub backend: BackendKind,
    /// Patch-level detections replayed by the file backend.
    pub detections: Option<PathBuf>,
    /// File backend: a patch without records is an error.
    pub strict: bool,
    pub oracle: OracleConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct PipelineConfig {
    /// Every stage seed is taken from this value.
    pub seed: u64,
    /// Worker threads, 0 for one per core. Never affects outputs.
    #[serde(skip_serializing)]
    pub workers: usize,
    /// Write pixel patches (and augmented patches) besides the annotations.
    pub write_rasters: bool,
    /// Skip patching on the test split: detect on whole images shrunk by this
    /// factor, then scale detections back up.
    pub downscale_factor: Option<f64>,
    pub paths: Paths,
    pub slice: SliceConfig,
    pub split: SplitSpec,
    pub augment: AugmentStage,
    pub detector: DetectorStage,
    pub postprocess: PostprocessConfig,
    pub eval: EvalConfig,
}


impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid pipeline config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| e.context(format!("reading {}", path.display())))
    }

    /// Copies the global seed into every stage.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.split.seed = c.seed;
        c.augment.spec.seed = c.seed;
        c.detector.oracle.seed = c.seed;
        c
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.slice.validate()?;
        self.split.validate()?;
        self.augment.spec.validate()?;
        self.detector.oracle.validate()?;
        self.postprocess.validate()?;
        self.eval.validate()?;
        if !self.paths.dataset.is_file() {
            return Err(Error::Config(format!("dataset {} does not exist", self.paths.dataset.display())));
        }
        if self.write_rasters {
            match &self.paths.images {
                Some(dir) if dir.is_dir() => {}
                Some(dir) => return Err(Error::Config(format!("image directory {} does not exist", dir.display()))),
                None => return Err(Error::Config("write_rasters needs paths.images".into())),
            }
        }
        if self.augment.enabled && !self.write_rasters {
            return Err(Error::Config("augmentation works on pixels and needs write_rasters".into()));
        }
        if self.detector.backend == BackendKind::File {
            match &self.detector.detections {
                Some(p) if p.is_file() => {}
                Some(p) => return Err(Error::Config(format!("detections file {} does not exist", p.display()))),
                None => return Err(Error::Config("file backend needs detector.detections".into())),
            }
            if self.downscale_factor.is_some() {
                return Err(Error::Config("the downscaled path runs with the oracle backend only".into()));
            }
        }
        if let Some(f) = self.downscale_factor {
            if !(f >= 1.0 && f.is_finite()) {
                return Err(Error::Config(format!("downscale_factor {f} must be >= 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub config_sha256: String,
    pub seed: u64,
    pub stages: Vec<String>,
    /// Every other artifact of the run, by relative path.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: EvalReport,
    pub output_dir: PathBuf,
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.context(format!("stage {name}")))
}

fn build_backend(cfg: &PipelineConfig, ds: &DatasetIndex) -> Result<Box<dyn DetectorBackend>> {
    Ok(match cfg.detector.backend {
        BackendKind::Oracle => Box::new(OracleBackend::new(cfg.detector.oracle.clone(), ds.categories.ids())?),
        BackendKind::File => Box::new(FileBackend::load(
            cfg.detector.detections.as_deref().expect("validated"),
            cfg.detector.strict,
        )?),
    })
}

/// Runs every stage on `cfg` inside a pool of `cfg.workers` threads.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| run_stages(cfg))
}

fn run_stages(raw: &PipelineConfig) -> Result<PipelineOutput> {
    let cfg = raw.resolved();
    stage("config", cfg.validate())?;
    let out = cfg.paths.output.clone();
    let config_text = cfg.to_toml_string()?;
    write_text(&out.join("config.toml"), &config_text)?;
    let mut stages = vec!["config".to_string()];

    let ds = stage("load", DatasetIndex::load(&cfg.paths.dataset))?;

    log::info!("splitting {} images", ds.images.len());
    let assignment = stage("split", stratified_split(&ds, &cfg.split))?;
    let split_report = stage("split", validate_split(&ds, &assignment, &cfg.split))?;
    for w in &split_report.warnings {
        log::warn!("{w}");
    }
    assignment.save(&out.join("split/split.json"))?;
    write_json(&out.join("split/report.json"), &split_report)?;
    stages.push("split".into());

    let images_root = cfg.paths.images.clone();
    let mut test_sliced = None;
    let mut test_subset = None;
    for split in Split::ALL {
        let subset = ds.subset(&assignment.images_in(split));
        let dir = out.join(split.name());
        subset.save(&dir.join("images.json"))?;
        if split == Split::Test && cfg.downscale_factor.is_some() {
            test_subset = Some(subset);
            continue;
        }
        log::info!("slicing {} split", split.name());
        let sliced = stage("slice", slice_dataset(&subset, &cfg.slice))?;
        sliced.dataset.save(&dir.join("patches.json"))?;
        sliced.manifest.save(&dir.join("manifest.json"))?;
        if cfg.write_rasters {
            let root = images_root.as_deref().expect("validated");
            stage("slice", write_patch_rasters(&subset, &sliced, root, &dir.join("patches")))?;
            if split == Split::Train && cfg.augment.enabled {
                log::info!("augmenting {} training patches", sliced.dataset.images.len());
                let augmented = stage(
                    "augment",
                    materialize(&sliced.dataset, &dir.join("patches"), &dir.join("augmented"), &cfg.augment.spec),
                )?;
                augmented.save(&dir.join("augmented.json"))?;
            }
        }
        if split == Split::Test {
            test_subset = Some(subset);
            test_sliced = Some(sliced);
        }
    }
    stages.push("slice".into());
    if cfg.augment.enabled {
        stages.push("augment".into());
    }

    let test = test_subset.expect("test split handled above");
    let backend = stage("infer", build_backend(&cfg, &ds))?;
    let merged: Vec<Detection> = match (&test_sliced, cfg.downscale_factor) {
        (Some(sliced), None) => {
            log::info!("detecting on {} test patches", sliced.patches.len());
            let patch_dir = out.join("test/patches");
            let names = sliced.manifest.lookup();
            let read = |p: &PatchRecord| load_raster(&patch_dir.join(&names[&p.patch_id].patch_file_name));
            let raster_for: Option<&(dyn Fn(&PatchRecord) -> Result<image::RgbImage> + Sync)> =
                if cfg.write_rasters { Some(&read) } else { None };
            let dets = stage("infer", run_inference(&sliced.patches, backend.as_ref(), raster_for))?;
            save_detections(&out.join("test/detections.json"), &dets)?;
            stages.push("infer".into());
            let per_image = stage("merge", postprocess_pipeline(&dets, &sliced.manifest, &cfg.postprocess))?;
            per_image.into_values().flatten().collect()
        }
        (_, Some(factor)) => {
            let dets = stage("infer", downscaled_inference(&test, factor, backend.as_ref(), &cfg, &out))?;
            save_detections(&out.join("test/detections.json"), &dets)?;
            stages.push("infer".into());
            dets
        }
        (None, None) => unreachable!("test split is sliced unless downscaling"),
    };
    save_detections(&out.join("test/merged.json"), &merged)?;
    stages.push("merge".into());

    log::info!("evaluating {} detections", merged.len());
    let report = stage("eval", coco_map(&test, &merged, &cfg.eval))?;
    write_json(&out.join("report/report.json"), &report)?;
    write_text(&out.join("report/report.txt"), &report.to_table())?;
    stage("eval", save_raster(&out.join("report/confusion.png"), &render_confusion(&report.confusion)))?;
    stages.push("eval".into());

    let manifest = RunManifest {
        config_sha256: sha256_hex(config_text.as_bytes()),
        seed: cfg.seed,
        stages,
        files: file_hashes(&out)?,
    };
    write_json(&out.join("run_manifest.json"), &manifest)?;
    Ok(PipelineOutput {
        report,
        output_dir: out,
    })
}

/// Whole-image detection on shrunk images. Detections come back in
/// full-resolution coordinates, already tagged with their image.
fn downscaled_inference(
    test: &DatasetIndex,
    factor: f64,
    backend: &dyn DetectorBackend,
    cfg: &PipelineConfig,
    out: &Path,
) -> Result<Vec<Detection>> {
    let target = |w: u32| ((w as f64 / factor).round() as u32).max(1);
    let small = downscale_dataset(test, |img| (target(img.width), target(img.height)));
    let by_image = small.annotations_by_image();
    let patches: Vec<PatchRecord> = small
        .images
        .iter()
        .map(|img| PatchRecord {
            patch_id: img.image_id,
            parent_image_id: img.image_id,
            origin_x: 0,
            origin_y: 0,
            width: img.width,
            height: img.height,
            annotations: by_image[&img.image_id].iter().map(|a| (*a).clone()).collect(),
        })
        .collect();
    let dir = out.join("test/downscaled");
    let read = |p: &PatchRecord| {
        let full = test.image(p.parent_image_id).expect("same ids");
        let root = cfg.paths.images.as_deref().expect("validated");
        let raster = load_raster(&root.join(&full.file_path))?;
        let (img, _) = downscale_image(&raster, p.width, p.height, &[])?;
        save_raster(&dir.join(crate::slicer::downscaled_file_path(full)), &img)?;
        Ok(img)
    };
    let raster_for: Option<&(dyn Fn(&PatchRecord) -> Result<image::RgbImage> + Sync)> =
        if cfg.write_rasters { Some(&read) } else { None };
    let dets = run_inference(&patches, backend, raster_for)?;
    let mut out_dets = Vec::with_capacity(dets.len());
    for d in dets {
        let full = test.image(d.patch_id.expect("set by run_inference")).expect("same ids");
        let low = small.image(full.image_id).expect("same ids");
        let (sx, sy) = (full.width as f64 / low.width as f64, full.height as f64 / low.height as f64);
        let Some(bbox) = d.bbox.scale(sx, sy)?.intersection(&full.bounds()) else {
            continue;
        };
        out_dets.push(Detection {
            patch_id: None,
            image_id: Some(full.image_id),
            bbox,
            ..d
        });
    }
    Ok(out_dets)
}

fn file_hashes(root: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(root).unwrap_or(&path).to_string_lossy().replace('\\', "/");
            if rel == "run_manifest.json" {
                continue;
            }
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            out.insert(rel, sha256_hex(&bytes));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::hash_tree;
    use crate::synth::{generate, write_synth, SynthSpec};

    fn small_synth(dir: &Path, rasters: bool) -> PathBuf {
        let spec = SynthSpec {
            num_images: 6,
            width_range: (900, 1100),
            height_range: (700, 800),
            class_counts: vec![30, 12, 5, 2],
            ..SynthSpec::default()
        };
        write_synth(&generate(&spec).unwrap(), dir, rasters).unwrap();
        dir.join("annotations.json")
    }

    fn config(data: &Path, out: &Path) -> PipelineConfig {
        PipelineConfig {
            paths: Paths {
                dataset: data.join("annotations.json"),
                images: Some(data.join("images")),
                output: out.to_path_buf(),
            },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn identity_run_scores_one() {
        let data = tempfile::tempdir().unwrap();
        small_synth(data.path(), false);
        let out = tempfile::tempdir().unwrap();
        let r = run_pipeline(&config(data.path(), out.path())).unwrap();
        assert_eq!(r.report.map_50_95, Some(1.0));
        assert!(r.report.confusion.is_diagonal());
        for f in ["config.toml", "split/split.json", "test/manifest.json", "test/merged.json", "report/report.txt", "run_manifest.json"] {
            assert!(out.path().join(f).is_file(), "{f}");
        }
    }

    #[test]
    fn rerun_is_byte_identical_across_worker_counts() {
        let data = tempfile::tempdir().unwrap();
        small_synth(data.path(), true);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut cfg = config(data.path(), a.path());
        cfg.write_rasters = true;
        cfg.augment.enabled = true;
        cfg.detector.oracle = OracleConfig {
            drop_rate: 0.2,
            jitter_px: 1.5,
            ..OracleConfig::default()
        };
        cfg.workers = 1;
        run_pipeline(&cfg).unwrap();
        cfg.paths.output = b.path().to_path_buf();
        cfg.workers = 4;
        run_pipeline(&cfg).unwrap();
        assert_eq!(hash_tree(a.path()).unwrap(), hash_tree(b.path()).unwrap());
        assert!(a.path().join("train/augmented.json").is_file());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = PipelineConfig {
            seed: 9,
            downscale_factor: Some(4.0),
            ..PipelineConfig::default()
        }
        .resolved();
        let text = cfg.to_toml_string().unwrap();
        let mut back = PipelineConfig::from_toml_str(&text).unwrap();
        back.paths.output = cfg.paths.output.clone();
        assert_eq!(back, cfg);
        assert!(PipelineConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn missing_dataset_is_a_config_error() {
        let out = tempfile::tempdir().unwrap();
        let cfg = config(Path::new("/nonexistent"), out.path());
        let err = run_pipeline(&cfg).unwrap_err();
        assert_eq!(err.kind(), crate::error::ErrorKind::Config);
        assert!(err.to_string().contains("stage config"));
    }
}
