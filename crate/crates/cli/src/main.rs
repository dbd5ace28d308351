//! `tiledet` command-line interface.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use tiledet_core::augment::{materialize, Strategy};
use tiledet_core::dataset::{CategoryTable, DatasetIndex};
use tiledet_core::detector::{load_detections, run_inference, save_detections, DetectorBackend, FileBackend, OracleBackend};
use tiledet_core::evaluator::coco_map;
use tiledet_core::io::{sha256_hex, write_json, write_text};
use tiledet_core::pipeline::{run_pipeline, BackendKind, PipelineConfig};
use tiledet_core::postprocess::{postprocess_pipeline, MergeMode};
use tiledet_core::render::{render_confusion, render_detections};
use tiledet_core::slicer::{load_raster, patches_from_files, save_raster, slice_dataset, write_patch_rasters, PatchManifest, PatchRecord};
use tiledet_core::splitter::{stratified_split, validate_split, Split};
use tiledet_core::synth::{generate, write_synth, SynthSpec};
use tiledet_core::ErrorKind;

#[derive(Parser)]
#[command(name = "tiledet", version, about = "Tiled object detection: slice, split, augment, infer, merge, evaluate")]
struct Cli {
    /// TOML configuration shared by all subcommands; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core). Outputs do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cut images and annotations into overlapping patches.
    Slice(SliceArgs),
    /// Stratified train/val/test split by annotation count.
    Split(SplitArgs),
    /// Write augmented copies of patch rasters.
    Augment(AugmentArgs),
    /// Run a detector backend over patches.
    Infer(InferArgs),
    /// Reproject patch detections and resolve duplicates.
    Merge(MergeArgs),
    /// COCO-style evaluation of whole-image detections.
    Eval(EvalArgs),
    /// Draw detections onto an image.
    Render(RenderArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Run every stage end to end.
    Pipeline(PipelineArgs),
}

#[derive(Args, Serialize)]
struct SliceArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Source rasters; when given, pixel patches are written too.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    patch_size: Option<u32>,
    #[arg(long)]
    overlap: Option<f64>,
    #[arg(long)]
    min_visibility: Option<f64>,
}

#[derive(Args, Serialize)]
struct SplitArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct AugmentArgs {
    /// Patched dataset written by `slice`.
    #[arg(long)]
    patches: PathBuf,
    /// Directory holding the patch rasters.
    #[arg(long)]
    patch_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    #[arg(long)]
    probability: Option<f64>,
}

#[derive(Args, Serialize)]
struct InferArgs {
    #[arg(long)]
    patches: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// oracle or file.
    #[arg(long, value_parser = parse_backend)]
    backend: Option<BackendKind>,
    /// Detections replayed by the file backend.
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Treat patches missing from the detections file as errors.
    #[arg(long)]
    strict: bool,
}

#[derive(Args, Serialize)]
struct MergeArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// nmm, nms or none.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<MergeMode>,
    #[arg(long)]
    iou_threshold: Option<f64>,
    #[arg(long)]
    class_agnostic: bool,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    /// Ground truth in whole-image coordinates.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Evaluate only the categories flagged for the subset.
    #[arg(long)]
    subset: bool,
}

#[derive(Args, Serialize)]
struct RenderArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    detections: PathBuf,
    /// Only draw detections of this image id.
    #[arg(long)]
    image_id: Option<u64>,
    /// Dataset supplying class names; the built-in table otherwise.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 0.60)]
    threshold: f64,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    images: Option<usize>,
    /// Write annotations only.
    #[arg(long)]
    no_rasters: bool,
}

#[derive(Args, Serialize)]
struct PipelineArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    match s {
        "pixel" => Ok(Strategy::Pixel),
        "spatial" => Ok(Strategy::Spatial),
        "both" => Ok(Strategy::Both),
        "none" => Ok(Strategy::None),
        _ => Err(format!("unknown strategy {s:?}")),
    }
}

fn parse_backend(s: &str) -> Result<BackendKind, String> {
    match s {
        "oracle" => Ok(BackendKind::Oracle),
        "file" => Ok(BackendKind::File),
        _ => Err(format!("unknown backend {s:?}")),
    }
}

fn parse_mode(s: &str) -> Result<MergeMode, String> {
    s.parse().map_err(|e: tiledet_core::Error| e.to_string())
}

/// The config file holds the pipeline settings plus an optional `[synth]` table.
struct Settings {
    pipeline: PipelineConfig,
    synth: SynthSpec,
}

fn load_settings(cli: &Cli) -> Result<Settings> {
    let (mut pipeline, mut synth) = match &cli.config {
        None => (PipelineConfig::default(), SynthSpec::default()),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| tiledet_core::Error::io(path, e))?;
            let mut table: toml::Table = toml::from_str(&text)
                .map_err(|e| tiledet_core::Error::Config(format!("{}: {}", path.display(), e.message())))?;
            let synth_table = table.remove("synth");
            let own_seed = synth_table.as_ref().is_some_and(|t| t.get("seed").is_some());
            let mut synth: SynthSpec = match synth_table {
                Some(v) => v
                    .try_into()
                    .map_err(|e: toml::de::Error| tiledet_core::Error::Config(format!("[synth]: {}", e.message())))?,
                None => SynthSpec::default(),
            };
            let pipeline = PipelineConfig::from_toml_str(&toml::to_string(&table)?)?;
            if !own_seed {
                synth.seed = pipeline.seed;
            }
            (pipeline, synth)
        }
    };
    if let Some(seed) = cli.seed {
        pipeline.seed = seed;
        synth.seed = seed;
    }
    if let Some(w) = cli.workers {
        pipeline.workers = w;
    }
    Ok(Settings {
        pipeline: pipeline.resolved(),
        synth,
    })
}

#[derive(Serialize)]
struct StageManifest<'a> {
    command: &'a str,
    config_sha256: String,
    seed: u64,
}

/// Records what produced the files in `dir`.
fn write_manifest(dir: &Path, command: &str, settings: &impl Serialize, seed: u64) -> Result<()> {
    let text = serde_json::to_string(settings)?;
    let m = StageManifest {
        command,
        config_sha256: sha256_hex(text.as_bytes()),
        seed,
    };
    write_json(&dir.join("run_manifest.json"), &m)?;
    Ok(())
}

fn require(path: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    match path {
        Some(p) => Ok(p),
        None => Err(tiledet_core::Error::Config(format!("{what} is required (flag or config)")).into()),
    }
}

fn cmd_slice(s: &Settings, a: SliceArgs) -> Result<()> {
    let mut cfg = s.pipeline.slice;
    if let Some(p) = a.patch_size {
        cfg.patch_w = p;
        cfg.patch_h = p;
    }
    if let Some(o) = a.overlap {
        cfg.overlap = o;
    }
    if let Some(v) = a.min_visibility {
        cfg.min_visibility = v;
    }
    let ds = DatasetIndex::load(&require(a.dataset.clone().or(Some(s.pipeline.paths.dataset.clone())), "--dataset")?)?;
    let sliced = slice_dataset(&ds, &cfg)?;
    sliced.dataset.save(&a.out.join("patches.json"))?;
    sliced.manifest.save(&a.out.join("manifest.json"))?;
    if let Some(images) = &a.images {
        write_patch_rasters(&ds, &sliced, images, &a.out.join("patches"))?;
    }
    write_manifest(&a.out, "slice", &(&a, &cfg), s.pipeline.seed)?;
    println!("{} patches, {} patch annotations", sliced.patches.len(), sliced.dataset.annotations.len());
    Ok(())
}

fn cmd_split(s: &Settings, a: SplitArgs) -> Result<()> {
    let spec = &s.pipeline.split;
    let ds = DatasetIndex::load(&a.dataset.clone().unwrap_or_else(|| s.pipeline.paths.dataset.clone()))?;
    let assignment = stratified_split(&ds, spec)?;
    let report = validate_split(&ds, &assignment, spec)?;
    assignment.save(&a.out.join("split.json"))?;
    write_json(&a.out.join("split_report.json"), &report)?;
    for split in Split::ALL {
        ds.subset(&assignment.images_in(split)).save(&a.out.join(format!("{}.json", split.name())))?;
    }
    for w in &report.warnings {
        log::warn!("{w}");
    }
    write_manifest(&a.out, "split", &(&a, spec), spec.seed)?;
    let f = report.achieved_fractions;
    println!("train {:.4} val {:.4} test {:.4}", f[0], f[1], f[2]);
    Ok(())
}

fn cmd_augment(s: &Settings, a: AugmentArgs) -> Result<()> {
    let mut spec = s.pipeline.augment.spec.clone();
    if let Some(st) = a.strategy {
        spec.strategy = st;
    }
    if let Some(p) = a.probability {
        spec.probability = p;
    }
    let patched = DatasetIndex::load(&a.patches)?;
    let out = materialize(&patched, &a.patch_dir, &a.out.join("images"), &spec)?;
    out.save(&a.out.join("augmented.json"))?;
    write_manifest(&a.out, "augment", &(&a, &spec), spec.seed)?;
    println!("{} augmented patches", out.images.len());
    Ok(())
}

fn cmd_infer(s: &Settings, a: InferArgs) -> Result<()> {
    let patched = DatasetIndex::load(&a.patches)?;
    let manifest = PatchManifest::load(&a.manifest)?;
    let patches = patches_from_files(&patched, &manifest)?;
    let backend: Box<dyn DetectorBackend> = match a.backend.unwrap_or(s.pipeline.detector.backend) {
        BackendKind::Oracle => Box::new(OracleBackend::new(s.pipeline.detector.oracle.clone(), patched.categories.ids())?),
        BackendKind::File => {
            let path = require(a.detections.clone().or_else(|| s.pipeline.detector.detections.clone()), "--detections")?;
            Box::new(FileBackend::load(&path, a.strict || s.pipeline.detector.strict)?)
        }
    };
    let patch_dir = a.patches.parent().unwrap_or(Path::new(".")).join("patches");
    let names = manifest.lookup();
    let read = |p: &PatchRecord| load_raster(&patch_dir.join(&names[&p.patch_id].patch_file_name));
    let dets = run_inference(&patches, backend.as_ref(), Some(&read))?;
    save_detections(&a.out.join("detections.json"), &dets)?;
    write_manifest(&a.out, "infer", &(&a, &s.pipeline.detector), s.pipeline.seed)?;
    println!("{} detections over {} patches", dets.len(), patches.len());
    Ok(())
}

fn cmd_merge(s: &Settings, a: MergeArgs) -> Result<()> {
    let mut cfg = s.pipeline.postprocess.clone();
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(t) = a.iou_threshold {
        cfg.iou_threshold = t;
    }
    cfg.class_agnostic |= a.class_agnostic;
    let dets = load_detections(&a.detections)?;
    let manifest = PatchManifest::load(&a.manifest)?;
    let merged: Vec<_> = postprocess_pipeline(&dets, &manifest, &cfg)?.into_values().flatten().collect();
    save_detections(&a.out.join("merged.json"), &merged)?;
    write_manifest(&a.out, "merge", &(&a, &cfg), s.pipeline.seed)?;
    println!("{} detections in, {} out", dets.len(), merged.len());
    Ok(())
}

fn cmd_eval(s: &Settings, a: EvalArgs) -> Result<()> {
    let ds = DatasetIndex::load(&a.dataset.clone().unwrap_or_else(|| s.pipeline.paths.dataset.clone()))?;
    let dets = load_detections(&a.detections)?;
    let mut cfg = s.pipeline.eval.clone();
    if a.subset {
        cfg.class_subset = Some(ds.categories.subset_ids());
    }
    let report = coco_map(&ds, &dets, &cfg)?;
    write_json(&a.out.join("report.json"), &report)?;
    let table = report.to_table();
    write_text(&a.out.join("report.txt"), &table)?;
    save_raster(&a.out.join("confusion.png"), &render_confusion(&report.confusion))?;
    write_manifest(&a.out, "eval", &(&a, &cfg), s.pipeline.seed)?;
    print!("{table}");
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.threshold) {
        bail!(tiledet_core::Error::Config(format!("threshold {} outside [0, 1]", a.threshold)));
    }
    let raster = load_raster(&a.image)?;
    let categories = match &a.dataset {
        Some(p) => DatasetIndex::load(p)?.categories,
        None => CategoryTable::wsbd(),
    };
    let dets: Vec<_> = load_detections(&a.detections)?
        .into_iter()
        .filter(|d| a.image_id.is_none_or(|id| d.image_id == Some(id)))
        .collect();
    let out = render_detections(&raster, &dets, &categories, a.threshold);
    save_raster(&a.out, &out)?;
    let drawn = dets.iter().filter(|d| d.score >= a.threshold).count();
    println!("{drawn} detections drawn");
    Ok(())
}

fn cmd_synth(s: &Settings, a: SynthArgs) -> Result<()> {
    let mut spec = s.synth.clone();
    if let Some(n) = a.images {
        spec.num_images = n;
    }
    let synth = generate(&spec)?;
    write_synth(&synth, &a.out, !a.no_rasters)?;
    write_manifest(&a.out, "synth", &(&a, &spec), spec.seed)?;
    println!("{} images, {} annotations", synth.dataset.images.len(), synth.dataset.annotations.len());
    Ok(())
}

fn cmd_pipeline(s: &Settings, a: PipelineArgs) -> Result<()> {
    let mut cfg = s.pipeline.clone();
    if let Some(o) = a.out {
        cfg.paths.output = o;
    }
    if let Some(d) = a.dataset {
        cfg.paths.dataset = d;
    }
    if let Some(i) = a.images {
        cfg.paths.images = Some(i);
    }
    let out = run_pipeline(&cfg)?;
    print!("{}", out.report.to_table());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let settings = load_settings(&cli)?;
    if !matches!(cli.command, Command::Pipeline(_)) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(settings.pipeline.workers)
            .build_global()
            .context("starting worker pool")?;
    }
    match cli.command {
        Command::Slice(a) => cmd_slice(&settings, a),
        Command::Split(a) => cmd_split(&settings, a),
        Command::Augment(a) => cmd_augment(&settings, a),
        Command::Infer(a) => cmd_infer(&settings, a),
        Command::Merge(a) => cmd_merge(&settings, a),
        Command::Eval(a) => cmd_eval(&settings, a),
        Command::Render(a) => cmd_render(a),
        Command::Synth(a) => cmd_synth(&settings, a),
        Command::Pipeline(a) => cmd_pipeline(&settings, a),
    }
}

fn error_kind(err: &anyhow::Error) -> ErrorKind {
    if let Some(e) = err.downcast_ref::<tiledet_core::Error>() {
        return e.kind();
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return ErrorKind::Io;
    }
    ErrorKind::Config
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Io => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = error_kind(&err);
            // Core errors already carry their cause chain in the message.
            let message = match err.downcast_ref::<tiledet_core::Error>() {
                Some(e) => e.to_string(),
                None => format!("{err:#}"),
            };
            let line = serde_json::json!({ "error": { "kind": kind.as_str(), "message": message } });
            eprintln!("{line}");
            ExitCode::from(exit_code(kind))
        }
    }
}
