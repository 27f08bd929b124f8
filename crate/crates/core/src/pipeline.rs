//! File-based pipeline: generate a dataset, fit one field per capture, render
//! change maps for test or novel views, and score them.
//!
//! Directory layout under `output`:
//!
//! ```text
//! dataset/  config.toml seeds.json scene_pre.json scene_post.json
//!           pre/ post/            manifest.json + view_NNN.png
//!           test/                 manifest.json, pre/ post/ masks/
//! train/    config.toml field_pre.* field_post.* [train_log.json]
//! detect/   config.toml maps.json masks/ [novel/]
//! eval/     report.json
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::{Camera, Vec3};
use crate::change_render::{render_change_map, ChangeMap, DetectConfig};
use crate::error::{Error, Result};
use crate::io::{self, Manifest, ManifestView};
use crate::metrics::{extract_boxes, map_score, pixel_metrics, PixelMetrics};
use crate::render::{render_image, RadianceField, RadianceSample};
use crate::scene::{apply_edits, ground_truth_change_mask, make_trajectory, tabletop_scene, Aabb, SceneEdit, SceneSpec, TrajectorySpec};
use crate::voxel::{train, TrainConfig, TrainLog, TrainingView, VoxelGridField};

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const MASK_MIN_AREA: usize = 4;
pub const MAP_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Analytic scenes stand in for trained fields.
    Oracle,
    Voxel,
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Backend::Oracle),
            "voxel" => Ok(Backend::Voxel),
            _ => Err(Error::Config(format!("unknown backend {s:?} (expected oracle or voxel)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Scene JSON file; the built-in tabletop when absent.
    #[serde(default)]
    pub file: Option<PathBuf>,
    /// Edits turning the pre scene into the post scene.
    #[serde(default)]
    pub edits: Vec<SceneEdit>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub resolution: [usize; 3],
    /// Defaults to the scene bounds.
    #[serde(default)]
    pub bounds: Option<Aabb>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub backend: Backend,
    pub output: PathBuf,
    /// Read an existing dataset instead of `output/dataset`.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Samples per ray when rendering dataset images.
    pub render_samples: usize,
    pub scene: SceneConfig,
    pub capture: TrajectorySpec,
    pub test: TrajectorySpec,
    pub grid: GridConfig,
    pub train: TrainConfig,
    pub detect: DetectConfig,
    /// Extra poses to detect on, not part of any capture.
    #[serde(default)]
    pub novel_views: Vec<Camera>,
}

/// Seeds derived from the top-level seed, one per random stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub capture_pre: u64,
    pub capture_post: u64,
    pub test: u64,
    pub train_pre: u64,
    pub train_post: u64,
}

fn derive_seed(seed: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    let d = h.finalize();
    // TOML integers are signed 64-bit
    u64::from_le_bytes(d[..8].try_into().unwrap()) >> 1
}

impl StageSeeds {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            capture_pre: derive_seed(seed, "capture_pre"),
            capture_post: derive_seed(seed, "capture_post"),
            test: derive_seed(seed, "test"),
            train_pre: derive_seed(seed, "train_pre"),
            train_post: derive_seed(seed, "train_post"),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let config_err = |e: Error| Error::Config(e.to_string());
        if self.render_samples == 0 {
            return Err(Error::Config("render_samples must be positive".into()));
        }
        self.capture.validate().map_err(config_err)?;
        self.test.validate().map_err(config_err)?;
        self.train.validate().map_err(config_err)?;
        self.detect.validate().map_err(config_err)?;
        if self.grid.resolution.contains(&0) {
            return Err(Error::Config("grid resolution must be positive".into()));
        }
        for path in self.scene.file.iter().chain(&self.dataset) {
            if !path.exists() {
                return Err(Error::Config(format!("{} does not exist", path.display())));
            }
        }
        Ok(())
    }

    pub fn seeds(&self) -> StageSeeds {
        StageSeeds::from_seed(self.seed)
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.output.join("dataset"))
    }

    pub fn train_dir(&self) -> PathBuf {
        self.output.join("train")
    }

    pub fn detect_dir(&self) -> PathBuf {
        self.output.join("detect")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.output.join("eval")
    }

    fn snapshot(&self, dir: &Path) -> Result<()> {
        io::write_text(&dir.join(CONFIG_SNAPSHOT), &self.to_toml())
    }

    /// Pre and post scenes.
    pub fn scenes(&self) -> Result<(SceneSpec, SceneSpec)> {
        let pre: SceneSpec = match &self.scene.file {
            Some(path) => io::read_json(path)?,
            None => tabletop_scene(),
        };
        pre.validate()?;
        let post = apply_edits(&pre, &self.scene.edits)?;
        Ok((pre, post))
    }
}

/// Which test views to process.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViewSelection {
    All,
    List(Vec<usize>),
}

impl FromStr for ViewSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "all" {
            return Ok(ViewSelection::All);
        }
        s.split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad view index {p:?}"))))
            .collect::<Result<Vec<_>>>()
            .map(ViewSelection::List)
    }
}

impl ViewSelection {
    fn resolve(&self, count: usize) -> Result<Vec<usize>> {
        match self {
            ViewSelection::All => Ok((0..count).collect()),
            ViewSelection::List(v) => {
                if let Some(bad) = v.iter().find(|&&i| i >= count) {
                    return Err(Error::Config(format!("view {bad} out of range (have {count})")));
                }
                Ok(v.clone())
            }
        }
    }
}

pub fn view_name(i: usize) -> String {
    format!("view_{i:03}.png")
}

fn write_capture(dir: &Path, scene: &SceneSpec, cameras: &[Camera], k: usize) -> Result<()> {
    io::create_dir(dir)?;
    let mut manifest = Manifest::default();
    for (i, camera) in cameras.iter().enumerate() {
        let image = render_image(scene, camera, k)?;
        io::write_png(&dir.join(view_name(i)), &image)?;
        manifest.views.push(ManifestView {
            image: view_name(i),
            camera: *camera,
        });
    }
    manifest.write(dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub capture_views: usize,
    pub test_views: usize,
    pub changed_pixels: Vec<usize>,
}

/// Renders both captures, the test views and their ground-truth masks.
pub fn cmd_generate(config: &PipelineConfig) -> Result<GenerateSummary> {
    config.validate()?;
    let (pre, post) = config.scenes()?;
    let seeds = config.seeds();
    let with_seed = |spec: &TrajectorySpec, seed: u64| TrajectorySpec { seed, ..spec.clone() };
    let cams_pre = make_trajectory(&with_seed(&config.capture, seeds.capture_pre))?;
    let cams_post = make_trajectory(&with_seed(&config.capture, seeds.capture_post))?;
    let cams_test = make_trajectory(&with_seed(&config.test, seeds.test))?;

    let dir = config.output.join("dataset");
    io::create_dir(&dir)?;
    config.snapshot(&dir)?;
    io::write_json(&dir.join("seeds.json"), &seeds)?;
    io::write_json(&dir.join("scene_pre.json"), &pre)?;
    io::write_json(&dir.join("scene_post.json"), &post)?;
    write_capture(&dir.join("pre"), &pre, &cams_pre, config.render_samples)?;
    write_capture(&dir.join("post"), &post, &cams_post, config.render_samples)?;

    let test = dir.join("test");
    write_capture(&test.join("pre"), &pre, &cams_test, config.render_samples)?;
    write_capture(&test.join("post"), &post, &cams_test, config.render_samples)?;
    Manifest::read(&test.join("pre"))?.write(&test)?;
    io::create_dir(&test.join("masks"))?;
    let mut changed_pixels = Vec::new();
    for (i, camera) in cams_test.iter().enumerate() {
        let mask = ground_truth_change_mask(&pre, &post, camera, config.detect.samples)?;
        changed_pixels.push(mask.count());
        io::write_mask(&test.join("masks").join(view_name(i)), &mask)?;
    }
    Ok(GenerateSummary {
        capture_views: cams_pre.len(),
        test_views: cams_test.len(),
        changed_pixels,
    })
}

fn load_views(dir: &Path) -> Result<Vec<TrainingView>> {
    let manifest = Manifest::read(dir)?;
    manifest
        .views
        .iter()
        .map(|v| {
            Ok(TrainingView {
                camera: v.camera,
                image: io::read_png(&dir.join(&v.image))?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldTrainLog {
    pub losses: Vec<f64>,
    /// Mean PSNR over the held-out test views of the same capture.
    pub heldout_psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub pre: Option<FieldTrainLog>,
    pub post: Option<FieldTrainLog>,
}

fn require_dataset(dir: &Path) -> Result<()> {
    for sub in ["pre", "post", "test"] {
        let manifest = dir.join(sub).join(io::MANIFEST_FILE);
        if !manifest.is_file() {
            return Err(Error::Config(format!("dataset is missing {}", manifest.display())));
        }
    }
    Ok(())
}

pub fn mean_psnr<F: RadianceField>(field: &F, views: &[TrainingView], k: usize) -> Result<f64> {
    let mut total = 0.0;
    for v in views {
        total += render_image(field, &v.camera, k)?.psnr(&v.image)?;
    }
    Ok(total / views.len() as f64)
}

fn fit_field(config: &PipelineConfig, capture: &Path, heldout: &Path, seed: u64, bounds: Aabb) -> Result<(VoxelGridField, FieldTrainLog)> {
    let views = load_views(capture)?;
    let init = VoxelGridField::new(config.grid.resolution, bounds)?;
    let train_config = TrainConfig { seed, ..config.train.clone() };
    let (field, TrainLog { losses }) = train(&views, &train_config, init)?;
    let heldout_psnr = mean_psnr(&field, &load_views(heldout)?, config.train.samples_per_ray)?;
    Ok((field, FieldTrainLog { losses, heldout_psnr }))
}

/// Fits the pre and post fields (or, for the oracle backend, writes the
/// scene descriptors in their place).
pub fn cmd_train(config: &PipelineConfig) -> Result<TrainSummary> {
    config.validate()?;
    let data = config.dataset_dir();
    require_dataset(&data)?;
    let out = config.train_dir();
    io::create_dir(&out)?;
    config.snapshot(&out)?;
    match config.backend {
        Backend::Oracle => {
            for side in ["pre", "post"] {
                let scene: SceneSpec = io::read_json(&data.join(format!("scene_{side}.json")))?;
                io::write_json(&out.join(format!("field_{side}.json")), &scene)?;
            }
            Ok(TrainSummary { pre: None, post: None })
        }
        Backend::Voxel => {
            let bounds = match config.grid.bounds {
                Some(b) => b,
                None => io::read_json::<SceneSpec>(&data.join("scene_pre.json"))?.bounds,
            };
            let seeds = config.seeds();
            let test = data.join("test");
            let (field_pre, log_pre) = fit_field(config, &data.join("pre"), &test.join("pre"), seeds.train_pre, bounds)?;
            field_pre.save(&out.join("field_pre.vgf"))?;
            let (field_post, log_post) = fit_field(config, &data.join("post"), &test.join("post"), seeds.train_post, bounds)?;
            field_post.save(&out.join("field_post.vgf"))?;
            let summary = TrainSummary {
                pre: Some(log_pre),
                post: Some(log_post),
            };
            io::write_json(&out.join("train_log.json"), &summary)?;
            Ok(summary)
        }
    }
}

/// A field loaded from the train stage.
#[derive(Debug, Clone)]
pub enum LoadedField {
    Oracle(SceneSpec),
    Voxel(VoxelGridField),
}

impl RadianceField for LoadedField {
    fn query(&self, x: &Vec3, d: &Vec3) -> RadianceSample {
        match self {
            LoadedField::Oracle(s) => s.query(x, d),
            LoadedField::Voxel(v) => v.query(x, d),
        }
    }
}

pub fn load_field(dir: &Path, side: &str, backend: Backend) -> Result<LoadedField> {
    let path = match backend {
        Backend::Oracle => dir.join(format!("field_{side}.json")),
        Backend::Voxel => dir.join(format!("field_{side}.vgf")),
    };
    if !path.is_file() {
        return Err(Error::Config(format!("missing field {}", path.display())));
    }
    Ok(match backend {
        Backend::Oracle => LoadedField::Oracle(io::read_json(&path)?),
        Backend::Voxel => LoadedField::Voxel(VoxelGridField::load(&path)?),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapRecord {
    pub file: String,
    pub changed_pixels: usize,
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectSummary {
    pub maps: Vec<MapRecord>,
    pub novel: Vec<MapRecord>,
}

fn detect_into(dir: &Path, name: String, fa: &LoadedField, fb: &LoadedField, camera: &Camera, config: &DetectConfig) -> Result<(ChangeMap, MapRecord)> {
    let map = render_change_map(fa, fb, camera, config)?;
    io::write_mask(&dir.join(&name), &map)?;
    let record = MapRecord {
        file: name,
        changed_pixels: map.count(),
        provenance: map.provenance.clone(),
    };
    Ok((map, record))
}

/// Writes a change mask for each selected test view and each novel pose.
pub fn cmd_detect(config: &PipelineConfig, views: &ViewSelection) -> Result<DetectSummary> {
    config.validate()?;
    let test_dir = config.dataset_dir().join("test");
    let manifest_path = test_dir.join(io::MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::Config(format!("missing {}", manifest_path.display())));
    }
    let cameras = Manifest::read(&test_dir)?.cameras();
    let selected = views.resolve(cameras.len())?;
    let fa = load_field(&config.train_dir(), "pre", config.backend)?;
    let fb = load_field(&config.train_dir(), "post", config.backend)?;

    let out = config.detect_dir();
    let masks = out.join("masks");
    io::create_dir(&masks)?;
    config.snapshot(&out)?;
    let mut summary = DetectSummary { maps: Vec::new(), novel: Vec::new() };
    for i in selected {
        let (_, rec) = detect_into(&masks, view_name(i), &fa, &fb, &cameras[i], &config.detect)?;
        summary.maps.push(rec);
    }
    if !config.novel_views.is_empty() {
        let novel = out.join("novel");
        io::create_dir(&novel)?;
        for (i, camera) in config.novel_views.iter().enumerate() {
            let (_, rec) = detect_into(&novel, format!("novel_{i:03}.png"), &fa, &fb, camera, &config.detect)?;
            summary.novel.push(rec);
        }
    }
    io::write_json(&out.join("maps.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewReport {
    pub file: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub map: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub views: Vec<ViewReport>,
    /// Unweighted mean over views.
    pub mean: Aggregate,
}

pub fn evaluate_pair(file: String, pred: &ChangeMap, gt: &ChangeMap) -> Result<ViewReport> {
    let PixelMetrics { precision, recall, f1, iou, tp, fp, fn_ } = pixel_metrics(pred, gt)?;
    let map = map_score(&extract_boxes(pred, MASK_MIN_AREA), &extract_boxes(gt, MASK_MIN_AREA), MAP_IOU_THRESHOLD);
    Ok(ViewReport { file, precision, recall, f1, iou, map, tp, fp, fn_ })
}

/// Scores every ground-truth mask in `gt_dir` against the same-named mask
/// in `pred_dir` and writes `report.json` to `out_dir`.
pub fn cmd_evaluate(pred_dir: &Path, gt_dir: &Path, out_dir: &Path) -> Result<EvaluationReport> {
    for dir in [pred_dir, gt_dir] {
        if !dir.is_dir() {
            return Err(Error::Config(format!("{} is not a directory", dir.display())));
        }
    }
    let gt_files = io::list_pngs(gt_dir)?;
    if gt_files.is_empty() {
        return Err(Error::Data(format!("no masks in {}", gt_dir.display())));
    }
    let mut views = Vec::with_capacity(gt_files.len());
    for gt_path in gt_files {
        let name = gt_path.file_name().unwrap().to_string_lossy().into_owned();
        let pred_path = pred_dir.join(&name);
        if !pred_path.is_file() {
            return Err(Error::Data(format!("no prediction for {name}")));
        }
        let report = evaluate_pair(name.clone(), &io::read_mask(&pred_path)?, &io::read_mask(&gt_path)?)
            .map_err(|e| Error::Data(format!("{name}: {e}")))?;
        views.push(report);
    }
    let n = views.len() as f64;
    let mean_of = |f: fn(&ViewReport) -> f64| views.iter().map(f).sum::<f64>() / n;
    let mean = Aggregate {
        precision: mean_of(|v| v.precision),
        recall: mean_of(|v| v.recall),
        f1: mean_of(|v| v.f1),
        iou: mean_of(|v| v.iou),
        map: mean_of(|v| v.map),
    };
    let report = EvaluationReport { views, mean };
    io::create_dir(out_dir)?;
    io::write_json(&out_dir.join("report.json"), &report)?;
    Ok(report)
}

/// Evaluates the detect stage output against the dataset's masks.
pub fn cmd_evaluate_config(config: &PipelineConfig) -> Result<EvaluationReport> {
    cmd_evaluate(
        &config.detect_dir().join("masks"),
        &config.dataset_dir().join("test").join("masks"),
        &config.eval_dir(),
    )
}
