//! Config-driven command line: `prepare`, `train`, `evaluate`, `explain`,
//! `sweep`. Every written file carries a provenance stamp.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{finetune_backbone, init_from_pretrained, BackboneState};
use crate::boxes::BoundingBox;
use crate::classifier::{build_head, train_classifier, ClassifierModel};
use crate::config::ExperimentConfig;
use crate::dataset::{
    discover_dataset, discover_detection_corpus, load_detection_labels, load_image, load_images,
    load_videos, sample_frames, split_dataset, DatasetIndex, IndexEntry, Label, MediaKind,
    SplitManifest, VideoSample, VideoSource,
};
use crate::detector::{finetune_detector, DetectionSet, DetectorState};
use crate::error::{Error, Result};
use crate::gradcam::{capture_activations, gradcam_map, overlay};
use crate::metrics::{
    average_precision, classification_metrics, confusion_counts, roc_auc, ApResult,
    ClassificationMetrics, ConfusionCounts, DetectionsByVideo, GroundTruthByVideo,
};
use crate::pipeline::{
    compare_modes, ground_truth_by_video, run_detection_only, run_two_stage, summary_csv,
    PipelineReport, SummaryRow,
};
use crate::provenance::{self, Provenance};
use crate::render::{annotate, rgb_bytes, roc_plot};

#[derive(Debug, Parser)]
#[command(name = "gunsight", version, about = "Classification-gated gun detection in video")]
pub struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true, value_name = "INT")]
    pub seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Discover the corpora and write split manifests.
    Prepare,
    /// Train one stage, or all of them in dependency order.
    Train {
        #[arg(long, value_enum, default_value_t = TrainTarget::All)]
        target: TrainTarget,
    },
    /// Score the test videos and write reports.
    Evaluate {
        #[arg(long, value_enum, default_value_t = EvalMode::Both)]
        mode: EvalMode,
    },
    /// Grad-CAM overlays for frames of one video.
    Explain {
        /// Video id: its path, the path below the videos root, or its file name.
        #[arg(long)]
        video: String,
        /// Sampled-frame indices, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        frames: Vec<usize>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Expand the backbone x head grid into one config per combination.
    Sweep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrainTarget {
    Backbone,
    Classifier,
    Detector,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    TwoStage,
    DetectionOnly,
    Both,
    Classifier,
}

impl EvalMode {
    fn uses_classifier(self) -> bool {
        self != EvalMode::DetectionOnly
    }

    fn uses_detector(self) -> bool {
        self != EvalMode::Classifier
    }
}

/// Parse `args` (program name first), run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Effective config after `--seed` / `--out` overrides, validated.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config PATH is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let ctx = Context::new(cfg)?;
    match &cli.command {
        Command::Prepare => ctx.prepare(),
        Command::Train { target } => ctx.train(*target),
        Command::Evaluate { mode } => ctx.evaluate(*mode),
        Command::Explain { video, frames, alpha } => ctx.explain(video, frames, *alpha),
        Command::Sweep => ctx.sweep(),
    }
}

/// Output layout below the run directory.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn manifest(&self, kind: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{kind}.json"))
    }

    pub fn checkpoint(&self, stage: &str) -> PathBuf {
        self.root.join("checkpoints").join(stage)
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn explain(&self) -> PathBuf {
        self.root.join("explain")
    }

    pub fn sweep(&self) -> PathBuf {
        self.root.join("sweep")
    }
}

/// Detection split: image paths with their label files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionItem {
    pub image: PathBuf,
    pub labels: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionManifest {
    pub seed: u64,
    pub train: Vec<DetectionItem>,
    pub val: Vec<DetectionItem>,
    pub test: Vec<DetectionItem>,
}

/// Table-3-shaped classifier scores on the test videos.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEvaluation {
    pub num_videos: usize,
    pub confusion: ConfusionCounts,
    #[serde(flatten)]
    pub metrics: ClassificationMetrics,
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeEvaluation {
    pub confusion: Option<ConfusionCounts>,
    pub detector_frame_invocations: usize,
    pub ap: Option<f64>,
    pub num_ground_truth: Option<usize>,
    pub num_excluded_ground_truth: Option<usize>,
    pub false_negative_videos: Vec<String>,
}

/// Detector alone on the held-out detection images, at the configured
/// confidence and NMS thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorEvaluation {
    pub num_images: usize,
    pub num_ground_truth: usize,
    /// Share of ground-truth boxes matched by some detection.
    pub recall: f64,
    pub ap: f64,
}

/// Deterministic evaluation summary; timing lives in the report files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationMetrics {
    pub configuration: String,
    pub frames_per_video: usize,
    pub iou_threshold: f64,
    pub classifier: Option<ClassifierEvaluation>,
    pub detector: Option<DetectorEvaluation>,
    pub two_stage: Option<ModeEvaluation>,
    pub detection_only: Option<ModeEvaluation>,
    pub invocation_ratio: Option<f64>,
    pub ap_delta: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepEntry {
    pub name: String,
    pub config: PathBuf,
}

struct Context {
    cfg: ExperimentConfig,
    prov: Provenance,
    layout: RunLayout,
}

fn dependency(what: &str, path: &Path, hint: &str) -> Error {
    Error::Dependency(format!("{what} not found at {} ({hint})", path.display()))
}

fn load_manifest<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.is_file() {
        return Err(dependency("split manifest", path, "run `prepare` first"));
    }
    crate::checkpoint::read_json(path)
}

fn report(path: &Path) {
    println!("wrote {}", path.display());
}

impl Context {
    fn new(cfg: ExperimentConfig) -> Result<Self> {
        let prov = Provenance::new(&cfg)?;
        let layout = RunLayout::new(cfg.out_dir.clone());
        Ok(Self { cfg, prov, layout })
    }

    fn write_json(&self, path: &Path, value: &impl Serialize) -> Result<()> {
        provenance::write_json(path, value, &self.prov)?;
        report(path);
        Ok(())
    }

    fn write_png(&self, path: &Path, frame: &crate::frame::FrameTensor) -> Result<()> {
        provenance::write_png(path, frame.width() as u32, frame.height() as u32, &rgb_bytes(frame), &self.prov)
    }

    fn data_path(&self, which: &str) -> Result<&Path> {
        let p = match which {
            "images" => &self.cfg.data.images,
            "videos" => &self.cfg.data.videos,
            _ => &self.cfg.data.detection,
        };
        p.as_deref()
            .ok_or_else(|| Error::Config(format!("data.{which} is not set")))
    }

    // ---- prepare ----

    fn prepare(&self) -> Result<()> {
        let ratios = self.cfg.data.split;
        let seed = self.cfg.seeds()["split"];
        let mut wrote = false;
        for (key, kind) in [("images", MediaKind::Image), ("videos", MediaKind::Video)] {
            if let Ok(root) = self.data_path(key) {
                let index = discover_dataset(root, kind)?;
                let split = split_dataset(&index, ratios, seed)?;
                self.write_json(&self.layout.manifest(key), &SplitManifest::new(&index, &split))?;
                wrote = true;
            }
        }
        if let Ok(root) = self.data_path("detection") {
            let pairs = discover_detection_corpus(root)?;
            // stratify on whether an image carries boxes
            let mut entries = Vec::with_capacity(pairs.len());
            for (img, labels) in &pairs {
                let has_boxes = match labels {
                    Some(l) => !load_detection_labels(l)?.is_empty(),
                    None => false,
                };
                entries.push(IndexEntry {
                    path: img.clone(),
                    label: if has_boxes { Label::Gun } else { Label::NoGun },
                });
            }
            let index = DatasetIndex::from_entries(MediaKind::Image, entries);
            let split = split_dataset(&index, ratios, seed)?;
            let items = |ids: &[usize]| {
                ids.iter()
                    .map(|&i| DetectionItem {
                        image: pairs[i].0.clone(),
                        labels: pairs[i].1.clone(),
                    })
                    .collect()
            };
            let manifest = DetectionManifest {
                seed,
                train: items(&split.train),
                val: items(&split.val),
                test: items(&split.test),
            };
            self.write_json(&self.layout.manifest("detection"), &manifest)?;
            wrote = true;
        }
        if !wrote {
            return Err(Error::Config("config names no data.images, data.videos or data.detection".into()));
        }
        Ok(())
    }

    // ---- train ----

    fn train(&self, target: TrainTarget) -> Result<()> {
        match target {
            TrainTarget::Backbone => self.train_backbone(),
            TrainTarget::Classifier => self.train_classifier(),
            TrainTarget::Detector => self.train_detector(),
            TrainTarget::All => {
                self.train_backbone()?;
                self.train_classifier()?;
                self.train_detector()
            }
        }
    }

    fn finish_checkpoint(&self, dir: &Path) -> Result<()> {
        provenance::stamp(dir, &self.prov)?;
        report(dir);
        Ok(())
    }

    fn train_backbone(&self) -> Result<()> {
        let manifest: SplitManifest = load_manifest(&self.layout.manifest("images"))?;
        let size = self.cfg.frame_size();
        let train = load_images(&SplitManifest::entries(&manifest.train), size)?;
        let val = load_images(&SplitManifest::entries(&manifest.val), size)?;
        let seeds = self.cfg.seeds();
        let b = &self.cfg.backbone;
        let init = match &b.pretrained {
            Some(path) => init_from_pretrained(&BackboneState::import(path)?)?,
            None => BackboneState::small_conv(3, &b.widths, seeds["backbone_init"])?,
        }
        .with_frozen_prefix(b.frozen_prefix.clone());
        let result = finetune_backbone(&init, &train, &val, &self.cfg.augment, &self.cfg.train_config("backbone"))?;
        let dir = self.layout.checkpoint("backbone");
        result.state.save(&dir, "backbone", Some(result.history.clone()))?;
        provenance::write_json(&dir.join("history.json"), &result.history, &self.prov)?;
        self.finish_checkpoint(&dir)
    }

    fn load_backbone(&self) -> Result<BackboneState> {
        let dir = self.layout.checkpoint("backbone");
        if !dir.join("backbone.safetensors").is_file() {
            return Err(dependency("backbone checkpoint", &dir, "run `train --target backbone` first"));
        }
        Ok(BackboneState::load(&dir, "backbone")?.0)
    }

    fn load_video_split(&self, part: &str) -> Result<Vec<VideoSample>> {
        let manifest: SplitManifest = load_manifest(&self.layout.manifest("videos"))?;
        let paths = match part {
            "train" => &manifest.train,
            "val" => &manifest.val,
            _ => &manifest.test,
        };
        load_videos(
            &SplitManifest::entries(paths),
            self.cfg.data.frames_per_video,
            self.cfg.frame_size(),
        )
    }

    fn train_classifier(&self) -> Result<()> {
        let backbone = self.load_backbone()?;
        let train = self.load_video_split("train")?;
        let val = self.load_video_split("val")?;
        let c = &self.cfg.classifier;
        let head = build_head(&c.head, backbone.feature_dim(), self.cfg.seeds()["head_init"])?;
        let model = ClassifierModel::new(backbone, head, c.decision_threshold, self.cfg.data.frames_per_video)?;
        let (trained, history) = train_classifier(&model, &train, &val, &self.cfg.train_config("classifier"))?;
        let dir = self.layout.checkpoint("classifier");
        trained.save(&dir, Some(history.clone()))?;
        provenance::write_json(&dir.join("history.json"), &history, &self.prov)?;
        self.finish_checkpoint(&dir)
    }

    fn load_detection_set(items: &[DetectionItem]) -> Result<DetectionSet> {
        let mut images = Vec::with_capacity(items.len());
        let mut labels = Vec::with_capacity(items.len());
        for item in items {
            images.push(load_image(&item.image)?);
            labels.push(match &item.labels {
                Some(l) => load_detection_labels(l)?,
                None => Vec::new(),
            });
        }
        DetectionSet::new(images, labels)
    }

    fn train_detector(&self) -> Result<()> {
        let manifest: DetectionManifest = load_manifest(&self.layout.manifest("detection"))?;
        let train = Self::load_detection_set(&manifest.train)?;
        let val = Self::load_detection_set(&manifest.val)?;
        let d = &self.cfg.detector;
        let init = match &d.pretrained {
            Some(dir) => DetectorState::load(dir)?
                .with_thresholds(d.grid.confidence_threshold, d.grid.nms_iou_threshold)?,
            None => DetectorState::small(d.grid.clone(), 3, &d.widths, self.cfg.seeds()["detector_init"])?,
        };
        let out = finetune_detector(&init, &train, &val, &self.cfg.train_config("detector"))?;
        let dir = self.layout.checkpoint("detector");
        out.state.save(&dir, Some(out.history.clone()))?;
        provenance::write_json(&dir.join("history.json"), &out.history, &self.prov)?;
        self.finish_checkpoint(&dir)
    }

    // ---- evaluate ----

    fn load_classifier(&self) -> Result<ClassifierModel> {
        let dir = self.layout.checkpoint("classifier");
        if !dir.join("classifier.json").is_file() {
            return Err(dependency("classifier checkpoint", &dir, "run `train --target classifier` first"));
        }
        ClassifierModel::load(&dir)
    }

    fn load_detector(&self) -> Result<DetectorState> {
        let dir = self.layout.checkpoint("detector");
        if !dir.join("detector.json").is_file() {
            return Err(dependency("detector checkpoint", &dir, "run `train --target detector` first"));
        }
        let g = &self.cfg.detector.grid;
        DetectorState::load(&dir)?.with_thresholds(g.confidence_threshold, g.nms_iou_threshold)
    }

    fn configuration_name(&self) -> String {
        if self.cfg.name.is_empty() {
            let arch = serde_json::to_value(self.cfg.backbone.architecture)
                .ok()
                .and_then(|v| v.as_str().map(str::to_owned))
                .unwrap_or_default();
            format!("{arch}+{}", self.cfg.classifier.head.kind)
        } else {
            self.cfg.name.clone()
        }
    }

    fn mode_ap(
        &self,
        report: &PipelineReport,
        gt: Option<&GroundTruthByVideo>,
    ) -> Result<Option<ApResult>> {
        let Some(gt) = gt else { return Ok(None) };
        if gt.values().flatten().all(Vec::is_empty) {
            return Ok(None);
        }
        let excluded = report.false_negative_videos().into_iter().collect();
        average_precision(
            &report.detections_by_video(),
            gt,
            self.cfg.evaluate.iou_threshold,
            &excluded,
            self.cfg.evaluate.interpolation,
        )
        .map(Some)
    }

    fn evaluate_detector(&self, det: &DetectorState) -> Result<Option<DetectorEvaluation>> {
        let path = self.layout.manifest("detection");
        if !path.is_file() {
            return Ok(None);
        }
        let manifest: DetectionManifest = load_manifest(&path)?;
        let set = Self::load_detection_set(&manifest.test)?;
        let mut gt = GroundTruthByVideo::new();
        for (i, (image, labels)) in set.images.iter().zip(&set.labels).enumerate() {
            let boxes = labels
                .iter()
                .map(|b| {
                    let (x, y, w, h) = b.to_pixels(image.width(), image.height());
                    BoundingBox::new(x, y, w, h, 1.0)
                })
                .collect();
            gt.insert(format!("{i:06}"), vec![boxes]);
        }
        let num_ground_truth = gt.values().flatten().map(Vec::len).sum();
        if num_ground_truth == 0 {
            return Ok(None);
        }
        let found = set
            .images
            .par_iter()
            .map(|img| det.detect_frames(std::slice::from_ref(img)))
            .collect::<Result<Vec<_>>>()?;
        let dets: DetectionsByVideo = found
            .into_iter()
            .enumerate()
            .map(|(i, d)| (format!("{i:06}"), d))
            .collect();
        let ap = average_precision(
            &dets,
            &gt,
            self.cfg.evaluate.iou_threshold,
            &Default::default(),
            self.cfg.evaluate.interpolation,
        )?;
        Ok(Some(DetectorEvaluation {
            num_images: set.len(),
            num_ground_truth,
            recall: ap.curve.last().map_or(0.0, |p| p.recall),
            ap: ap.ap,
        }))
    }

    fn evaluate(&self, mode: EvalMode) -> Result<()> {
        let videos = self.load_video_split("test")?;
        if videos.is_empty() {
            return Err(Error::validation("test partition of the video manifest is empty"));
        }
        let classifier = mode.uses_classifier().then(|| self.load_classifier()).transpose()?;
        let detector = mode.uses_detector().then(|| self.load_detector()).transpose()?;
        let dir = self.layout.eval();
        let name = self.configuration_name();
        let gt = ground_truth_by_video(&videos);
        let mut metrics = EvaluationMetrics {
            configuration: name.clone(),
            frames_per_video: self.cfg.data.frames_per_video,
            iou_threshold: self.cfg.evaluate.iou_threshold,
            classifier: None,
            detector: None,
            two_stage: None,
            detection_only: None,
            invocation_ratio: None,
            ap_delta: None,
        };

        if let Some(model) = &classifier {
            if let Some(first) = videos.first().and_then(|v| v.frames.first()) {
                crate::pipeline::VideoClassifier::check_frame(model, first)?;
            }
            let preds = videos
                .par_iter()
                .map(|v| model.classify_video(v))
                .collect::<Result<Vec<_>>>()?;
            let predicted: Vec<Label> = preds.iter().map(|p| p.label).collect();
            let truth: Vec<Label> = videos.iter().map(|v| v.label).collect();
            let scores: Vec<f64> = preds.iter().map(|p| p.p_gun).collect();
            let confusion = confusion_counts(&predicted, &truth)?;
            let roc = roc_auc(&scores, &truth).ok();
            if let Some(roc) = &roc {
                let csv_path = dir.join("roc.csv");
                provenance::write_csv(&csv_path, &roc.to_csv(), &self.prov)?;
                report(&csv_path);
                let png_path = dir.join("roc.png");
                self.write_png(&png_path, &roc_plot(roc, 256))?;
                report(&png_path);
            }
            metrics.classifier = Some(ClassifierEvaluation {
                num_videos: videos.len(),
                confusion,
                metrics: classification_metrics(&confusion)?,
                auc: roc.map(|r| r.auc),
            });
        }

        if let Some(det) = &detector {
            metrics.detector = self.evaluate_detector(det)?;
        }

        let mut rows = Vec::new();
        let mut two = None;
        let mut det_only = None;
        if let (Some(model), Some(det)) = (&classifier, &detector) {
            if mode == EvalMode::TwoStage || mode == EvalMode::Both {
                let r = run_two_stage(&videos, model, det)?;
                let ap = self.mode_ap(&r, gt.as_ref())?;
                metrics.two_stage = Some(mode_summary(&r, ap.as_ref()));
                rows.push(SummaryRow::from_report(format!("{name}+detector"), &r, ap.map(|a| a.ap)));
                self.write_json(&dir.join("two_stage_report.json"), &r)?;
                two = Some(r);
            }
        }
        if let Some(det) = &detector {
            if mode == EvalMode::DetectionOnly || mode == EvalMode::Both {
                let r = run_detection_only(&videos, det)?;
                let ap = self.mode_ap(&r, gt.as_ref())?;
                metrics.detection_only = Some(mode_summary(&r, ap.as_ref()));
                rows.push(SummaryRow::from_report("detection-only", &r, ap.map(|a| a.ap)));
                self.write_json(&dir.join("detection_only_report.json"), &r)?;
                det_only = Some(r);
            }
        }
        if let (Some(a), Some(b)) = (&two, &det_only) {
            let has_gt = gt.as_ref().filter(|g| g.values().flatten().any(|f| !f.is_empty()));
            let cmp = compare_modes(a, b, has_gt, self.cfg.evaluate.iou_threshold, self.cfg.evaluate.interpolation)?;
            metrics.invocation_ratio = Some(cmp.invocation_ratio);
            metrics.ap_delta = cmp.ap_delta;
            self.write_json(&dir.join("comparison.json"), &cmp)?;
        }
        if !rows.is_empty() {
            let path = dir.join("summary.csv");
            provenance::write_csv(&path, &summary_csv(&rows)?, &self.prov)?;
            report(&path);
        }
        if self.cfg.evaluate.annotate_frames {
            if let Some(r) = two.as_ref().or(det_only.as_ref()) {
                self.write_annotations(&videos, r, gt.as_ref())?;
            }
        }
        self.write_json(&dir.join("metrics.json"), &metrics)
    }

    fn video_dir_name(&self, id: &str) -> String {
        let path = Path::new(id);
        let rel = self
            .cfg
            .data
            .videos
            .as_deref()
            .and_then(|root| path.strip_prefix(root).ok())
            .unwrap_or(path);
        rel.components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .filter(|c| c != "/")
            .collect::<Vec<_>>()
            .join("__")
    }

    fn write_annotations(
        &self,
        videos: &[VideoSample],
        report: &PipelineReport,
        gt: Option<&GroundTruthByVideo>,
    ) -> Result<()> {
        let root = self.layout.eval().join("frames");
        for (video, record) in videos.iter().zip(&report.records) {
            if !record.routed_to_detector {
                continue;
            }
            let dir = root.join(self.video_dir_name(&video.id));
            for fd in &record.detections {
                let truth: &[BoundingBox] = gt
                    .and_then(|g| g.get(&video.id))
                    .and_then(|frames| frames.get(fd.index))
                    .map_or(&[], Vec::as_slice);
                let img = annotate(&video.frames[fd.index], &fd.boxes, truth);
                self.write_png(&dir.join(format!("frame_{:03}.png", fd.index)), &img)?;
            }
        }
        report_dir(&root);
        Ok(())
    }

    // ---- explain ----

    fn find_video(&self, id: &str) -> Result<IndexEntry> {
        let manifest: SplitManifest = load_manifest(&self.layout.manifest("videos"))?;
        let all: Vec<PathBuf> = manifest
            .train
            .iter()
            .chain(&manifest.val)
            .chain(&manifest.test)
            .cloned()
            .collect();
        let matches: Vec<IndexEntry> = SplitManifest::entries(&all)
            .into_iter()
            .filter(|e| {
                let full = e.path.to_string_lossy();
                full == id
                    || self.video_dir_name(&full).replace("__", "/") == id
                    || e.path.file_name().is_some_and(|n| n.to_string_lossy() == id)
            })
            .collect();
        match matches.len() {
            1 => Ok(matches.into_iter().next().expect("one match")),
            0 => Err(Error::Lookup(format!("no video with id {id:?} in the manifest"))),
            n => Err(Error::Lookup(format!("video id {id:?} is ambiguous ({n} matches)"))),
        }
    }

    fn explain(&self, video: &str, frames: &[usize], alpha: Option<f64>) -> Result<()> {
        let alpha = alpha.unwrap_or(self.cfg.explain.alpha);
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::validation(format!("alpha {alpha} outside [0, 1]")));
        }
        let entry = self.find_video(video)?;
        let model = self.load_classifier()?;
        let sample = sample_frames(
            &VideoSource::from_path(&entry.path)?,
            entry.label,
            self.cfg.data.frames_per_video,
            self.cfg.frame_size(),
        )?;
        if let Some(&bad) = frames.iter().find(|&&i| i >= sample.len()) {
            return Err(Error::Lookup(format!(
                "frame {bad} out of range, video has {} sampled frames",
                sample.len()
            )));
        }
        let dir = self.layout.explain().join(self.video_dir_name(&sample.id));
        for &i in frames {
            let frame = &sample.frames[i];
            let cap = capture_activations(&model, frame, self.cfg.explain.class_id, self.cfg.explain.layer)?;
            let hm = gradcam_map(&cap)?;
            let png = dir.join(format!("frame_{i:03}.png"));
            self.write_png(&png, &overlay(&hm, frame, alpha))?;
            report(&png);
            let csv = dir.join(format!("frame_{i:03}_heatmap.csv"));
            provenance::write_csv(&csv, &hm.to_csv(), &self.prov)?;
            report(&csv);
        }
        Ok(())
    }

    // ---- sweep ----

    fn sweep(&self) -> Result<()> {
        let dir = self.layout.sweep();
        let mut entries = Vec::new();
        for b in &self.cfg.sweep.backbones {
            for &head in &self.cfg.sweep.heads {
                let name = format!("{}+{}", b.name, head);
                let mut cfg = self.cfg.clone();
                cfg.name = name.clone();
                cfg.backbone = b.backbone.clone();
                cfg.classifier.head.kind = head;
                cfg.out_dir = dir.join(&name);
                cfg.validate()?;
                let path = dir.join(format!("{name}.toml"));
                provenance::write_toml(&path, &cfg.to_toml()?, &self.prov)?;
                report(&path);
                entries.push(SweepEntry { name, config: path });
            }
        }
        self.write_json(&dir.join("index.json"), &entries)
    }
}

fn report_dir(dir: &Path) {
    if dir.is_dir() {
        report(dir);
    }
}

fn mode_summary(r: &PipelineReport, ap: Option<&ApResult>) -> ModeEvaluation {
    ModeEvaluation {
        confusion: r.confusion,
        detector_frame_invocations: r.detector_frame_invocations,
        ap: ap.map(|a| a.ap),
        num_ground_truth: ap.map(|a| a.num_ground_truth),
        num_excluded_ground_truth: ap.map(|a| a.num_excluded_ground_truth),
        false_negative_videos: r.false_negative_videos(),
    }
}
