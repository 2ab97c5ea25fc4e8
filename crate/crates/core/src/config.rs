//! Experiment configuration (TOML).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::backbone::Architecture;
use crate::classifier::{HeadConfig, HeadKind};
use crate::dataset::SplitRatios;
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::metrics::Interpolation;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Two-class still-image corpus for backbone fine-tuning.
    pub images: Option<PathBuf>,
    /// Two-class video corpus (frame directories or GIFs).
    pub videos: Option<PathBuf>,
    /// `images/` + `labels/` detection corpus.
    pub detection: Option<PathBuf>,
    #[serde(default = "default_frames")]
    pub frames_per_video: usize,
    /// `[height, width]` every frame is resized to.
    #[serde(default = "default_frame_size")]
    pub frame_size: [usize; 2],
    #[serde(default)]
    pub split: SplitRatios,
}

fn default_frames() -> usize {
    8
}

fn default_frame_size() -> [usize; 2] {
    [32, 32]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub architecture: Architecture,
    /// Conv block widths of the built-in network.
    pub widths: Vec<usize>,
    /// Parameter file for `imported-pretrained`.
    pub pretrained: Option<PathBuf>,
    pub frozen_prefix: Vec<String>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::SmallConv,
            widths: vec![8, 16, 16],
            pretrained: None,
            frozen_prefix: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    #[serde(flatten)]
    pub head: HeadConfig,
    pub decision_threshold: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            head: HeadConfig::default(),
            decision_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorSection {
    #[serde(flatten)]
    pub grid: DetectorConfig,
    /// Trunk widths, one per halving up to the coarsest stride.
    pub widths: Vec<usize>,
    pub pretrained: Option<PathBuf>,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            grid: DetectorConfig::default(),
            widths: vec![8, 16, 16, 16, 16],
            pretrained: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub backbone: TrainConfig,
    pub classifier: TrainConfig,
    pub detector: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub iou_threshold: f64,
    pub interpolation: Interpolation,
    /// Write frames with drawn detections for every routed video.
    pub annotate_frames: bool,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            interpolation: Interpolation::AllPoint,
            annotate_frames: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub alpha: f64,
    /// Conv block to inspect; the last one when unset.
    pub layer: Option<usize>,
    pub class_id: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            layer: None,
            class_id: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepBackbone {
    pub name: String,
    #[serde(flatten)]
    pub backbone: BackboneConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub backbones: Vec<SweepBackbone>,
    pub heads: Vec<HeadKind>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let variant = |name: &str, widths: Vec<usize>| SweepBackbone {
            name: name.into(),
            backbone: BackboneConfig {
                widths,
                ..Default::default()
            },
        };
        Self {
            backbones: vec![
                variant("conv-narrow", vec![4, 8, 8]),
                variant("conv-medium", vec![8, 16, 16]),
                variant("conv-deep", vec![8, 8, 16, 16]),
            ],
            heads: HeadKind::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub augment: AugmentPolicy,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub detector: DetectorSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
    #[serde(default)]
    pub explain: ExplainConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parse and resolve relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            self.data.images.as_mut(),
            self.data.videos.as_mut(),
            self.data.detection.as_mut(),
            self.backbone.pretrained.as_mut(),
            self.detector.pretrained.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.out_dir);
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Seeds of every stochastic component, derived from the master seed.
    pub fn seeds(&self) -> BTreeMap<String, u64> {
        let s = self.seed;
        [
            ("master", s),
            ("split", s),
            ("backbone_init", s.wrapping_add(1)),
            ("backbone_train", s.wrapping_add(2)),
            ("head_init", s.wrapping_add(3)),
            ("classifier_train", s.wrapping_add(4)),
            ("detector_init", s.wrapping_add(5)),
            ("detector_train", s.wrapping_add(6)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn train_config(&self, which: &str) -> TrainConfig {
        let seeds = self.seeds();
        let (base, seed) = match which {
            "backbone" => (&self.train.backbone, seeds["backbone_train"]),
            "classifier" => (&self.train.classifier, seeds["classifier_train"]),
            _ => (&self.train.detector, seeds["detector_train"]),
        };
        TrainConfig {
            seed,
            ..base.clone()
        }
    }

    pub fn frame_size(&self) -> (usize, usize) {
        (self.data.frame_size[0], self.data.frame_size[1])
    }

    pub fn validate(&self) -> Result<()> {
        self.data.split.validate()?;
        if self.data.frames_per_video == 0 {
            return Err(Error::validation("frames_per_video must be positive"));
        }
        if self.data.frame_size.contains(&0) {
            return Err(Error::validation("frame_size entries must be positive"));
        }
        for (name, p) in [
            ("data.images", &self.data.images),
            ("data.videos", &self.data.videos),
            ("data.detection", &self.data.detection),
            ("backbone.pretrained", &self.backbone.pretrained),
            ("detector.pretrained", &self.detector.pretrained),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(Error::Config(format!("{name} path {} does not exist", p.display())));
                }
            }
        }
        if self.backbone.architecture == Architecture::ImportedPretrained && self.backbone.pretrained.is_none() {
            return Err(Error::Config(
                "imported-pretrained backbone needs backbone.pretrained".into(),
            ));
        }
        if self.backbone.architecture == Architecture::SmallConv && self.backbone.widths.is_empty() {
            return Err(Error::Config("backbone.widths must not be empty".into()));
        }
        self.augment.validate()?;
        self.classifier.head.validate()?;
        if !(self.classifier.decision_threshold > 0.0 && self.classifier.decision_threshold < 1.0) {
            return Err(Error::validation("classifier.decision_threshold must lie in (0, 1)"));
        }
        self.detector.grid.validate()?;
        for which in ["backbone", "classifier", "detector"] {
            self.train_config(which).validate()?;
        }
        if !(0.0..=1.0).contains(&self.evaluate.iou_threshold) {
            return Err(Error::validation("evaluate.iou_threshold must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.explain.alpha) {
            return Err(Error::validation("explain.alpha must lie in [0, 1]"));
        }
        Ok(())
    }
}
