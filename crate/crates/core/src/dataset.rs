//! Corpus discovery, stratified splitting, frame sampling and detection labels.
//!
//! Corpora follow a class-folder layout `<root>/<ClassName>/<item>` with
//! exactly two class folders. The folder whose normalized name starts with
//! `no`/`non` (e.g. `NoGun`, `No_Gun`, `non-gun`) is the negative class; the
//! other is Gun. Image items are image files; video items are either
//! directories of numbered frame images or animated GIFs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::AnimationDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::FrameTensor;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "gif"];
const VIDEO_EXTENSIONS: &[&str] = &["gif", "mp4", "avi", "mov", "mkv", "webm"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    NoGun = 0,
    Gun = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::NoGun),
            1 => Ok(Label::Gun),
            other => Err(Error::validation(format!("label {other} is not binary"))),
        }
    }

    pub fn is_gun(self) -> bool {
        self == Label::Gun
    }

    /// Classify a class-folder name.
    pub fn from_folder_name(name: &str) -> Self {
        let norm: String = name
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        if norm.starts_with("no") {
            Label::NoGun
        } else {
            Label::Gun
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        Label::from_index(v as usize).map_err(|e| e.to_string())
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Gun => "Gun",
            Label::NoGun => "NoGun",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MediaKind {
    Image,
    Video,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub path: PathBuf,
    pub label: Label,
}

/// Ordered `(path, label)` entries of one corpus. Image and video corpora
/// share this shape; `kind` records which one was discovered.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub kind: MediaKind,
    pub entries: Vec<IndexEntry>,
    pub class_counts: BTreeMap<Label, usize>,
}

pub type ImageDatasetIndex = DatasetIndex;
pub type VideoDatasetIndex = DatasetIndex;

impl DatasetIndex {
    pub fn from_entries(kind: MediaKind, entries: Vec<IndexEntry>) -> Self {
        let mut class_counts = BTreeMap::new();
        for e in &entries {
            *class_counts.entry(e.label).or_insert(0) += 1;
        }
        Self {
            kind,
            entries,
            class_counts,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.class_counts.get(&label).copied().unwrap_or(0)
    }
}

fn extension_of(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut items = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
        .collect::<Result<Vec<_>>>()?;
    items.sort();
    Ok(items)
}

fn is_media(path: &Path, kind: MediaKind) -> bool {
    match kind {
        MediaKind::Image => {
            path.is_file()
                && extension_of(path).is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str()))
        }
        MediaKind::Video => {
            path.is_dir()
                || (path.is_file()
                    && extension_of(path).is_some_and(|e| VIDEO_EXTENSIONS.contains(&e.as_str())))
        }
    }
}

/// Enumerate a two-class corpus in deterministic lexicographic order.
pub fn discover_dataset(root: &Path, kind: MediaKind) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Config(format!(
            "dataset root {} does not exist or is not a directory",
            root.display()
        )));
    }
    let class_dirs: Vec<PathBuf> = sorted_dir(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.len() != 2 {
        return Err(Error::Layout {
            path: root.to_path_buf(),
            reason: format!("expected exactly two class folders, found {}", class_dirs.len()),
        });
    }
    let labels: Vec<Label> = class_dirs
        .iter()
        .map(|d| Label::from_folder_name(&d.file_name().unwrap_or_default().to_string_lossy()))
        .collect();
    if labels[0] == labels[1] {
        return Err(Error::Layout {
            path: root.to_path_buf(),
            reason: "class folders must name one Gun and one NoGun class".into(),
        });
    }

    let mut entries = Vec::new();
    for (dir, label) in class_dirs.iter().zip(labels) {
        for item in sorted_dir(dir)? {
            if is_media(&item, kind) {
                entries.push(IndexEntry { path: item, label });
            }
        }
    }
    if entries.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(DatasetIndex::from_entries(kind, entries))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub const fn new(train: f64, val: f64, test: f64) -> Self {
        Self { train, val, test }
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::validation(format!(
                "split ratios must be non-negative, got {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!(
                "split ratios must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self::new(0.7, 0.15, 0.15)
    }
}

/// Disjoint, exhaustive train/val/test index lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    pub ratios: SplitRatios,
}

// Floors tolerate products like 0.7 * 10 = 6.999999999999999.
fn floor_cut(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) + 1e-9).floor().min(n as f64) as usize
}

/// Stratified split: each class is shuffled with the seed and cut at
/// `floor(r_train * n_c)` and `floor((r_train + r_val) * n_c)`.
pub fn split_dataset(index: &DatasetIndex, ratios: SplitRatios, seed: u64) -> Result<SplitAssignment> {
    ratios.validate()?;
    if index.is_empty() {
        return Err(Error::validation("cannot split an empty index"));
    }
    let mut out = SplitAssignment {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        seed,
        ratios,
    };
    for label in [Label::NoGun, Label::Gun] {
        let mut members: Vec<usize> = index
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == label)
            .map(|(i, _)| i)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(label.index() as u64 + 1)));
        members.shuffle(&mut rng);
        let n = members.len();
        let cut_train = floor_cut(ratios.train, n);
        let cut_val = floor_cut(ratios.train + ratios.val, n).max(cut_train);
        out.train.extend_from_slice(&members[..cut_train]);
        out.val.extend_from_slice(&members[cut_train..cut_val]);
        out.test.extend_from_slice(&members[cut_val..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// Split manifest as exported to JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: SplitRatios,
    pub train: Vec<PathBuf>,
    pub val: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
}

impl SplitManifest {
    pub fn new(index: &DatasetIndex, split: &SplitAssignment) -> Self {
        let paths = |ids: &[usize]| ids.iter().map(|&i| index.entries[i].path.clone()).collect();
        Self {
            seed: split.seed,
            ratios: split.ratios,
            train: paths(&split.train),
            val: paths(&split.val),
            test: paths(&split.test),
        }
    }

    /// Labeled entries of one partition, labels recovered from class folders.
    pub fn entries(paths: &[PathBuf]) -> Vec<IndexEntry> {
        paths
            .iter()
            .map(|p| IndexEntry {
                path: p.clone(),
                label: p
                    .parent()
                    .and_then(Path::file_name)
                    .map(|n| Label::from_folder_name(&n.to_string_lossy()))
                    .unwrap_or(Label::Gun),
            })
            .collect()
    }
}

/// Normalized `class cx cy w h` box relative to the image size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub class_id: u32,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl GroundTruthBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self {
            class_id: 0,
            cx,
            cy,
            w,
            h,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_id != 0 {
            return Err(Error::validation(format!(
                "class id {} is not the Gun class (0)",
                self.class_id
            )));
        }
        for (name, v) in [("cx", self.cx), ("cy", self.cy), ("w", self.w), ("h", self.h)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!("{name}={v} outside [0, 1]")));
            }
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::validation("box width and height must be positive"));
        }
        Ok(())
    }

    /// Top-left pixel box `(x, y, w, h)` clamped to a `width x height` image.
    pub fn to_pixels(&self, width: usize, height: usize) -> (f64, f64, f64, f64) {
        let (wf, hf) = (width as f64, height as f64);
        let x1 = ((self.cx - self.w / 2.0) * wf).clamp(0.0, wf);
        let y1 = ((self.cy - self.h / 2.0) * hf).clamp(0.0, hf);
        let x2 = ((self.cx + self.w / 2.0) * wf).clamp(0.0, wf);
        let y2 = ((self.cy + self.h / 2.0) * hf).clamp(0.0, hf);
        (x1, y1, x2 - x1, y2 - y1)
    }
}

pub fn parse_detection_labels(text: &str, path: &Path) -> Result<Vec<GroundTruthBox>> {
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(parse_err(format!("expected 5 fields, found {}", fields.len())));
        }
        let nums = fields
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| parse_err(format!("{f:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if nums[0].fract() != 0.0 || nums[0] < 0.0 {
            return Err(parse_err(format!("class id {} is not a non-negative integer", nums[0])));
        }
        let b = GroundTruthBox {
            class_id: nums[0] as u32,
            cx: nums[1],
            cy: nums[2],
            w: nums[3],
            h: nums[4],
        };
        b.validate().map_err(|e| match e {
            Error::Validation(msg) => {
                Error::Validation(format!("{}:{}: {msg}", path.display(), i + 1))
            }
            other => other,
        })?;
        boxes.push(b);
    }
    Ok(boxes)
}

/// Read a `class cx cy w h` label file.
pub fn load_detection_labels(path: &Path) -> Result<Vec<GroundTruthBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detection_labels(&text, path)
}

pub fn format_detection_labels(boxes: &[GroundTruthBox]) -> String {
    boxes
        .iter()
        .map(|b| format!("{} {} {} {} {}\n", b.class_id, b.cx, b.cy, b.w, b.h))
        .collect()
}

pub fn write_detection_labels(path: &Path, boxes: &[GroundTruthBox]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, format_detection_labels(boxes)).map_err(|e| Error::io(path, e))
}

/// Where a video's frames come from.
#[derive(Clone, Debug)]
pub enum VideoSource {
    /// Directory of numbered frame images; `<stem>.txt` beside a frame holds
    /// its boxes.
    FrameDir(PathBuf),
    /// Animated GIF.
    Gif(PathBuf),
    /// Already-decoded frames with optional per-frame boxes.
    Memory {
        id: String,
        frames: Vec<FrameTensor>,
        boxes: Option<Vec<Vec<GroundTruthBox>>>,
    },
}

impl VideoSource {
    pub fn from_path(path: &Path) -> Result<Self> {
        if path.is_dir() {
            return Ok(VideoSource::FrameDir(path.to_path_buf()));
        }
        match extension_of(path).as_deref() {
            Some("gif") => Ok(VideoSource::Gif(path.to_path_buf())),
            Some(ext) => Err(Error::Ingest {
                path: path.to_path_buf(),
                reason: format!(
                    "no decoder for .{ext} video; convert to a frame directory or animated GIF"
                ),
            }),
            None => Err(Error::Ingest {
                path: path.to_path_buf(),
                reason: "unrecognized video source".into(),
            }),
        }
    }

    pub fn id(&self) -> String {
        match self {
            VideoSource::FrameDir(p) | VideoSource::Gif(p) => p.to_string_lossy().into_owned(),
            VideoSource::Memory { id, .. } => id.clone(),
        }
    }
}

/// Fixed-length frame sequence of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub label: Label,
    pub frames: Vec<FrameTensor>,
    /// Source frame index of every sampled frame.
    pub source_indices: Vec<usize>,
    /// Per sampled frame ground truth, when the source carries boxes.
    pub boxes: Option<Vec<Vec<GroundTruthBox>>>,
}

impl VideoSample {
    pub fn new(id: impl Into<String>, label: Label, frames: Vec<FrameTensor>) -> Result<Self> {
        let n = frames.len();
        let sample = Self {
            id: id.into(),
            label,
            frames,
            source_indices: (0..n).collect(),
            boxes: None,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn with_boxes(mut self, boxes: Vec<Vec<GroundTruthBox>>) -> Result<Self> {
        if boxes.len() != self.frames.len() {
            return Err(Error::validation(format!(
                "{} box lists for {} frames",
                boxes.len(),
                self.frames.len()
            )));
        }
        self.boxes = Some(boxes);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .frames
            .first()
            .ok_or_else(|| Error::validation(format!("video {} has no frames", self.id)))?;
        if self.frames.iter().any(|f| f.shape() != first.shape()) {
            return Err(Error::validation(format!(
                "video {} has frames of differing shapes",
                self.id
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// `round(k (F - 1) / (T - 1))` for `k = 0..T`; all zeros when `T == 1`.
pub fn sampled_indices(source_frames: usize, target: usize) -> Vec<usize> {
    if source_frames == 0 || target == 0 {
        return Vec::new();
    }
    if target == 1 {
        return vec![0];
    }
    let last = (source_frames - 1) as f64;
    (0..target)
        .map(|k| {
            let pos = (k as f64 * last / (target - 1) as f64).round() as usize;
            pos.min(source_frames - 1)
        })
        .collect()
}

fn frame_sort_key(path: &Path) -> (u64, String) {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let digits: String = stem
        .chars()
        .rev()
        .take_while(char::is_ascii_digit)
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    (digits.parse().unwrap_or(u64::MAX), stem)
}

fn decode_image(path: &Path) -> Result<FrameTensor> {
    let img = image::open(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(FrameTensor::from_image(&img))
}

pub fn load_image(path: &Path) -> Result<FrameTensor> {
    decode_image(path)
}

fn decode_gif(path: &Path) -> Result<Vec<FrameTensor>> {
    let ingest = |reason: String| Error::Ingest {
        path: path.to_path_buf(),
        reason,
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = image::codecs::gif::GifDecoder::new(std::io::BufReader::new(file))
        .map_err(|e| ingest(e.to_string()))?;
    let frames = decoder
        .into_frames()
        .collect_frames()
        .map_err(|e| ingest(e.to_string()))?;
    Ok(frames
        .into_iter()
        .map(|f| FrameTensor::from_image(&image::DynamicImage::ImageRgba8(f.into_buffer())))
        .collect())
}

/// Choose `target` uniformly spaced frames, resize each to `size = (H, W)`.
pub fn sample_frames(
    source: &VideoSource,
    label: Label,
    target: usize,
    size: (usize, usize),
) -> Result<VideoSample> {
    if target == 0 {
        return Err(Error::validation("target frame count must be at least 1"));
    }
    let (h, w) = size;
    if h == 0 || w == 0 {
        return Err(Error::validation("target frame size must be positive"));
    }
    let (frames, indices, boxes) = match source {
        VideoSource::FrameDir(dir) => {
            let mut files: Vec<PathBuf> = sorted_dir(dir)?
                .into_iter()
                .filter(|p| is_media(p, MediaKind::Image))
                .collect();
            files.sort_by_key(|p| frame_sort_key(p));
            if files.is_empty() {
                return Err(Error::Ingest {
                    path: dir.clone(),
                    reason: "no decodable frames".into(),
                });
            }
            let indices = sampled_indices(files.len(), target);
            let mut frames = Vec::with_capacity(target);
            let mut boxes = Vec::with_capacity(target);
            let mut any_labels = false;
            for &i in &indices {
                frames.push(decode_image(&files[i])?.resize(h, w));
                let label_path = files[i].with_extension("txt");
                if label_path.is_file() {
                    any_labels = true;
                    boxes.push(load_detection_labels(&label_path)?);
                } else {
                    boxes.push(Vec::new());
                }
            }
            (frames, indices, any_labels.then_some(boxes))
        }
        VideoSource::Gif(path) => {
            let all = decode_gif(path)?;
            if all.is_empty() {
                return Err(Error::Ingest {
                    path: path.clone(),
                    reason: "GIF has no frames".into(),
                });
            }
            let indices = sampled_indices(all.len(), target);
            let frames = indices.iter().map(|&i| all[i].resize(h, w)).collect();
            (frames, indices, None)
        }
        VideoSource::Memory { id, frames, boxes } => {
            if frames.is_empty() {
                return Err(Error::Ingest {
                    path: PathBuf::from(id),
                    reason: "in-memory video has no frames".into(),
                });
            }
            let indices = sampled_indices(frames.len(), target);
            let picked = indices.iter().map(|&i| frames[i].resize(h, w)).collect();
            let picked_boxes = boxes
                .as_ref()
                .map(|b| indices.iter().map(|&i| b[i].clone()).collect());
            (picked, indices, picked_boxes)
        }
    };
    let sample = VideoSample {
        id: source.id(),
        label,
        frames,
        source_indices: indices,
        boxes,
    };
    sample.validate()?;
    Ok(sample)
}

/// Load every entry of a video index partition.
pub fn load_videos(
    entries: &[IndexEntry],
    target: usize,
    size: (usize, usize),
) -> Result<Vec<VideoSample>> {
    entries
        .iter()
        .map(|e| sample_frames(&VideoSource::from_path(&e.path)?, e.label, target, size))
        .collect()
}

/// Load image entries resized to `size`.
pub fn load_images(entries: &[IndexEntry], size: (usize, usize)) -> Result<Vec<(FrameTensor, Label)>> {
    entries
        .iter()
        .map(|e| Ok((decode_image(&e.path)?.resize(size.0, size.1), e.label)))
        .collect()
}

/// Detection corpus layout: `<root>/images/<stem>.<ext>` with boxes in
/// `<root>/labels/<stem>.txt` (missing label file means no boxes).
pub fn discover_detection_corpus(root: &Path) -> Result<Vec<(PathBuf, Option<PathBuf>)>> {
    let images = root.join("images");
    if !images.is_dir() {
        return Err(Error::Layout {
            path: root.to_path_buf(),
            reason: "detection corpus needs an images/ folder".into(),
        });
    }
    let labels = root.join("labels");
    let pairs: Vec<_> = sorted_dir(&images)?
        .into_iter()
        .filter(|p| is_media(p, MediaKind::Image))
        .map(|img| {
            let stem = img.file_stem().unwrap_or_default().to_owned();
            let label = labels.join(stem).with_extension("txt");
            let label = label.is_file().then_some(label);
            (img, label)
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(images));
    }
    Ok(pairs)
}
