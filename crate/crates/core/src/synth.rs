//! Synthetic bright-square corpus: Gun media contain a bright square (moving,
//! in videos) over a noisy dark background, NoGun media only a dim
//! distractor square.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_detection_labels, GroundTruthBox, Label, VideoSample};
use crate::error::{Error, Result};
use crate::frame::FrameTensor;

const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug)]
struct Square {
    x: f64,
    y: f64,
    side: f64,
    level: f64,
}

fn background(size: usize, rng: &mut ChaCha8Rng) -> FrameTensor {
    let tint: [f64; 3] = [rng.gen_range(0.1..0.25), rng.gen_range(0.1..0.25), rng.gen_range(0.1..0.25)];
    let mut f = FrameTensor::filled(size, size, CHANNELS, 0.0);
    for y in 0..size {
        for x in 0..size {
            for (c, t) in tint.iter().enumerate() {
                f.set(y, x, c, t + rng.gen_range(0.0..0.2));
            }
        }
    }
    f
}

fn paint(frame: &mut FrameTensor, sq: Square) {
    let (h, w) = (frame.height(), frame.width());
    let x0 = sq.x.round().max(0.0) as usize;
    let y0 = sq.y.round().max(0.0) as usize;
    let x1 = ((sq.x + sq.side).round() as usize).min(w);
    let y1 = ((sq.y + sq.side).round() as usize).min(h);
    for y in y0..y1 {
        for x in x0..x1 {
            for c in 0..frame.channels() {
                frame.set(y, x, c, sq.level);
            }
        }
    }
}

fn to_box(sq: Square, size: usize) -> GroundTruthBox {
    let s = size as f64;
    let x0 = sq.x.round().max(0.0);
    let y0 = sq.y.round().max(0.0);
    let x1 = (sq.x + sq.side).round().min(s);
    let y1 = (sq.y + sq.side).round().min(s);
    GroundTruthBox::new(
        (x0 + x1) / 2.0 / s,
        (y0 + y1) / 2.0 / s,
        (x1 - x0) / s,
        (y1 - y0) / s,
    )
    .expect("painted square lies inside the frame")
}

fn random_square(size: usize, level: f64, rng: &mut ChaCha8Rng) -> Square {
    let s = size as f64;
    let side = rng.gen_range(s / 5.0..=s / 3.0).round();
    Square {
        x: rng.gen_range(0.0..=s - side).round(),
        y: rng.gen_range(0.0..=s - side).round(),
        side,
        level,
    }
}

/// One `size x size` RGB image and its ground truth (empty for NoGun).
pub fn bright_square_image(size: usize, label: Label, seed: u64) -> (FrameTensor, Vec<GroundTruthBox>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frame = background(size, &mut rng);
    if label.is_gun() {
        let sq = random_square(size, rng.gen_range(0.9..=1.0), &mut rng);
        paint(&mut frame, sq);
        (frame, vec![to_box(sq, size)])
    } else {
        let distractor = random_square(size, rng.gen_range(0.45..0.6), &mut rng);
        paint(&mut frame, distractor);
        (frame, Vec::new())
    }
}

/// `frames` frames; a Gun video's square drifts linearly and bounces off the
/// borders, NoGun videos carry a static dim distractor.
pub fn bright_square_video(
    id: impl Into<String>,
    frames: usize,
    size: usize,
    label: Label,
    seed: u64,
) -> VideoSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let level = if label.is_gun() {
        rng.gen_range(0.9..=1.0)
    } else {
        rng.gen_range(0.45..0.6)
    };
    let mut sq = random_square(size, level, &mut rng);
    let speed = if label.is_gun() { s / 12.0 } else { 0.0 };
    let (mut vx, mut vy) = (rng.gen_range(-speed..=speed), rng.gen_range(-speed..=speed));
    let mut out = Vec::with_capacity(frames);
    let mut boxes = Vec::with_capacity(frames);
    for _ in 0..frames {
        let mut frame = background(size, &mut rng);
        paint(&mut frame, sq);
        out.push(frame);
        boxes.push(if label.is_gun() { vec![to_box(sq, size)] } else { Vec::new() });
        let max = s - sq.side;
        sq.x += vx;
        sq.y += vy;
        if sq.x < 0.0 || sq.x > max {
            vx = -vx;
            sq.x = sq.x.clamp(0.0, max);
        }
        if sq.y < 0.0 || sq.y > max {
            vy = -vy;
            sq.y = sq.y.clamp(0.0, max);
        }
    }
    VideoSample::new(id, label, out)
        .and_then(|v| v.with_boxes(boxes))
        .expect("synthetic frames are homogeneous")
}

fn label_of(i: usize) -> Label {
    if i % 2 == 0 {
        Label::Gun
    } else {
        Label::NoGun
    }
}

fn item_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(i as u64)
}

/// Balanced labeled images, alternating Gun / NoGun.
pub fn image_set(n: usize, size: usize, seed: u64) -> Vec<(FrameTensor, Label, Vec<GroundTruthBox>)> {
    (0..n)
        .map(|i| {
            let label = label_of(i);
            let (f, b) = bright_square_image(size, label, item_seed(seed, i));
            (f, label, b)
        })
        .collect()
}

/// Balanced videos with ids `gun_000`, `nogun_001`, ...
pub fn video_set(n: usize, frames: usize, size: usize, seed: u64) -> Vec<VideoSample> {
    (0..n)
        .map(|i| {
            let label = label_of(i);
            let prefix = if label.is_gun() { "gun" } else { "nogun" };
            bright_square_video(format!("{prefix}_{i:03}"), frames, size, label, item_seed(seed ^ 0xA5A5, i))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthCorpus {
    pub images: usize,
    pub videos: usize,
    /// Frames written per video directory (before sampling).
    pub source_frames: usize,
    pub detection_images: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SynthCorpus {
    fn default() -> Self {
        Self {
            images: 200,
            videos: 60,
            source_frames: 12,
            detection_images: 200,
            image_size: 32,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusPaths {
    pub images: PathBuf,
    pub videos: PathBuf,
    pub detection: PathBuf,
}

fn save_png(frame: &FrameTensor, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    frame
        .to_rgb8()
        .save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

fn class_dir(label: Label) -> &'static str {
    if label.is_gun() {
        "gun"
    } else {
        "no_gun"
    }
}

/// Write `images/{gun,no_gun}/*.png`, `videos/{gun,no_gun}/<id>/frame_NNN.{png,txt}`
/// and `detection/{images,labels}` under `root`.
pub fn write_corpus(root: &Path, spec: &SynthCorpus) -> Result<CorpusPaths> {
    let paths = CorpusPaths {
        images: root.join("images"),
        videos: root.join("videos"),
        detection: root.join("detection"),
    };
    for (i, (frame, label, _)) in image_set(spec.images, spec.image_size, spec.seed).iter().enumerate() {
        save_png(frame, &paths.images.join(class_dir(*label)).join(format!("img_{i:04}.png")))?;
    }
    for v in video_set(spec.videos, spec.source_frames, spec.image_size, spec.seed) {
        let dir = paths.videos.join(class_dir(v.label)).join(&v.id);
        let boxes = v.boxes.as_ref().expect("synthetic videos carry boxes");
        for (k, (frame, b)) in v.frames.iter().zip(boxes).enumerate() {
            save_png(frame, &dir.join(format!("frame_{k:03}.png")))?;
            write_detection_labels(&dir.join(format!("frame_{k:03}.txt")), b)?;
        }
    }
    let det_seed = spec.seed.wrapping_add(1);
    for (i, (frame, _, boxes)) in image_set(spec.detection_images, spec.image_size, det_seed)
        .iter()
        .enumerate()
    {
        save_png(frame, &paths.detection.join("images").join(format!("det_{i:04}.png")))?;
        write_detection_labels(&paths.detection.join("labels").join(format!("det_{i:04}.txt")), boxes)?;
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gun_images_have_one_box_covering_the_bright_square() {
        let (f, boxes) = bright_square_image(32, Label::Gun, 3);
        assert_eq!(boxes.len(), 1);
        let (x, y, w, h) = boxes[0].to_pixels(32, 32);
        let cx = (x + w / 2.0) as usize;
        let cy = (y + h / 2.0) as usize;
        assert!(f.get(cy, cx, 0) >= 0.9);
        let (_, none) = bright_square_image(32, Label::NoGun, 3);
        assert!(none.is_empty());
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(image_set(4, 16, 1), image_set(4, 16, 1));
        assert_ne!(image_set(4, 16, 1)[0].0, image_set(4, 16, 2)[0].0);
        let v = video_set(2, 5, 16, 0);
        assert_eq!(v[0].len(), 5);
        assert_eq!(v[0].boxes.as_ref().unwrap().len(), 5);
        assert_eq!(v, video_set(2, 5, 16, 0));
    }

    #[test]
    fn written_corpus_is_discoverable() {
        use crate::dataset::{discover_dataset, discover_detection_corpus, MediaKind};
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthCorpus {
            images: 6,
            videos: 4,
            source_frames: 3,
            detection_images: 3,
            image_size: 16,
            seed: 0,
        };
        let paths = write_corpus(dir.path(), &spec).unwrap();
        assert_eq!(discover_dataset(&paths.images, MediaKind::Image).unwrap().len(), 6);
        assert_eq!(discover_dataset(&paths.videos, MediaKind::Video).unwrap().len(), 4);
        assert_eq!(discover_detection_corpus(&paths.detection).unwrap().len(), 3);
    }
}
