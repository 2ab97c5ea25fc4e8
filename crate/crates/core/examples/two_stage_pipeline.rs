//! Gate a detector with a video classifier and compare against running the
//! detector on every frame. Stage models here are simple stand-ins so the
//! routing arithmetic is easy to follow.
//!
//! cargo run -p gunsight --example two_stage_pipeline

use gunsight::boxes::BoundingBox;
use gunsight::classifier::VideoPrediction;
use gunsight::dataset::{Label, VideoSample};
use gunsight::detector::FrameDetections;
use gunsight::frame::FrameTensor;
use gunsight::metrics::Interpolation;
use gunsight::pipeline::{
    compare_modes, ground_truth_by_video, run_detection_only, run_two_stage, summary_csv, FrameDetector,
    SummaryRow, VideoClassifier,
};
use gunsight::synth::video_set;

/// Calls a video Gun when its brightest pixel is near white.
struct Brightness;

impl VideoClassifier for Brightness {
    fn classify(&self, v: &VideoSample) -> gunsight::Result<VideoPrediction> {
        let peak = v.frames.iter().flat_map(|f| f.values()).cloned().fold(0.0, f64::max);
        let p_gun = ((peak - 0.6) / 0.4).clamp(0.0, 1.0);
        Ok(VideoPrediction {
            label: if p_gun >= 0.5 { Label::Gun } else { Label::NoGun },
            p_gun,
            p_no_gun: 1.0 - p_gun,
        })
    }
}

/// Boxes the bounding rectangle of bright pixels.
struct Threshold(f64);

impl FrameDetector for Threshold {
    fn detect(&self, frames: &[FrameTensor]) -> gunsight::Result<Vec<FrameDetections>> {
        Ok(frames
            .iter()
            .enumerate()
            .map(|(index, f)| {
                let mut hits = Vec::new();
                for y in 0..f.height() {
                    for x in 0..f.width() {
                        if f.get(y, x, 0) > self.0 {
                            hits.push((x as f64, y as f64));
                        }
                    }
                }
                let boxes = if hits.is_empty() {
                    Vec::new()
                } else {
                    let (x0, x1) = hits.iter().fold((f64::MAX, 0.0f64), |(a, b), h| (a.min(h.0), b.max(h.0)));
                    let (y0, y1) = hits.iter().fold((f64::MAX, 0.0f64), |(a, b), h| (a.min(h.1), b.max(h.1)));
                    vec![BoundingBox::new(x0, y0, x1 - x0 + 1.0, y1 - y0 + 1.0, 0.8)]
                };
                FrameDetections { index, boxes }
            })
            .collect())
    }
}

fn main() -> gunsight::Result<()> {
    let videos = video_set(20, 8, 32, 4);
    let gt = ground_truth_by_video(&videos);
    let two = run_two_stage(&videos, &Brightness, &Threshold(0.5))?;
    let only = run_detection_only(&videos, &Threshold(0.5))?;
    let cmp = compare_modes(&two, &only, gt.as_ref(), 0.5, Interpolation::AllPoint)?;

    let c = two.confusion.expect("two-stage reports confusion counts");
    println!("stage 1: TP {} FP {} FN {} TN {}", c.tp, c.fp, c.fn_, c.tn);
    println!(
        "detector frames: {} gated vs {} exhaustive (ratio {:.3})",
        two.detector_frame_invocations, only.detector_frame_invocations, cmp.invocation_ratio
    );
    let ap = |r: &Option<gunsight::metrics::ApResult>| r.as_ref().map(|a| a.ap);
    println!("AP two-stage {:?} vs detection-only {:?}", ap(&cmp.two_stage_ap), ap(&cmp.detection_only_ap));
    print!(
        "{}",
        summary_csv(&[
            SummaryRow::from_report("brightness+threshold", &two, ap(&cmp.two_stage_ap)),
            SummaryRow::from_report("detection-only", &only, ap(&cmp.detection_only_ap)),
        ])?
    );
    Ok(())
}
