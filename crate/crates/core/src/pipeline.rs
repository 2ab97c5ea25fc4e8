//! Classification-oriented routing: classify every video, run the detector
//! only on the ones predicted Gun, and account confusion, detector work and
//! time. The detection-only baseline runs the detector everywhere.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxes::BoundingBox;
use crate::classifier::{ClassifierModel, VideoPrediction};
use crate::dataset::{Label, VideoSample};
use crate::detector::{DetectorState, FrameDetections};
use crate::error::{Error, Result};
use crate::frame::FrameTensor;
use crate::metrics::{
    average_precision, ApResult, ConfusionCounts, DetectionsByVideo, GroundTruthByVideo,
    Interpolation,
};

/// Stage-1 contract.
pub trait VideoClassifier: Sync {
    fn classify(&self, sample: &VideoSample) -> Result<VideoPrediction>;

    /// Configuration error when frames of this shape cannot be consumed.
    fn check_frame(&self, _frame: &FrameTensor) -> Result<()> {
        Ok(())
    }

    fn size_bytes(&self) -> Option<usize> {
        None
    }
}

/// Stage-2 contract.
pub trait FrameDetector: Sync {
    fn detect(&self, frames: &[FrameTensor]) -> Result<Vec<FrameDetections>>;

    fn check_frame(&self, _frame: &FrameTensor) -> Result<()> {
        Ok(())
    }

    fn size_bytes(&self) -> Option<usize> {
        None
    }
}

impl VideoClassifier for ClassifierModel {
    fn classify(&self, sample: &VideoSample) -> Result<VideoPrediction> {
        self.classify_video(sample)
    }

    fn check_frame(&self, frame: &FrameTensor) -> Result<()> {
        self.backbone
            .check_frames(&[frame])
            .map_err(|e| Error::Config(format!("classifier cannot consume the videos: {e}")))
    }

    fn size_bytes(&self) -> Option<usize> {
        Some((self.backbone.params().numel() + self.head.params().numel()) * 8)
    }
}

impl FrameDetector for DetectorState {
    fn detect(&self, frames: &[FrameTensor]) -> Result<Vec<FrameDetections>> {
        self.detect_frames(frames)
    }

    fn check_frame(&self, frame: &FrameTensor) -> Result<()> {
        if frame.channels() != self.in_channels() {
            return Err(Error::Config(format!(
                "detector expects {}-channel frames, videos have {}",
                self.in_channels(),
                frame.channels()
            )));
        }
        Ok(())
    }

    fn size_bytes(&self) -> Option<usize> {
        Some(DetectorState::size_bytes(self))
    }
}

/// Classifier returning the same answer for every video.
#[derive(Clone, Copy, Debug)]
pub struct ConstantClassifier {
    pub p_gun: f64,
    pub threshold: f64,
}

impl ConstantClassifier {
    pub fn always(label: Label) -> Self {
        Self {
            p_gun: if label.is_gun() { 1.0 } else { 0.0 },
            threshold: 0.5,
        }
    }
}

impl VideoClassifier for ConstantClassifier {
    fn classify(&self, _sample: &VideoSample) -> Result<VideoPrediction> {
        Ok(VideoPrediction {
            label: crate::classifier::decide(self.p_gun, self.threshold),
            p_gun: self.p_gun,
            p_no_gun: 1.0 - self.p_gun,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineMode {
    TwoStage,
    DetectionOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub video_id: String,
    pub true_label: Label,
    /// Absent in detection-only mode.
    pub predicted_label: Option<Label>,
    pub p_gun: Option<f64>,
    pub routed_to_detector: bool,
    pub detections: Vec<FrameDetections>,
    pub frames_detected_on: usize,
    pub stage1_time_s: f64,
    pub stage2_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub mode: PipelineMode,
    pub records: Vec<RoutingRecord>,
    /// Video-level counts, absent in detection-only mode.
    pub confusion: Option<ConfusionCounts>,
    pub detector_frame_invocations: usize,
    /// Sum of per-video inference intervals.
    pub total_time_s: f64,
    /// Wall clock of the whole (possibly parallel) batch.
    pub batch_wall_clock_s: f64,
    pub model_size_bytes: Option<usize>,
    /// Only inference is timed.
    pub timing: String,
}

impl PipelineReport {
    /// Copy with every wall-clock field zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> PipelineReport {
        let mut r = self.clone();
        r.total_time_s = 0.0;
        r.batch_wall_clock_s = 0.0;
        for rec in &mut r.records {
            rec.stage1_time_s = 0.0;
            rec.stage2_time_s = 0.0;
        }
        r
    }

    pub fn detections_by_video(&self) -> DetectionsByVideo {
        self.records
            .iter()
            .map(|r| (r.video_id.clone(), r.detections.clone()))
            .collect()
    }

    /// True-Gun videos the router sent away.
    pub fn false_negative_videos(&self) -> Vec<String> {
        self.records
            .iter()
            .filter(|r| r.true_label.is_gun() && r.predicted_label == Some(Label::NoGun))
            .map(|r| r.video_id.clone())
            .collect()
    }

    fn video_ids(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.video_id.as_str()).collect()
    }
}

fn check_inputs(videos: &[VideoSample], checks: &[&dyn Fn(&FrameTensor) -> Result<()>]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for v in videos {
        v.validate()?;
        if !seen.insert(v.id.as_str()) {
            return Err(Error::validation(format!("duplicate video id {}", v.id)));
        }
    }
    if let Some(first) = videos.first() {
        for check in checks {
            check(&first.frames[0])?;
        }
    }
    Ok(())
}

fn detect_video(detector: &impl FrameDetector, v: &VideoSample) -> Result<(Vec<FrameDetections>, f64)> {
    let t = Instant::now();
    let dets = detector.detect(&v.frames)?;
    Ok((dets, t.elapsed().as_secs_f64()))
}

fn assemble(
    mode: PipelineMode,
    records: Vec<RoutingRecord>,
    wall: f64,
    model_size_bytes: Option<usize>,
) -> PipelineReport {
    let confusion = (mode == PipelineMode::TwoStage).then(|| {
        let mut c = ConfusionCounts::default();
        for r in &records {
            c.record(r.predicted_label.unwrap_or(Label::NoGun), r.true_label);
        }
        c
    });
    PipelineReport {
        mode,
        confusion,
        detector_frame_invocations: records.iter().map(|r| r.frames_detected_on).sum(),
        total_time_s: records.iter().map(|r| r.stage1_time_s + r.stage2_time_s).sum(),
        batch_wall_clock_s: wall,
        model_size_bytes,
        timing: "inference-only".into(),
        records,
    }
}

pub fn run_two_stage(
    videos: &[VideoSample],
    classifier: &impl VideoClassifier,
    detector: &impl FrameDetector,
) -> Result<PipelineReport> {
    check_inputs(videos, &[&|f| classifier.check_frame(f), &|f| detector.check_frame(f)])?;
    let start = Instant::now();
    let records = videos
        .par_iter()
        .map(|v| {
            let t = Instant::now();
            let pred = classifier.classify(v)?;
            let stage1 = t.elapsed().as_secs_f64();
            let routed = pred.label.is_gun();
            let (detections, stage2) = if routed {
                detect_video(detector, v)?
            } else {
                (Vec::new(), 0.0)
            };
            Ok(RoutingRecord {
                video_id: v.id.clone(),
                true_label: v.label,
                predicted_label: Some(pred.label),
                p_gun: Some(pred.p_gun),
                routed_to_detector: routed,
                frames_detected_on: if routed { v.len() } else { 0 },
                detections,
                stage1_time_s: stage1,
                stage2_time_s: stage2,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let size = match (classifier.size_bytes(), detector.size_bytes()) {
        (Some(a), Some(b)) => Some(a + b),
        _ => None,
    };
    Ok(assemble(
        PipelineMode::TwoStage,
        records,
        start.elapsed().as_secs_f64(),
        size,
    ))
}

pub fn run_detection_only(videos: &[VideoSample], detector: &impl FrameDetector) -> Result<PipelineReport> {
    check_inputs(videos, &[&|f| detector.check_frame(f)])?;
    let start = Instant::now();
    let records = videos
        .par_iter()
        .map(|v| {
            let (detections, stage2) = detect_video(detector, v)?;
            Ok(RoutingRecord {
                video_id: v.id.clone(),
                true_label: v.label,
                predicted_label: None,
                p_gun: None,
                routed_to_detector: true,
                frames_detected_on: v.len(),
                detections,
                stage1_time_s: 0.0,
                stage2_time_s: stage2,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(
        PipelineMode::DetectionOnly,
        records,
        start.elapsed().as_secs_f64(),
        detector.size_bytes(),
    ))
}

/// Pixel ground truth of every video, one box list per sampled frame.
/// Videos without boxes contribute empty lists; `None` when no video has any.
pub fn ground_truth_by_video(videos: &[VideoSample]) -> Option<GroundTruthByVideo> {
    if videos.iter().all(|v| v.boxes.is_none()) {
        return None;
    }
    Some(
        videos
            .iter()
            .map(|v| {
                let frames = match &v.boxes {
                    Some(per_frame) => per_frame
                        .iter()
                        .zip(&v.frames)
                        .map(|(boxes, f)| {
                            boxes
                                .iter()
                                .map(|b| {
                                    let (x, y, w, h) = b.to_pixels(f.width(), f.height());
                                    BoundingBox::new(x, y, w, h, 1.0)
                                })
                                .collect()
                        })
                        .collect(),
                    None => vec![Vec::new(); v.len()],
                };
                (v.id.clone(), frames)
            })
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub two_stage_invocations: usize,
    pub detection_only_invocations: usize,
    pub invocation_ratio: f64,
    pub time_ratio: Option<f64>,
    pub two_stage_ap: Option<ApResult>,
    pub detection_only_ap: Option<ApResult>,
    /// Two-stage AP minus detection-only AP.
    pub ap_delta: Option<f64>,
    /// Stage-1 false negatives whose ground truth can no longer be matched.
    pub false_negative_videos: Vec<String>,
    pub missed_ground_truth_boxes: usize,
}

pub fn compare_modes(
    two_stage: &PipelineReport,
    detection_only: &PipelineReport,
    ground_truth: Option<&GroundTruthByVideo>,
    iou_threshold: f64,
    interpolation: Interpolation,
) -> Result<ComparisonReport> {
    if two_stage.mode != PipelineMode::TwoStage || detection_only.mode != PipelineMode::DetectionOnly {
        return Err(Error::validation("compare_modes needs a two-stage and a detection-only report"));
    }
    if two_stage.video_ids() != detection_only.video_ids() {
        return Err(Error::validation("reports cover different video sets"));
    }
    let fn_videos = two_stage.false_negative_videos();
    let excluded: BTreeSet<String> = fn_videos.iter().cloned().collect();
    let (two_ap, det_ap) = match ground_truth {
        Some(gt) => (
            Some(average_precision(
                &two_stage.detections_by_video(),
                gt,
                iou_threshold,
                &excluded,
                interpolation,
            )?),
            Some(average_precision(
                &detection_only.detections_by_video(),
                gt,
                iou_threshold,
                &BTreeSet::new(),
                interpolation,
            )?),
        ),
        None => (None, None),
    };
    let missed = ground_truth.map_or(0, |gt| {
        fn_videos
            .iter()
            .filter_map(|v| gt.get(v))
            .map(|frames| frames.iter().map(Vec::len).sum::<usize>())
            .sum()
    });
    let ratio = if detection_only.detector_frame_invocations == 0 {
        1.0
    } else {
        two_stage.detector_frame_invocations as f64 / detection_only.detector_frame_invocations as f64
    };
    Ok(ComparisonReport {
        two_stage_invocations: two_stage.detector_frame_invocations,
        detection_only_invocations: detection_only.detector_frame_invocations,
        invocation_ratio: ratio,
        time_ratio: (detection_only.total_time_s > 0.0)
            .then(|| two_stage.total_time_s / detection_only.total_time_s),
        ap_delta: match (&two_ap, &det_ap) {
            (Some(a), Some(b)) => Some(a.ap - b.ap),
            _ => None,
        },
        two_stage_ap: two_ap,
        detection_only_ap: det_ap,
        false_negative_videos: fn_videos,
        missed_ground_truth_boxes: missed,
    })
}

/// One configuration's summary line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub configuration: String,
    #[serde(rename = "TP")]
    pub tp: Option<usize>,
    #[serde(rename = "FP")]
    pub fp: Option<usize>,
    #[serde(rename = "FN")]
    pub fn_: Option<usize>,
    #[serde(rename = "TN")]
    pub tn: Option<usize>,
    #[serde(rename = "AP")]
    pub ap: Option<f64>,
    pub detector_frame_invocations: usize,
    pub time_s: f64,
    pub model_size_bytes: Option<usize>,
}

impl SummaryRow {
    pub fn from_report(configuration: impl Into<String>, report: &PipelineReport, ap: Option<f64>) -> Self {
        let c = report.confusion;
        Self {
            configuration: configuration.into(),
            tp: c.map(|c| c.tp),
            fp: c.map(|c| c.fp),
            fn_: c.map(|c| c.fn_),
            tn: c.map(|c| c.tn),
            ap,
            detector_frame_invocations: report.detector_frame_invocations,
            time_s: report.total_time_s,
            model_size_bytes: report.model_size_bytes,
        }
    }
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::validation(format!("csv: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::validation(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Per-video order-independent view used to compare reports.
pub fn records_by_video(report: &PipelineReport) -> BTreeMap<&str, &RoutingRecord> {
    report.records.iter().map(|r| (r.video_id.as_str(), r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Detector that reports one box per frame.
    struct Stub;

    impl FrameDetector for Stub {
        fn detect(&self, frames: &[FrameTensor]) -> Result<Vec<FrameDetections>> {
            Ok((0..frames.len())
                .map(|index| FrameDetections {
                    index,
                    boxes: vec![BoundingBox::new(1.0, 1.0, 2.0, 2.0, 0.9)],
                })
                .collect())
        }
    }

    struct ByName;

    impl VideoClassifier for ByName {
        fn classify(&self, sample: &VideoSample) -> Result<VideoPrediction> {
            let gun = sample.id.starts_with('g');
            Ok(VideoPrediction {
                label: if gun { Label::Gun } else { Label::NoGun },
                p_gun: if gun { 0.9 } else { 0.1 },
                p_no_gun: if gun { 0.1 } else { 0.9 },
            })
        }
    }

    fn video(id: &str, label: Label, t: usize) -> VideoSample {
        VideoSample::new(id, label, vec![FrameTensor::filled(4, 4, 3, 0.5); t]).unwrap()
    }

    #[test]
    fn routing_rule() {
        let vids = vec![video("g1", Label::Gun, 3), video("n1", Label::Gun, 3)];
        let r = run_two_stage(&vids, &ByName, &Stub).unwrap();
        assert_eq!(r.detector_frame_invocations, 3);
        assert!(r.records[0].routed_to_detector);
        assert!(r.records[1].detections.is_empty());
        assert_eq!(r.confusion.unwrap(), ConfusionCounts::new(1, 0, 1, 0));
        assert_eq!(r.false_negative_videos(), vec!["n1".to_string()]);
    }

    #[test]
    fn detection_only_counts_every_frame() {
        let vids = vec![video("a", Label::Gun, 4), video("b", Label::NoGun, 4)];
        let r = run_detection_only(&vids, &Stub).unwrap();
        assert_eq!(r.detector_frame_invocations, 8);
        assert!(r.confusion.is_none());
        let empty = run_detection_only(&[], &Stub).unwrap();
        assert!(empty.records.is_empty());
        assert_eq!(empty.detector_frame_invocations, 0);
    }

    #[test]
    fn always_gun_router_matches_detection_only() {
        let vids = vec![video("a", Label::Gun, 2), video("b", Label::NoGun, 5)];
        let two = run_two_stage(&vids, &ConstantClassifier::always(Label::Gun), &Stub).unwrap();
        let det = run_detection_only(&vids, &Stub).unwrap();
        assert_eq!(two.detections_by_video(), det.detections_by_video());
        let cmp = compare_modes(&two, &det, None, 0.5, Interpolation::AllPoint).unwrap();
        assert_eq!(cmp.invocation_ratio, 1.0);
    }

    #[test]
    fn mismatched_video_sets_rejected() {
        let two = run_two_stage(&[video("a", Label::Gun, 2)], &ByName, &Stub).unwrap();
        let det = run_detection_only(&[video("b", Label::Gun, 2)], &Stub).unwrap();
        assert!(compare_modes(&two, &det, None, 0.5, Interpolation::AllPoint).is_err());
    }

    #[test]
    fn summary_csv_columns() {
        let vids = vec![video("g", Label::Gun, 2)];
        let r = run_two_stage(&vids, &ByName, &Stub).unwrap();
        let csv = summary_csv(&[SummaryRow::from_report("x", &r, Some(0.5))]).unwrap();
        assert!(csv.starts_with(
            "configuration,TP,FP,FN,TN,AP,detector_frame_invocations,time_s,model_size_bytes\n"
        ));
    }

    #[test]
    fn incompatible_detector_is_config_error() {
        let det = DetectorState::small(
            crate::detector::DetectorConfig {
                input_size: 16,
                strides: vec![4],
                ..Default::default()
            },
            1,
            &[2, 2],
            0,
        )
        .unwrap();
        let vids = vec![video("g", Label::Gun, 2)];
        assert!(matches!(run_two_stage(&vids, &ByName, &det), Err(Error::Config(_))));
    }
}
