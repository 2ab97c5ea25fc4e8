//! Confusion-derived classification metrics, ROC/AUC and IoU-matched average
//! precision. Positive class is Gun throughout.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, rank_order, BoundingBox};
use crate::dataset::Label;
use crate::detector::FrameDetections;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn new(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn record(&mut self, predicted: Label, truth: Label) {
        match (predicted, truth) {
            (Label::Gun, Label::Gun) => self.tp += 1,
            (Label::Gun, Label::NoGun) => self.fp += 1,
            (Label::NoGun, Label::Gun) => self.fn_ += 1,
            (Label::NoGun, Label::NoGun) => self.tn += 1,
        }
    }
}

pub fn confusion_counts(predicted: &[Label], truth: &[Label]) -> Result<ConfusionCounts> {
    if predicted.len() != truth.len() {
        return Err(Error::validation(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in predicted.iter().zip(truth) {
        c.record(p, t);
    }
    Ok(c)
}

/// `None` marks a metric whose denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn classification_metrics(c: &ConfusionCounts) -> Result<ClassificationMetrics> {
    if c.total() == 0 {
        return Err(Error::validation("confusion counts are all zero"));
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Ok(ClassificationMetrics {
        accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
        precision,
        recall,
        f1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
        }
        out
    }
}

/// Sweep every distinct score as a threshold (`score >= t` is positive),
/// equal scores forming one step; trapezoidal area.
pub fn roc_auc(scores: &[f64], labels: &[Label]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::validation(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::validation("scores must be finite"));
    }
    let pos = labels.iter().filter(|l| l.is_gun()).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::validation("ROC needs at least one positive and one negative label"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]].is_gun() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = points.last().unwrap();
        let fpr = fp as f64 / neg as f64;
        let tpr = tp as f64 / pos as f64;
        auc += (fpr - prev.fpr) * (tpr + prev.tpr) / 2.0;
        points.push(RocPoint { threshold: t, fpr, tpr });
    }
    Ok(RocCurve { points, auc })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    /// Area under the monotone precision envelope.
    #[default]
    AllPoint,
    /// Mean envelope precision at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApMatch {
    pub video: String,
    pub frame: usize,
    pub detection: usize,
    pub ground_truth: usize,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub confidence: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub ap: f64,
    pub iou_threshold: f64,
    pub interpolation: Interpolation,
    /// Detections of all frames and videos are pooled into one ranking.
    pub pooling: String,
    pub num_ground_truth: usize,
    pub num_excluded_ground_truth: usize,
    pub num_detections: usize,
    pub matches: Vec<ApMatch>,
    pub curve: Vec<PrPoint>,
}

/// Per video: one ground-truth box list per frame, indexed by frame position.
pub type GroundTruthByVideo = BTreeMap<String, Vec<Vec<BoundingBox>>>;
/// Per video: detector output per frame.
pub type DetectionsByVideo = BTreeMap<String, Vec<FrameDetections>>;

pub fn average_precision(
    detections: &DetectionsByVideo,
    ground_truth: &GroundTruthByVideo,
    iou_threshold: f64,
    excluded_videos: &BTreeSet<String>,
    interpolation: Interpolation,
) -> Result<ApResult> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(Error::validation(format!(
            "IoU threshold {iou_threshold} outside [0, 1]"
        )));
    }
    if let Some(v) = excluded_videos.iter().find(|v| !ground_truth.contains_key(*v)) {
        return Err(Error::validation(format!("excluded video {v} has no ground truth entry")));
    }
    if let Some(v) = detections.keys().find(|v| !ground_truth.contains_key(*v)) {
        return Err(Error::validation(format!("detections for unknown video {v}")));
    }
    let num_ground_truth: usize = ground_truth.values().flatten().map(Vec::len).sum();
    let num_excluded_ground_truth: usize = excluded_videos
        .iter()
        .map(|v| ground_truth[v].iter().map(Vec::len).sum::<usize>())
        .sum();
    if num_ground_truth == 0 {
        return Err(Error::validation("average precision needs at least one ground-truth box"));
    }

    struct Candidate<'a> {
        video: &'a str,
        frame: usize,
        detection: usize,
        bx: &'a BoundingBox,
    }
    let mut pool: Vec<Candidate> = Vec::new();
    for (video, frames) in detections {
        if excluded_videos.contains(video) {
            continue;
        }
        for fd in frames {
            for (d, bx) in fd.boxes.iter().enumerate() {
                pool.push(Candidate {
                    video,
                    frame: fd.index,
                    detection: d,
                    bx,
                });
            }
        }
    }
    pool.sort_by(|a, b| {
        b.bx.confidence
            .total_cmp(&a.bx.confidence)
            .then_with(|| a.video.cmp(b.video))
            .then(a.frame.cmp(&b.frame))
            .then_with(|| rank_order(a.bx, b.bx))
    });

    let mut used: BTreeSet<(&str, usize, usize)> = BTreeSet::new();
    let mut matches = Vec::new();
    let mut curve = Vec::with_capacity(pool.len());
    let mut tp = 0usize;
    for (k, c) in pool.iter().enumerate() {
        let gts = ground_truth[c.video]
            .get(c.frame)
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        let best = gts
            .iter()
            .enumerate()
            .filter(|(g, _)| !used.contains(&(c.video, c.frame, *g)))
            .map(|(g, gt)| (g, iou(c.bx, gt)))
            .fold(None::<(usize, f64)>, |acc, (g, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((g, v)),
            });
        if let Some((g, v)) = best.filter(|(_, v)| *v >= iou_threshold) {
            used.insert((c.video, c.frame, g));
            tp += 1;
            matches.push(ApMatch {
                video: c.video.to_string(),
                frame: c.frame,
                detection: c.detection,
                ground_truth: g,
                iou: v,
            });
        }
        curve.push(PrPoint {
            confidence: c.bx.confidence,
            precision: tp as f64 / (k + 1) as f64,
            recall: tp as f64 / num_ground_truth as f64,
        });
    }

    Ok(ApResult {
        ap: interpolate(&curve, interpolation),
        iou_threshold,
        interpolation,
        pooling: "frame-pooled".into(),
        num_ground_truth,
        num_excluded_ground_truth,
        num_detections: pool.len(),
        matches,
        curve,
    })
}

fn interpolate(curve: &[PrPoint], interpolation: Interpolation) -> f64 {
    // envelope[i] = max precision at or after position i
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    match interpolation {
        Interpolation::AllPoint => {
            let mut prev_recall = 0.0;
            let mut ap = 0.0;
            for (p, e) in curve.iter().zip(&envelope) {
                ap += (p.recall - prev_recall) * e;
                prev_recall = p.recall;
            }
            ap
        }
        Interpolation::ElevenPoint => {
            (0..=10)
                .map(|i| {
                    let r = i as f64 / 10.0;
                    curve
                        .iter()
                        .zip(&envelope)
                        .find(|(p, _)| p.recall >= r - 1e-12)
                        .map_or(0.0, |(_, e)| *e)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_examples() {
        use Label::*;
        assert_eq!(
            confusion_counts(&[Gun, NoGun], &[Gun, NoGun]).unwrap(),
            ConfusionCounts::new(1, 0, 0, 1)
        );
        assert_eq!(
            confusion_counts(&[Gun, Gun, Gun], &[Gun, Gun, NoGun]).unwrap(),
            ConfusionCounts::new(2, 1, 0, 0)
        );
        assert!(confusion_counts(&[Gun], &[]).is_err());
    }

    #[test]
    fn metric_examples() {
        let m = classification_metrics(&ConfusionCounts::new(48, 1, 6, 49)).unwrap();
        assert!((m.accuracy - 97.0 / 104.0).abs() < 1e-12);
        assert!((m.precision.unwrap() - 48.0 / 49.0).abs() < 1e-12);
        assert!((m.recall.unwrap() - 48.0 / 54.0).abs() < 1e-12);
        assert!((m.f1.unwrap() - 96.0 / 103.0).abs() < 1e-12);

        let m = classification_metrics(&ConfusionCounts::new(0, 0, 0, 10)).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.precision, None);
        assert_eq!(m.f1, None);

        assert!(classification_metrics(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn roc_examples() {
        use Label::*;
        let sep = roc_auc(&[0.9, 0.8, 0.2, 0.1], &[Gun, Gun, NoGun, NoGun]).unwrap();
        assert_eq!(sep.auc, 1.0);
        let inv = roc_auc(&[0.1, 0.2, 0.8, 0.9], &[Gun, Gun, NoGun, NoGun]).unwrap();
        assert_eq!(inv.auc, 0.0);
        let tie = roc_auc(&[0.9, 0.6, 0.6, 0.2], &[Gun, Gun, NoGun, NoGun]).unwrap();
        assert!((tie.auc - 0.875).abs() < 1e-12);
        let last = tie.points.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        assert!(roc_auc(&[0.5], &[Gun]).is_err());
    }

    fn one_frame(boxes: Vec<BoundingBox>) -> Vec<FrameDetections> {
        vec![FrameDetections { index: 0, boxes }]
    }

    #[test]
    fn ap_examples() {
        let gt_box = BoundingBox::new(0.0, 0.0, 10.0, 10.0, 1.0);
        let mut gt = GroundTruthByVideo::new();
        gt.insert("v".into(), vec![vec![gt_box]]);
        let none = BTreeSet::new();

        let mut det = DetectionsByVideo::new();
        det.insert("v".into(), one_frame(vec![BoundingBox::new(0.0, 0.0, 10.0, 9.0, 0.8)]));
        let r = average_precision(&det, &gt, 0.5, &none, Interpolation::AllPoint).unwrap();
        assert_eq!(r.ap, 1.0);

        det.insert("v".into(), one_frame(vec![BoundingBox::new(5.0, 5.0, 10.0, 10.0, 0.8)]));
        let r = average_precision(&det, &gt, 0.5, &none, Interpolation::AllPoint).unwrap();
        assert_eq!(r.ap, 0.0);

        let a = BoundingBox::new(0.0, 0.0, 10.0, 10.0, 1.0);
        let b = BoundingBox::new(50.0, 50.0, 10.0, 10.0, 1.0);
        gt.insert("v".into(), vec![vec![a, b]]);
        det.insert(
            "v".into(),
            one_frame(vec![
                BoundingBox { confidence: 0.9, ..a },
                BoundingBox::new(100.0, 0.0, 5.0, 5.0, 0.8),
                BoundingBox { confidence: 0.7, ..b },
            ]),
        );
        let r = average_precision(&det, &gt, 0.5, &none, Interpolation::AllPoint).unwrap();
        assert!((r.ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert!(average_precision(&det, &gt, -0.1, &none, Interpolation::AllPoint).is_err());
    }

    #[test]
    fn excluded_video_keeps_its_ground_truth_in_the_denominator() {
        let a = BoundingBox::new(0.0, 0.0, 10.0, 10.0, 0.9);
        let mut gt = GroundTruthByVideo::new();
        gt.insert("a".into(), vec![vec![a]]);
        gt.insert("b".into(), vec![vec![a]]);
        let mut det = DetectionsByVideo::new();
        det.insert("a".into(), one_frame(vec![a]));
        det.insert("b".into(), one_frame(vec![a]));
        let all = average_precision(&det, &gt, 0.5, &BTreeSet::new(), Interpolation::AllPoint).unwrap();
        let excl: BTreeSet<String> = ["b".to_string()].into();
        let cut = average_precision(&det, &gt, 0.5, &excl, Interpolation::AllPoint).unwrap();
        assert_eq!(all.ap, 1.0);
        assert_eq!(cut.ap, 0.5);
        assert_eq!(cut.num_excluded_ground_truth, 1);
    }

    #[test]
    fn eleven_point_on_perfect_detector() {
        let a = BoundingBox::new(0.0, 0.0, 10.0, 10.0, 0.9);
        let mut gt = GroundTruthByVideo::new();
        gt.insert("a".into(), vec![vec![a]]);
        let mut det = DetectionsByVideo::new();
        det.insert("a".into(), one_frame(vec![a]));
        let r = average_precision(&det, &gt, 0.5, &BTreeSet::new(), Interpolation::ElevenPoint).unwrap();
        assert!((r.ap - 1.0).abs() < 1e-12);
    }
}
