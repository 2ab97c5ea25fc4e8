mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::*;
use gunsight::dataset::Label;
use gunsight::metrics::Interpolation;
use gunsight::pipeline::{
    compare_modes, ground_truth_by_video, records_by_video, run_detection_only, run_two_stage,
    summary_csv, ConstantClassifier, PipelineMode, SummaryRow,
};
use proptest::prelude::*;

fn table(videos: &[gunsight::dataset::VideoSample], predicted: &[bool]) -> TableClassifier {
    TableClassifier(
        videos
            .iter()
            .zip(predicted)
            .map(|(v, &p)| (v.id.clone(), if p { Label::Gun } else { Label::NoGun }))
            .collect(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn invocations_follow_the_routing_rule(
        gun in 0usize..6,
        no_gun in 0usize..6,
        frames in 1usize..5,
        seed in any::<u64>(),
        flips in prop::collection::vec(any::<bool>(), 12),
    ) {
        prop_assume!(gun + no_gun > 0);
        let videos = labeled_videos(gun, no_gun, frames, 12, seed);
        let predicted: Vec<bool> = videos.iter().zip(&flips).map(|(v, f)| v.label.is_gun() ^ f).collect();
        let det = FixedDetector::new(&videos, controlled_detections(seed));
        let two = run_two_stage(&videos, &table(&videos, &predicted), &det).unwrap();
        let only = run_detection_only(&videos, &det).unwrap();
        let c = two.confusion.unwrap();

        prop_assert_eq!(two.detector_frame_invocations, (c.tp + c.fp) * frames);
        prop_assert_eq!(only.detector_frame_invocations, videos.len() * frames);
        if c.tn + c.fn_ > 0 {
            prop_assert!(two.detector_frame_invocations < only.detector_frame_invocations);
        } else {
            prop_assert_eq!(two.detector_frame_invocations, only.detector_frame_invocations);
        }
        prop_assert_eq!(c.tp + c.fn_, gun);
        prop_assert_eq!(c.tn + c.fp, no_gun);
        // detections only where routed
        for r in &two.records {
            prop_assert!(r.routed_to_detector || r.detections.is_empty());
            prop_assert_eq!(r.routed_to_detector, r.predicted_label == Some(Label::Gun));
        }
    }

    #[test]
    fn constant_gun_classifier_reproduces_detection_only(gun in 0usize..4, no_gun in 1usize..4, seed in any::<u64>()) {
        let videos = labeled_videos(gun, no_gun, 3, 12, seed);
        let det = FixedDetector::new(&videos, controlled_detections(seed));
        let two = run_two_stage(&videos, &ConstantClassifier::always(Label::Gun), &det).unwrap();
        let only = run_detection_only(&videos, &det).unwrap();
        prop_assert_eq!(two.detections_by_video(), only.detections_by_video());
        let cmp = compare_modes(&two, &only, None, 0.5, Interpolation::AllPoint).unwrap();
        prop_assert_eq!(cmp.invocation_ratio, 1.0);
    }

    #[test]
    fn report_is_independent_of_video_order(seed in any::<u64>()) {
        let mut videos = labeled_videos(3, 3, 2, 12, seed);
        let predicted = [true, false, true, true, false, false];
        let cls = table(&videos, &predicted);
        let det = FixedDetector::new(&videos, controlled_detections(seed));
        let a = run_two_stage(&videos, &cls, &det).unwrap();
        videos.reverse();
        let b = run_two_stage(&videos, &cls, &det).unwrap();
        prop_assert_eq!(a.confusion, b.confusion);
        prop_assert_eq!(a.detector_frame_invocations, b.detector_frame_invocations);
        let (ra, rb) = (records_by_video(&a), records_by_video(&b));
        prop_assert_eq!(ra.len(), rb.len());
        for (id, r) in ra {
            prop_assert_eq!(&r.detections, &rb[id].detections);
        }
    }
}

#[test]
fn resnet_gru_counts_give_the_reported_ratio() {
    let videos = labeled_videos(54, 50, 2, 12, 5);
    let cls = TableClassifier(videos.iter().map(|v| (v.id.clone(), v.label)).collect());
    let det = FixedDetector::new(&videos, |_, _| Vec::new());
    let two = run_two_stage(&videos, &cls, &det).unwrap();
    let only = run_detection_only(&videos, &det).unwrap();
    let cmp = compare_modes(&two, &only, None, 0.5, Interpolation::AllPoint).unwrap();
    assert_eq!(cmp.invocation_ratio, 54.0 / 104.0);
    assert!((cmp.invocation_ratio - 0.519).abs() < 5e-4);
}

#[test]
fn stage1_false_negatives_stay_in_the_ap_denominator() {
    let videos = labeled_videos(10, 6, 4, 24, 9);
    let gt = ground_truth_by_video(&videos).unwrap();
    let det = FixedDetector::new(&videos, controlled_detections(3));
    let mut aps = Vec::new();
    for k in 0..=6 {
        let mut routes: BTreeMap<String, Label> = videos.iter().map(|v| (v.id.clone(), v.label)).collect();
        for v in videos.iter().filter(|v| v.label.is_gun()).take(k) {
            routes.insert(v.id.clone(), Label::NoGun);
        }
        let two = run_two_stage(&videos, &TableClassifier(routes), &det).unwrap();
        let only = run_detection_only(&videos, &det).unwrap();
        let cmp = compare_modes(&two, &only, Some(&gt), 0.5, Interpolation::AllPoint).unwrap();
        let ap = cmp.two_stage_ap.unwrap();
        assert_eq!(ap.num_ground_truth, 40, "excluded boxes stay counted");
        assert_eq!(cmp.false_negative_videos.len(), k);
        assert_eq!(cmp.missed_ground_truth_boxes, 4 * k);
        aps.push(ap.ap);
    }
    assert!(aps.windows(2).all(|w| w[1] <= w[0]), "{aps:?}");
    assert!(aps[0] > aps[6]);
}

#[test]
fn mismatched_video_sets_are_rejected() {
    let videos = labeled_videos(2, 2, 2, 12, 1);
    let det = FixedDetector::new(&videos, |_, _| Vec::new());
    let two = run_two_stage(&videos, &ConstantClassifier::always(Label::Gun), &det).unwrap();
    let only = run_detection_only(&videos[1..], &det).unwrap();
    assert!(compare_modes(&two, &only, None, 0.5, Interpolation::AllPoint).is_err());
    assert_eq!(two.mode, PipelineMode::TwoStage);
}

#[test]
fn empty_video_set_gives_an_empty_report() {
    let det = FixedDetector::new(&[], |_, _| Vec::new());
    let r = run_detection_only(&[], &det).unwrap();
    assert!(r.records.is_empty());
    assert_eq!(r.detector_frame_invocations, 0);
}

#[test]
fn summary_rows_use_the_documented_header() {
    let videos = labeled_videos(1, 1, 2, 12, 1);
    let det = FixedDetector::new(&videos, |_, _| Vec::new());
    let two = run_two_stage(&videos, &ConstantClassifier::always(Label::Gun), &det).unwrap();
    let csv = summary_csv(&[SummaryRow::from_report("x", &two, None)]).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "configuration,TP,FP,FN,TN,AP,detector_frame_invocations,time_s,model_size_bytes"
    );
    let ids: BTreeSet<_> = two.records.iter().map(|r| r.video_id.clone()).collect();
    assert_eq!(ids.len(), 2);
}
