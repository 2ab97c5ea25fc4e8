//! Frame-pooled AP, and what happens to it when stage 1 rejects Gun videos:
//! their boxes stay in the denominator while their detections disappear.
//!
//! cargo run -p gunsight --example average_precision

use std::collections::{BTreeMap, BTreeSet};

use gunsight::boxes::BoundingBox;
use gunsight::detector::FrameDetections;
use gunsight::metrics::{average_precision, DetectionsByVideo, GroundTruthByVideo, Interpolation};

fn main() -> gunsight::Result<()> {
    let mut gt: GroundTruthByVideo = BTreeMap::new();
    let mut dets: DetectionsByVideo = BTreeMap::new();
    for v in 0..4 {
        let id = format!("gun_{v}");
        let truth = BoundingBox::new(8.0 + v as f64, 8.0, 10.0, 10.0, 1.0);
        gt.insert(id.clone(), vec![vec![truth]; 2]);
        let hit = BoundingBox::new(truth.x + 1.0, truth.y, 10.0, 10.0, 0.9 - 0.1 * v as f64);
        dets.insert(id, (0..2).map(|index| FrameDetections { index, boxes: vec![hit] }).collect());
    }
    // a confident false positive on a NoGun video
    gt.insert("nogun_0".into(), vec![Vec::new(); 2]);
    dets.insert(
        "nogun_0".into(),
        vec![
            FrameDetections { index: 0, boxes: vec![BoundingBox::new(0.0, 0.0, 5.0, 5.0, 0.95)] },
            FrameDetections { index: 1, boxes: Vec::new() },
        ],
    );

    for k in 0..=3 {
        let excluded: BTreeSet<String> = (0..k).map(|v| format!("gun_{v}")).collect();
        let r = average_precision(&dets, &gt, 0.5, &excluded, Interpolation::AllPoint)?;
        println!(
            "{k} stage-1 misses: AP {:.4} ({} boxes, {} unreachable, {} detections ranked)",
            r.ap, r.num_ground_truth, r.num_excluded_ground_truth, r.num_detections
        );
    }
    let eleven = average_precision(&dets, &gt, 0.5, &BTreeSet::new(), Interpolation::ElevenPoint)?;
    println!("11-point AP with no misses: {:.4}", eleven.ap);
    Ok(())
}
