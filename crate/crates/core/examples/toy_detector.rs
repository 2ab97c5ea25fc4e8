//! Train the anchor-free grid detector on bright squares and report recall
//! at IoU 0.5 on held-out images.
//!
//! cargo run --release -p gunsight --example toy_detector

use gunsight::boxes::{iou, BoundingBox};
use gunsight::detector::{finetune_detector, DetectionSet, DetectorConfig, DetectorState};
use gunsight::synth::image_set;
use gunsight::train::TrainConfig;

fn main() -> gunsight::Result<()> {
    let data = image_set(160, 32, 8);
    let set = |range: std::ops::Range<usize>| {
        let (images, labels) = data[range].iter().map(|(f, _, b)| (f.clone(), b.clone())).unzip();
        DetectionSet::new(images, labels)
    };
    let (train, val, test) = (set(0..110)?, set(110..130)?, set(130..160)?);

    let grid = DetectorConfig { input_size: 64, ..DetectorConfig::default() };
    let init = DetectorState::small(grid, 3, &[8, 16, 16, 16, 16], 3)?;
    let cfg = TrainConfig { epochs: 30, learning_rate: 3e-3, early_stop_patience: 8, ..TrainConfig::default() };
    let fit = finetune_detector(&init, &train, &val, &cfg)?;
    println!("best epoch {} val loss {:.4}", fit.history.best_epoch, fit.history.best_val_loss);

    let found = fit.state.detect_frames(&test.images)?;
    let (mut hit, mut total) = (0, 0);
    for ((img, truth), dets) in test.images.iter().zip(&test.labels).zip(&found) {
        for t in truth {
            let (x, y, w, h) = t.to_pixels(img.width(), img.height());
            let t = BoundingBox::new(x, y, w, h, 1.0);
            total += 1;
            if dets.boxes.iter().any(|d| iou(d, &t) >= 0.5) {
                hit += 1;
            }
        }
    }
    println!("recall@0.5 {hit}/{total}");
    Ok(())
}
