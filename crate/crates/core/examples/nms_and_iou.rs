//! Class-aware greedy NMS over a handful of overlapping boxes.
//!
//! cargo run -p gunsight --example nms_and_iou

use gunsight::boxes::{iou, nms, BoundingBox};

fn main() {
    let mut boxes = vec![
        BoundingBox::new(10.0, 10.0, 20.0, 20.0, 0.9),
        BoundingBox::new(12.0, 11.0, 20.0, 20.0, 0.8),
        BoundingBox::new(40.0, 40.0, 10.0, 10.0, 0.7),
        BoundingBox::new(11.0, 10.0, 20.0, 20.0, 0.6),
    ];
    // same place, other class: never suppressed by the gun boxes
    boxes[3].class_id = 1;

    println!("iou(0, 1) = {:.3}", iou(&boxes[0], &boxes[1]));
    for thr in [0.3, 0.5, 0.9] {
        let kept = nms(&boxes, thr);
        println!("threshold {thr}: kept {} boxes", kept.len());
        for b in kept {
            println!("  class {} conf {:.2} at ({}, {}) {}x{}", b.class_id, b.confidence, b.x, b.y, b.w, b.h);
        }
    }
}
