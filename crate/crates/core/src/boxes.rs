//! Pixel bounding boxes, IoU and greedy non-maximum suppression.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Top-left anchored pixel rectangle with a confidence and class flag.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    #[serde(rename = "conf")]
    pub confidence: f64,
    #[serde(rename = "class")]
    pub class_id: u8,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64, confidence: f64) -> Self {
        Self {
            x,
            y,
            w,
            h,
            confidence,
            class_id: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.h > 0.0) {
            return Err(Error::validation(format!(
                "box width and height must be positive, got {}x{}",
                self.w, self.h
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::validation(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        if self.class_id > 1 {
            return Err(Error::validation(format!("class flag {} is not 0 or 1", self.class_id)));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// Intersection with the `width x height` frame; `None` when nothing is left.
    pub fn clamped(&self, width: f64, height: f64) -> Option<BoundingBox> {
        let x1 = self.x.clamp(0.0, width);
        let y1 = self.y.clamp(0.0, height);
        let x2 = (self.x + self.w).clamp(0.0, width);
        let y2 = (self.y + self.h).clamp(0.0, height);
        (x2 > x1 && y2 > y1).then_some(BoundingBox {
            x: x1,
            y: y1,
            w: x2 - x1,
            h: y2 - y1,
            ..*self
        })
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let ih = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Confidence descending, then `x` ascending, then `y` ascending.
pub fn rank_order(a: &BoundingBox, b: &BoundingBox) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.x.total_cmp(&b.x))
        .then(a.y.total_cmp(&b.y))
}

/// Greedy suppression: keep the best remaining box, drop every remaining box
/// of the same class whose IoU with it exceeds `iou_threshold`, repeat.
pub fn nms(boxes: &[BoundingBox], iou_threshold: f64) -> Vec<BoundingBox> {
    let mut sorted = boxes.to_vec();
    sorted.sort_by(rank_order);
    let mut kept: Vec<BoundingBox> = Vec::new();
    for b in sorted {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == b.class_id && iou(k, &b) > iou_threshold);
        if !suppressed {
            kept.push(b);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x: f64, y: f64, w: f64, h: f64, c: f64) -> BoundingBox {
        BoundingBox::new(x, y, w, h, c)
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 2.0, 2.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(5.0, 5.0, 1.0, 1.0, 1.0)), 0.0);
        // touching edges do not overlap
        assert_eq!(iou(&a, &bx(2.0, 0.0, 2.0, 2.0, 1.0)), 0.0);
        assert!((iou(&a, &bx(1.0, 0.0, 2.0, 2.0, 1.0)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn nms_examples() {
        let single = [bx(0.0, 0.0, 4.0, 4.0, 0.5)];
        assert_eq!(nms(&single, 0.45), single.to_vec());

        let disjoint = [bx(0.0, 0.0, 2.0, 2.0, 0.3), bx(10.0, 0.0, 2.0, 2.0, 0.9)];
        let kept = nms(&disjoint, 0.45);
        assert_eq!(kept, vec![disjoint[1], disjoint[0]]);

        // IoU exactly 0.5 > 0.45
        let a = bx(0.0, 0.0, 3.0, 2.0, 0.9);
        let b = bx(1.0, 0.0, 3.0, 2.0, 0.8);
        assert!((iou(&a, &b) - 0.5).abs() < 1e-12);
        assert_eq!(nms(&[b, a], 0.45), vec![a]);
    }

    #[test]
    fn nms_is_class_aware() {
        let a = bx(0.0, 0.0, 2.0, 2.0, 0.9);
        let b = BoundingBox { class_id: 1, ..a };
        assert_eq!(nms(&[a, b], 0.45).len(), 2);
    }

    #[test]
    fn tie_break_is_deterministic() {
        let a = bx(3.0, 0.0, 2.0, 2.0, 0.5);
        let b = bx(1.0, 5.0, 2.0, 2.0, 0.5);
        let c = bx(1.0, 1.0, 2.0, 2.0, 0.5);
        assert_eq!(nms(&[a, b, c], 0.45), vec![c, b, a]);
    }

    #[test]
    fn clamping() {
        let b = bx(-2.0, 3.0, 5.0, 10.0, 0.5);
        let c = b.clamped(10.0, 8.0).unwrap();
        assert_eq!((c.x, c.y, c.w, c.h), (0.0, 3.0, 3.0, 5.0));
        assert!(bx(20.0, 0.0, 2.0, 2.0, 0.5).clamped(10.0, 10.0).is_none());
    }
}
