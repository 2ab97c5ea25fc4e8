//! Raster output: ROC plots and frames annotated with detection boxes.

use crate::boxes::BoundingBox;
use crate::frame::FrameTensor;
use crate::metrics::RocCurve;

pub type Color = [f64; 3];

pub const DETECTION: Color = [1.0, 0.1, 0.1];
pub const GROUND_TRUTH: Color = [0.1, 1.0, 0.2];
const AXIS: Color = [0.0, 0.0, 0.0];
const CHANCE: Color = [0.7, 0.7, 0.7];
const CURVE: Color = [0.1, 0.2, 0.9];

fn to_rgb(frame: &FrameTensor) -> FrameTensor {
    if frame.channels() == 3 {
        return frame.clone();
    }
    FrameTensor::from_fn(frame.height(), frame.width(), 3, |y, x, _| frame.get(y, x, 0))
}

fn put(frame: &mut FrameTensor, x: i64, y: i64, color: Color) {
    if x < 0 || y < 0 || x >= frame.width() as i64 || y >= frame.height() as i64 {
        return;
    }
    for (c, v) in color.iter().enumerate() {
        frame.set(y as usize, x as usize, c, *v);
    }
}

/// Bresenham segment, clipped to the frame.
pub fn draw_line(frame: &mut FrameTensor, from: (i64, i64), to: (i64, i64), color: Color) {
    let (mut x, mut y) = from;
    let dx = (to.0 - x).abs();
    let dy = -(to.1 - y).abs();
    let sx = if x < to.0 { 1 } else { -1 };
    let sy = if y < to.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(frame, x, y, color);
        if (x, y) == to {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

pub fn draw_rect(frame: &mut FrameTensor, b: &BoundingBox, color: Color) {
    let x0 = b.x.floor() as i64;
    let y0 = b.y.floor() as i64;
    let x1 = ((b.x + b.w).ceil() as i64 - 1).max(x0);
    let y1 = ((b.y + b.h).ceil() as i64 - 1).max(y0);
    draw_line(frame, (x0, y0), (x1, y0), color);
    draw_line(frame, (x1, y0), (x1, y1), color);
    draw_line(frame, (x1, y1), (x0, y1), color);
    draw_line(frame, (x0, y1), (x0, y0), color);
}

/// RGB copy of `frame` with ground truth and detections outlined.
pub fn annotate(frame: &FrameTensor, detections: &[BoundingBox], ground_truth: &[BoundingBox]) -> FrameTensor {
    let mut out = to_rgb(frame);
    for b in ground_truth {
        draw_rect(&mut out, b, GROUND_TRUTH);
    }
    for b in detections {
        draw_rect(&mut out, b, DETECTION);
    }
    out
}

/// Square ROC plot: axes, the chance diagonal and the curve polyline.
pub fn roc_plot(curve: &RocCurve, size: usize) -> FrameTensor {
    let size = size.max(32);
    let mut img = FrameTensor::filled(size, size, 3, 1.0);
    let margin = (size / 10) as i64;
    let span = size as i64 - 2 * margin;
    let at = |fpr: f64, tpr: f64| {
        let x = margin + (fpr.clamp(0.0, 1.0) * span as f64).round() as i64;
        let y = margin + span - (tpr.clamp(0.0, 1.0) * span as f64).round() as i64;
        (x, y)
    };
    draw_line(&mut img, at(0.0, 0.0), at(1.0, 1.0), CHANCE);
    draw_line(&mut img, at(0.0, 0.0), at(1.0, 0.0), AXIS);
    draw_line(&mut img, at(0.0, 0.0), at(0.0, 1.0), AXIS);
    for pair in curve.points.windows(2) {
        draw_line(&mut img, at(pair[0].fpr, pair[0].tpr), at(pair[1].fpr, pair[1].tpr), CURVE);
    }
    img
}

/// Row-major 8-bit RGB bytes.
pub fn rgb_bytes(frame: &FrameTensor) -> Vec<u8> {
    to_rgb(frame).to_rgb8().into_raw()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Label;
    use crate::metrics::roc_auc;

    #[test]
    fn rectangle_outline_only() {
        let frame = FrameTensor::filled(10, 10, 1, 0.0);
        let out = annotate(&frame, &[BoundingBox::new(2.0, 3.0, 4.0, 5.0, 0.9)], &[]);
        assert_eq!(out.channels(), 3);
        assert_eq!(out.get(3, 2, 0), DETECTION[0]);
        assert_eq!(out.get(7, 5, 1), DETECTION[1]);
        assert_eq!(out.get(5, 4, 0), 0.0);
        assert_eq!(out.get(0, 0, 0), 0.0);
    }

    #[test]
    fn boxes_past_the_border_are_clipped() {
        let frame = FrameTensor::filled(6, 6, 3, 0.5);
        let out = annotate(&frame, &[BoundingBox::new(-3.0, -3.0, 20.0, 20.0, 0.5)], &[]);
        assert_eq!(out, frame);
    }

    #[test]
    fn roc_plot_draws_curve_endpoints() {
        let curve = roc_auc(&[0.9, 0.1], &[Label::Gun, Label::NoGun]).unwrap();
        let img = roc_plot(&curve, 100);
        // perfect curve passes through the top-left corner (0, 1)
        assert_eq!(img.get(10, 10, 2), CURVE[2]);
        assert_eq!(img.get(50, 80, 0), 1.0);
    }
}
