mod common;

use common::checks::*;
use gunsight::autograd::gradcheck::GradSample;
use gunsight::autograd::Tensor;
use gunsight::classifier::HeadKind;
use gunsight::gradcam::{channel_weights, gradcam_map, ActivationCapture};

fn assert_close(name: &str, check: &Check) {
    assert!(check.samples.len() >= 20, "{name}: only {} entries checked", check.samples.len());
    let w = check.worst();
    assert!(w <= TOLERANCE, "{name}: worst relative error {w:e}");
}

#[test]
fn backbone_gradients_match_finite_differences() {
    assert_close("backbone", &backbone_check(3));
}

#[test]
fn lstm_gradients_match_finite_differences() {
    assert_close("lstm", &head_check(HeadKind::Lstm, 4));
}

#[test]
fn gru_gradients_match_finite_differences() {
    assert_close("gru", &head_check(HeadKind::Gru, 5));
}

#[test]
fn transformer_gradients_match_finite_differences() {
    assert_close("transformer", &head_check(HeadKind::Transformer, 6));
}

#[test]
fn detector_gradients_match_finite_differences() {
    assert_close("detector", &detector_check(7));
}

#[test]
fn gradcam_capture_matches_finite_differences() {
    assert_close("gradcam", &gradcam_check(8));
}

#[test]
fn gradcam_by_hand() {
    // two 2x2 channels; mean gradients 1 and -0.5
    let cap = ActivationCapture {
        activations: Tensor::new(vec![2, 2, 2], vec![1.0, 2.0, 0.0, 4.0, 2.0, 2.0, 2.0, 10.0]),
        gradients: Tensor::new(vec![2, 2, 2], vec![1.0, 1.0, 1.0, 1.0, -2.0, 0.0, 0.0, 0.0]),
        class_id: 0,
        layer: 0,
    };
    assert_eq!(channel_weights(&cap.gradients), vec![1.0, -0.5]);
    let hm = gradcam_map(&cap).unwrap();
    // 1*A0 - 0.5*A1 = [0, 1, -1, -1] -> ReLU
    assert_eq!(hm.values, vec![0.0, 1.0, 0.0, 0.0]);
    assert_eq!(hm.normalized_values, vec![0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn gradcam_all_negative_map_normalizes_to_zero() {
    let cap = ActivationCapture {
        activations: Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]),
        gradients: Tensor::new(vec![1, 1, 3], vec![-1.0, -1.0, -1.0]),
        class_id: 1,
        layer: 0,
    };
    let hm = gradcam_map(&cap).unwrap();
    assert_eq!(hm.values, vec![0.0; 3]);
    assert_eq!(hm.normalized_values, vec![0.0; 3]);
}

#[test]
fn gradcam_scales_with_positive_gradient() {
    let act = Tensor::new(vec![1, 2, 2], vec![1.0, 3.0, 2.0, 0.5]);
    let cap = |s: f64| ActivationCapture {
        activations: act.clone(),
        gradients: Tensor::new(vec![1, 2, 2], vec![s; 4]),
        class_id: 0,
        layer: 0,
    };
    let a = gradcam_map(&cap(1.0)).unwrap();
    let b = gradcam_map(&cap(3.0)).unwrap();
    assert_eq!(b.values, a.values.iter().map(|v| 3.0 * v).collect::<Vec<_>>());
    assert_eq!(a.normalized_values, b.normalized_values);
    assert_eq!(a.normalized_values, vec![1.0 / 3.0, 1.0, 2.0 / 3.0, 0.5 / 3.0]);
}

#[test]
fn floor_only_covers_round_off_scale_gradients() {
    let floor = resolution_floor(0.7);
    assert!(floor < 1e-5);
    let check = Check {
        samples: vec![GradSample {
            name: "w".into(),
            index: 0,
            analytic: 1.0,
            numeric: 1.001,
        }],
        floor,
    };
    assert!(check.worst() > TOLERANCE);
}
