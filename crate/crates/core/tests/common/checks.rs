//! Finite-difference gradient checks of the trainable models. The reference
//! is the central difference of the library's own scalar loss.

use gunsight::autograd::gradcheck::{check_gradients, numeric_partial, GradSample};
use gunsight::autograd::{Params, Tensor};
use gunsight::backbone::{image_loss_and_grads, BackboneState};
use gunsight::classifier::{build_head, head_loss_and_grads, HeadConfig, HeadKind};
use gunsight::dataset::{GroundTruthBox, Label};
use gunsight::frame::FrameTensor;
use gunsight::detector::{detection_loss_and_grads, detection_loss_value, DetectionSet, DetectorConfig, DetectorState};
use gunsight::gradcam::capture_activations;
use gunsight::synth;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
pub const SAMPLES: usize = 24;

/// Entries with `|gradient|` below `floor` are compared on an absolute scale:
/// central differences of a loss of size `L` carry round-off near
/// `4 * f64::EPSILON * L / EPS`, so smaller gradients cannot be resolved to
/// `TOLERANCE` relative error.
pub fn resolution_floor(loss: f64) -> f64 {
    (4.0 * f64::EPSILON * loss.abs().max(1.0) / EPS / TOLERANCE).max(1e-7)
}

pub struct Check {
    pub samples: Vec<GradSample>,
    pub floor: f64,
}

impl Check {
    pub fn rel_error(&self, s: &GradSample) -> f64 {
        (s.analytic - s.numeric).abs() / s.analytic.abs().max(s.numeric.abs()).max(self.floor)
    }

    pub fn worst(&self) -> f64 {
        self.samples.iter().map(|s| self.rel_error(s)).fold(0.0, f64::max)
    }
}

/// Move every bias off zero. Freshly initialized biases put dead-ReLU
/// regions exactly on the kink, where no finite difference agrees with any
/// subgradient.
fn generic_point(params: &Params, seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    let mut out = params.clone();
    let names: Vec<String> = out.names().filter(|n| n.ends_with("bias")).map(str::to_string).collect();
    for n in names {
        out.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
    }
    out
}

/// Synthetic image with per-pixel noise, so no two pooled activations tie
/// and the finite difference never straddles a max-pool switch.
fn noisy_image(size: usize, label: Label, seed: u64) -> (FrameTensor, Vec<GroundTruthBox>) {
    let (frame, boxes) = synth::bright_square_image(size, label, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let noisy = FrameTensor::from_fn(size, size, 3, |y, x, c| frame.get(y, x, c) + rng.gen_range(-0.1..0.1));
    (noisy, boxes)
}

fn alternating(n: usize) -> Vec<Label> {
    (0..n).map(|i| if i % 2 == 0 { Label::Gun } else { Label::NoGun }).collect()
}

pub fn backbone_check(seed: u64) -> Check {
    let state = BackboneState::small_conv(3, &[3, 4], seed).unwrap();
    let labels = alternating(3);
    let frames: Vec<_> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| noisy_image(8, l, seed + i as u64).0)
        .collect();
    let params = generic_point(state.params(), seed);
    let (loss, grads) = image_loss_and_grads(&state, &params, &frames, &labels).unwrap();
    Check {
        samples: check_gradients(&params, &grads, SAMPLES, seed, EPS, |_| true, |p| {
            image_loss_and_grads(&state, p, &frames, &labels).unwrap().0
        }),
        floor: resolution_floor(loss),
    }
}

pub fn tiny_head(kind: HeadKind) -> HeadConfig {
    HeadConfig {
        kind,
        lstm_units: 4,
        gru_units: 4,
        recurrent_dropout: 0.5,
        tf_heads: 2,
        tf_model_dim: 4,
        tf_ffn_dim: 6,
        tf_dropout: 0.1,
    }
}

pub fn head_check(kind: HeadKind, seed: u64) -> Check {
    let dim = 5;
    let head = build_head(&tiny_head(kind), dim, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features: Vec<Tensor> = (0..3)
        .map(|_| Tensor::new(vec![4, dim], (0..4 * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect();
    let labels = alternating(3);
    let params = generic_point(head.params(), seed);
    let (loss, grads) = head_loss_and_grads(&head, &params, &features, &labels).unwrap();
    Check {
        samples: check_gradients(&params, &grads, SAMPLES, seed, EPS, |_| true, |p| {
            head_loss_and_grads(&head, p, &features, &labels).unwrap().0
        }),
        floor: resolution_floor(loss),
    }
}

pub fn detector_check(seed: u64) -> Check {
    let cfg = DetectorConfig {
        input_size: 16,
        strides: vec![4, 8],
        ..DetectorConfig::default()
    };
    let state = DetectorState::small(cfg, 3, &[3, 4, 4], seed).unwrap();
    let (images, labels): (Vec<_>, Vec<_>) = alternating(2)
        .into_iter()
        .enumerate()
        .map(|(i, l)| noisy_image(16, l, seed + i as u64))
        .unzip();
    let set = DetectionSet::new(images, labels).unwrap();
    let params = generic_point(state.params(), seed);
    let state = DetectorState::from_params(state.config().clone(), 3, state.widths().to_vec(), params, seed).unwrap();
    let (loss, grads) = detection_loss_and_grads(&state, &set).unwrap();
    Check {
        samples: check_gradients(state.params(), &grads, SAMPLES, seed, EPS, |_| true, |p| {
            detection_loss_value(&state, p, &set).unwrap()
        }),
        floor: resolution_floor(loss),
    }
}

/// Grad-CAM's captured gradient against central differences of the logit
/// recomputed from a perturbed activation, on strictly positive entries.
pub fn gradcam_check(seed: u64) -> Check {
    let state = BackboneState::small_conv(3, &[4, 6, 6], seed).unwrap();
    let (frame, _) = noisy_image(16, Label::Gun, seed);
    let mut out = Vec::new();
    for layer in 0..3 {
        for class in 0..2 {
            let cap = capture_activations(&state, &frame, class, Some(layer)).unwrap();
            let act = cap.activations.clone();
            let full: Vec<usize> = std::iter::once(1).chain(act.shape().iter().copied()).collect();
            let logit = |a: &Tensor| state.logits_from_activation(layer, &a.clone().reshape(&full)).unwrap().data()[class];
            let mut params = gunsight::autograd::Params::new();
            params.insert("a", act.clone());
            let candidates: Vec<usize> = (0..act.numel()).filter(|&i| act.data()[i] > 1e-3).collect();
            for &i in candidates.iter().step_by((candidates.len() / 4).max(1)).take(4) {
                out.push(GradSample {
                    name: format!("layer{layer}.class{class}"),
                    index: i,
                    analytic: cap.gradients.data()[i],
                    numeric: numeric_partial(&params, "a", i, EPS, &|p| logit(p.get("a").unwrap())),
                });
            }
        }
    }
    Check {
        samples: out,
        floor: 1e-7,
    }
}
