//! Gradient-weighted class activation maps over a backbone conv block.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use gunsight_autograd::{Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneState, NUM_CLASSES};
use crate::classifier::ClassifierModel;
use crate::error::{Error, Result};
use crate::frame::{frames_to_batch, FrameTensor};

/// Post-ReLU activations `A` of one conv block and the gradient of a class
/// logit with respect to them, both `[K, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationCapture {
    pub activations: Tensor,
    pub gradients: Tensor,
    pub class_id: usize,
    pub layer: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    /// `ReLU(sum_k alpha_k A_k)`, row-major.
    pub values: Vec<f64>,
    /// `values / max(values)`, or all zeros when the map is zero.
    pub normalized_values: Vec<f64>,
}

impl Heatmap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Per-channel weights: spatial mean of the gradients.
pub fn channel_weights(gradients: &Tensor) -> Vec<f64> {
    let k = gradients.dim(0);
    let plane = gradients.numel() / k.max(1);
    gradients
        .data()
        .chunks(plane)
        .map(|c| c.iter().sum::<f64>() / plane as f64)
        .collect()
}

pub fn gradcam_map(cap: &ActivationCapture) -> Result<Heatmap> {
    let a = &cap.activations;
    if a.rank() != 3 || a.shape() != cap.gradients.shape() {
        return Err(Error::validation(format!(
            "activations {:?} and gradients {:?} must share one [K, H, W] shape",
            a.shape(),
            cap.gradients.shape()
        )));
    }
    let (k, h, w) = (a.dim(0), a.dim(1), a.dim(2));
    let alpha = channel_weights(&cap.gradients);
    let plane = h * w;
    let mut values = vec![0.0; plane];
    for (ch, weight) in alpha.iter().enumerate().take(k) {
        for (v, act) in values.iter_mut().zip(&a.data()[ch * plane..(ch + 1) * plane]) {
            *v += weight * act;
        }
    }
    values.iter_mut().for_each(|v| *v = v.max(0.0));
    let max = values.iter().cloned().fold(0.0, f64::max);
    let normalized_values = if max > 0.0 {
        values.iter().map(|v| v / max).collect()
    } else {
        vec![0.0; plane]
    };
    Ok(Heatmap {
        height: h,
        width: w,
        values,
        normalized_values,
    })
}

/// Anything carrying a convolutional backbone Grad-CAM can inspect.
pub trait ConvInspectable {
    fn conv_backbone(&self) -> Option<&BackboneState>;
}

impl ConvInspectable for BackboneState {
    fn conv_backbone(&self) -> Option<&BackboneState> {
        (!self.layers().is_empty()).then_some(self)
    }
}

impl ConvInspectable for ClassifierModel {
    fn conv_backbone(&self) -> Option<&BackboneState> {
        self.backbone.conv_backbone()
    }
}

/// Record the post-ReLU output of conv block `layer` (the last block when
/// `None`) and the gradient of the pre-softmax logit of `class_id` w.r.t. it.
pub fn capture_activations(
    model: &impl ConvInspectable,
    frame: &FrameTensor,
    class_id: usize,
    layer: Option<usize>,
) -> Result<ActivationCapture> {
    let backbone = model
        .conv_backbone()
        .ok_or_else(|| Error::Capability("model has no convolutional layer to inspect".into()))?;
    if class_id >= NUM_CLASSES {
        return Err(Error::validation(format!(
            "class id {class_id} outside 0..{NUM_CLASSES}"
        )));
    }
    let n_layers = backbone.layers().len();
    let layer = layer.unwrap_or(n_layers - 1);
    if layer >= n_layers {
        return Err(Error::validation(format!(
            "conv block {layer} requested, backbone has {n_layers}"
        )));
    }
    backbone.check_frames(&[frame])?;

    // forward to the block, then re-root the graph at its output
    let mut g = Graph::new();
    let p = backbone.params().bind_with(&mut g, |_| false);
    let x = g.constant(frames_to_batch(&[frame])?);
    let full = backbone.forward(&mut g, &p, x);
    let captured = g.value(full.activations[layer]).clone();

    let mut g = Graph::new();
    let p = backbone.params().bind_with(&mut g, |_| false);
    let a = g.param(captured.clone());
    let next = if backbone.layers()[layer].pool {
        g.max_pool2d(a, 2)
    } else {
        a
    };
    let tail = backbone.forward_from(&mut g, &p, next, layer + 1);
    let score = g.gather(tail.logits, vec![class_id]);
    let score = g.sum(score);
    let grads = g.backward(score);
    let gradients = grads
        .get(a)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(captured.shape()));

    let shape = captured.shape()[1..].to_vec();
    Ok(ActivationCapture {
        activations: captured.reshape(&shape),
        gradients: gradients.reshape(&shape),
        class_id,
        layer,
    })
}

/// Classic jet colormap on `[0, 1]`.
pub fn jet(v: f64) -> [f64; 3] {
    let f = |c: f64| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [f(3.0), f(2.0), f(1.0)]
}

/// Bilinear upsampling of the normalized map to `height x width`.
pub fn upsample(hm: &Heatmap, height: usize, width: usize) -> FrameTensor {
    let small = FrameTensor::from_fn(hm.height, hm.width, 1, |y, x, _| {
        hm.normalized_values[y * hm.width + x]
    });
    small.resize(height, width)
}

/// `out = frame * (1 - alpha h) + alpha h jet(h)` with `h` the upsampled
/// normalized map. Gray frames are expanded to RGB.
pub fn overlay(hm: &Heatmap, frame: &FrameTensor, alpha: f64) -> FrameTensor {
    let alpha = alpha.clamp(0.0, 1.0);
    let (h, w, c) = frame.shape();
    let up = upsample(hm, h, w);
    FrameTensor::from_fn(h, w, 3, |y, x, ch| {
        let base = frame.get(y, x, if c == 3 { ch } else { 0 });
        let heat = up.get(y, x, 0);
        let weight = alpha * heat;
        base * (1.0 - weight) + weight * jet(heat)[ch]
    })
}

pub fn write_png(frame: &FrameTensor, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    frame
        .to_rgb8()
        .save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}
