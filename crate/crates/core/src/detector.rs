//! Stage-2 detector: a small convolutional trunk with one prediction head per
//! stride. Each grid cell predicts a single box `(dx, dy, w_rel, h_rel)` plus
//! an objectness score; decoding, confidence filtering and NMS follow.

use std::path::Path;

use gunsight_autograd::{sigmoid, Bound, Graph, Params, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxes::{nms, BoundingBox};
use crate::checkpoint::{load_params, read_json, save_params, write_json};
use crate::dataset::GroundTruthBox;
use crate::error::{Error, Result};
use crate::frame::{frames_to_batch, FrameTensor, Letterbox};
use crate::train::{run_training, BatchOutcome, EvalOutcome, TrainConfig, TrainingHistory};

/// Channels per cell: dx, dy, w_rel, h_rel, objectness.
pub const CELL_CHANNELS: usize = 5;
const OBJ: usize = 4;
const INFERENCE_CHUNK: usize = 32;
/// Box side (in cells) a scale is considered responsible for.
const TARGET_CELLS: f64 = 8.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub input_size: usize,
    pub strides: Vec<usize>,
    pub confidence_threshold: f64,
    pub nms_iou_threshold: f64,
    /// Canvas fill around letterboxed frames.
    pub pad_value: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_size: 640,
            strides: vec![8, 16, 32],
            confidence_threshold: 0.25,
            nms_iou_threshold: 0.45,
            pad_value: 0.5,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strides.is_empty() {
            return Err(Error::validation("detector needs at least one stride"));
        }
        if self.strides.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::validation("detector strides must be strictly increasing"));
        }
        for &s in &self.strides {
            if s < 2 || !s.is_power_of_two() {
                return Err(Error::validation(format!("stride {s} must be a power of two >= 2")));
            }
            if self.input_size == 0 || self.input_size % s != 0 {
                return Err(Error::validation(format!(
                    "input_size {} is not divisible by stride {s}",
                    self.input_size
                )));
            }
        }
        for (name, v) in [
            ("confidence_threshold", self.confidence_threshold),
            ("nms_iou_threshold", self.nms_iou_threshold),
            ("pad_value", self.pad_value),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    /// Grid side `S = input_size / stride` per scale.
    pub fn grid_sizes(&self) -> Vec<usize> {
        self.strides.iter().map(|s| self.input_size / s).collect()
    }

    /// Scale whose stride best matches the box: `|largest_side / stride - 8|`
    /// minimal, ties going to the finer scale.
    pub fn responsible_scale(&self, w: f64, h: f64) -> usize {
        let side = w.max(h);
        let mut best = 0;
        let mut best_gap = f64::INFINITY;
        for (k, &s) in self.strides.iter().enumerate() {
            let gap = (side / s as f64 - TARGET_CELLS).abs();
            if gap < best_gap {
                best_gap = gap;
                best = k;
            }
        }
        best
    }
}

/// Post-sigmoid grid outputs, one `S x S x 5` array per scale (row-major,
/// channel innermost).
#[derive(Clone, Debug, PartialEq)]
pub struct RawGridPrediction {
    pub scales: Vec<Vec<f64>>,
}

impl RawGridPrediction {
    pub fn zeros(cfg: &DetectorConfig) -> Self {
        Self {
            scales: cfg
                .grid_sizes()
                .iter()
                .map(|s| vec![0.0; s * s * CELL_CHANNELS])
                .collect(),
        }
    }

    /// Mutable view of cell `(i, j)` at `scale`.
    pub fn cell_mut(&mut self, cfg: &DetectorConfig, scale: usize, i: usize, j: usize) -> &mut [f64] {
        let s = cfg.grid_sizes()[scale];
        let at = (i * s + j) * CELL_CHANNELS;
        &mut self.scales[scale][at..at + CELL_CHANNELS]
    }

    pub fn cell(&self, cfg: &DetectorConfig, scale: usize, i: usize, j: usize) -> &[f64] {
        let s = cfg.grid_sizes()[scale];
        let at = (i * s + j) * CELL_CHANNELS;
        &self.scales[scale][at..at + CELL_CHANNELS]
    }
}

/// Boxes in canvas pixels for every cell at or above the confidence threshold,
/// scales concatenated finest first.
pub fn decode_predictions(raw: &RawGridPrediction, cfg: &DetectorConfig) -> Result<Vec<BoundingBox>> {
    let grids = cfg.grid_sizes();
    if raw.scales.len() != grids.len() {
        return Err(Error::validation(format!(
            "prediction has {} scales, config has {}",
            raw.scales.len(),
            grids.len()
        )));
    }
    let input = cfg.input_size as f64;
    let mut out = Vec::new();
    for (k, (data, &s)) in raw.scales.iter().zip(&grids).enumerate() {
        if data.len() != s * s * CELL_CHANNELS {
            return Err(Error::validation(format!(
                "scale {k} holds {} values, expected {s}x{s}x{CELL_CHANNELS}",
                data.len()
            )));
        }
        let stride = cfg.strides[k] as f64;
        for i in 0..s {
            for j in 0..s {
                let c = &data[(i * s + j) * CELL_CHANNELS..][..CELL_CHANNELS];
                if c[OBJ] < cfg.confidence_threshold {
                    continue;
                }
                let cx = (j as f64 + c[0]) * stride;
                let cy = (i as f64 + c[1]) * stride;
                let w = c[2] * input;
                let h = c[3] * input;
                out.push(BoundingBox::new(cx - w / 2.0, cy - h / 2.0, w, h, c[OBJ]));
            }
        }
    }
    Ok(out)
}

/// Cell assignment and regression target of one ground-truth box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellTarget {
    pub scale: usize,
    pub row: usize,
    pub col: usize,
    /// `(dx, dy, w_rel, h_rel)`
    pub params: [f64; 4],
}

/// Inverse of the decode rule for a canvas-pixel box `(cx, cy, w, h)`.
pub fn encode_box(cx: f64, cy: f64, w: f64, h: f64, cfg: &DetectorConfig) -> CellTarget {
    let scale = cfg.responsible_scale(w, h);
    let stride = cfg.strides[scale] as f64;
    let s = cfg.grid_sizes()[scale];
    let col = ((cx / stride).floor().max(0.0) as usize).min(s - 1);
    let row = ((cy / stride).floor().max(0.0) as usize).min(s - 1);
    let input = cfg.input_size as f64;
    CellTarget {
        scale,
        row,
        col,
        params: [
            (cx / stride - col as f64).clamp(0.0, 1.0),
            (cy / stride - row as f64).clamp(0.0, 1.0),
            (w / input).clamp(0.0, 1.0),
            (h / input).clamp(0.0, 1.0),
        ],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameDetections {
    pub index: usize,
    pub boxes: Vec<BoundingBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorState {
    config: DetectorConfig,
    in_channels: usize,
    widths: Vec<usize>,
    params: Params,
    seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectorSidecar {
    pub config: DetectorConfig,
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub seed: u64,
    #[serde(default)]
    pub history: Option<TrainingHistory>,
}

fn conv_name(i: usize, kind: &str) -> String {
    format!("trunk{i}.{kind}")
}

fn head_name(stride: usize, kind: &str) -> String {
    format!("head{stride}.{kind}")
}

fn he_normal(rng: &mut ChaCha8Rng, out: usize, inp: usize, k: usize) -> Tensor {
    Tensor::randn(&[out, inp, k, k], (2.0 / (inp * k * k) as f64).sqrt(), rng)
}

impl DetectorState {
    /// Built-in detector. The trunk has one `conv3x3 -> ReLU -> pool` block per
    /// halving up to the coarsest stride, so `widths.len()` must equal
    /// `log2(max stride)`; every stride gets a 3x3 head on its block.
    pub fn small(cfg: DetectorConfig, in_channels: usize, widths: &[usize], seed: u64) -> Result<Self> {
        cfg.validate()?;
        let depth = cfg.strides.last().unwrap().trailing_zeros() as usize;
        if widths.len() != depth || widths.contains(&0) || in_channels == 0 {
            return Err(Error::Config(format!(
                "strides up to {} need {depth} positive trunk widths, got {widths:?}",
                cfg.strides.last().unwrap()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let mut prev = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            params.insert(conv_name(i, "weight"), he_normal(&mut rng, w, prev, 3));
            params.insert(conv_name(i, "bias"), Tensor::zeros(&[w]));
            prev = w;
        }
        for &s in &cfg.strides {
            let level = s.trailing_zeros() as usize - 1;
            let mut w = he_normal(&mut rng, CELL_CHANNELS, widths[level], 3);
            w.data_mut().iter_mut().for_each(|v| *v *= 0.1);
            params.insert(head_name(s, "weight"), w);
            // start with low objectness so the untrained detector is quiet
            let mut b = vec![0.0; CELL_CHANNELS];
            b[OBJ] = -4.0;
            params.insert(head_name(s, "bias"), Tensor::new(vec![CELL_CHANNELS], b));
        }
        Ok(Self {
            config: cfg,
            in_channels,
            widths: widths.to_vec(),
            params,
            seed,
        })
    }

    /// Wrap an externally produced parameter set with the built-in layout.
    pub fn from_params(
        cfg: DetectorConfig,
        in_channels: usize,
        widths: Vec<usize>,
        params: Params,
        seed: u64,
    ) -> Result<Self> {
        let reference = Self::small(cfg.clone(), in_channels, &widths, 0)?;
        if !reference.params.same_layout(&params) {
            return Err(Error::Load(
                "detector parameters do not match the configured trunk and heads".into(),
            ));
        }
        Ok(Self {
            params,
            seed,
            ..reference
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    /// Replace thresholds without touching the network geometry.
    pub fn with_thresholds(mut self, confidence: f64, nms_iou: f64) -> Result<Self> {
        self.config.confidence_threshold = confidence;
        self.config.nms_iou_threshold = nms_iou;
        self.config.validate()?;
        Ok(self)
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Raw head logits `[N, 5, S, S]` per scale for a canvas batch.
    pub(crate) fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Vec<Var> {
        let mut levels = Vec::with_capacity(self.widths.len());
        let mut h = x;
        for i in 0..self.widths.len() {
            let c = g.conv2d(h, p.var(&conv_name(i, "weight")), p.var(&conv_name(i, "bias")), 1, 1);
            let a = g.relu(c);
            h = g.max_pool2d(a, 2);
            levels.push(h);
        }
        self.config
            .strides
            .iter()
            .map(|&s| {
                let feat = levels[s.trailing_zeros() as usize - 1];
                g.conv2d(feat, p.var(&head_name(s, "weight")), p.var(&head_name(s, "bias")), 1, 1)
            })
            .collect()
    }

    fn prepare(&self, frames: &[FrameTensor]) -> Result<Vec<(FrameTensor, Letterbox)>> {
        if let Some(f) = frames.iter().find(|f| f.channels() != self.in_channels) {
            return Err(Error::validation(format!(
                "detector expects {}-channel frames, got {}",
                self.in_channels,
                f.channels()
            )));
        }
        Ok(frames
            .par_iter()
            .map(|f| f.letterbox(self.config.input_size, self.config.pad_value))
            .collect())
    }

    /// Post-sigmoid grid predictions for already letterboxed canvases.
    pub fn predict_canvases(&self, canvases: &[&FrameTensor]) -> Result<Vec<RawGridPrediction>> {
        let size = self.config.input_size;
        if let Some(c) = canvases.iter().find(|c| c.height() != size || c.width() != size) {
            return Err(Error::validation(format!(
                "canvas {}x{} does not match detector input {size}",
                c.height(),
                c.width()
            )));
        }
        let grids = self.config.grid_sizes();
        let mut out = Vec::with_capacity(canvases.len());
        for chunk in canvases.chunks(INFERENCE_CHUNK) {
            let mut g = Graph::new();
            let p = self.params.bind_with(&mut g, |_| false);
            let x = g.constant(frames_to_batch(chunk)?);
            let heads = self.forward(&mut g, &p, x);
            for n in 0..chunk.len() {
                let scales = heads
                    .iter()
                    .zip(&grids)
                    .map(|(&h, &s)| {
                        let v = g.value(h).data();
                        let plane = s * s;
                        let mut cells = vec![0.0; plane * CELL_CHANNELS];
                        for ch in 0..CELL_CHANNELS {
                            let base = (n * CELL_CHANNELS + ch) * plane;
                            for idx in 0..plane {
                                cells[idx * CELL_CHANNELS + ch] = sigmoid(v[base + idx]);
                            }
                        }
                        cells
                    })
                    .collect();
                out.push(RawGridPrediction { scales });
            }
        }
        Ok(out)
    }

    /// Letterbox, predict, decode, map back to frame pixels, clamp, NMS.
    pub fn detect_frames(&self, frames: &[FrameTensor]) -> Result<Vec<FrameDetections>> {
        let prepared = self.prepare(frames)?;
        let canvases: Vec<&FrameTensor> = prepared.iter().map(|(c, _)| c).collect();
        let raws = self.predict_canvases(&canvases)?;
        raws.iter()
            .zip(&prepared)
            .enumerate()
            .map(|(index, (raw, (_, lb)))| {
                let boxes: Vec<BoundingBox> = decode_predictions(raw, &self.config)?
                    .into_iter()
                    .filter_map(|b| {
                        let (x1, y1) = lb.to_source(b.x, b.y);
                        let (x2, y2) = lb.to_source(b.x + b.w, b.y + b.h);
                        BoundingBox {
                            x: x1,
                            y: y1,
                            w: x2 - x1,
                            h: y2 - y1,
                            ..b
                        }
                        .clamped(lb.source_width as f64, lb.source_height as f64)
                    })
                    .collect();
                Ok(FrameDetections {
                    index,
                    boxes: nms(&boxes, self.config.nms_iou_threshold),
                })
            })
            .collect()
    }

    pub fn sidecar(&self, history: Option<TrainingHistory>) -> DetectorSidecar {
        DetectorSidecar {
            config: self.config.clone(),
            in_channels: self.in_channels,
            widths: self.widths.clone(),
            seed: self.seed,
            history,
        }
    }

    /// Writes `detector.safetensors` and `detector.json` into `dir`.
    pub fn save(&self, dir: &Path, history: Option<TrainingHistory>) -> Result<()> {
        save_params(&dir.join("detector.safetensors"), &self.params)?;
        write_json(&dir.join("detector.json"), &self.sidecar(history))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let sidecar: DetectorSidecar = read_json(&dir.join("detector.json"))?;
        Self::from_params(
            sidecar.config,
            sidecar.in_channels,
            sidecar.widths,
            load_params(&dir.join("detector.safetensors"))?,
            sidecar.seed,
        )
    }

    /// Serialized size of the parameters in bytes.
    pub fn size_bytes(&self) -> usize {
        self.params.numel() * std::mem::size_of::<f64>()
    }
}

/// Images paired with their (possibly empty) ground-truth box lists.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionSet {
    pub images: Vec<FrameTensor>,
    pub labels: Vec<Vec<GroundTruthBox>>,
}

impl DetectionSet {
    pub fn new(images: Vec<FrameTensor>, labels: Vec<Vec<GroundTruthBox>>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::validation(format!(
                "{} images but {} label lists",
                images.len(),
                labels.len()
            )));
        }
        for b in labels.iter().flatten() {
            b.validate()?;
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// One image in canvas space with its cell targets.
struct Encoded {
    canvas: FrameTensor,
    targets: Vec<CellTarget>,
}

fn encode_set(state: &DetectorState, set: &DetectionSet) -> Result<Vec<Encoded>> {
    let cfg = &state.config;
    let prepared = state.prepare(&set.images)?;
    Ok(prepared
        .into_iter()
        .zip(&set.labels)
        .map(|((canvas, lb), boxes)| {
            let mut targets: Vec<CellTarget> = Vec::new();
            for b in boxes {
                let (x, y, w, h) = b.to_pixels(lb.source_width, lb.source_height);
                if w <= 0.0 || h <= 0.0 {
                    continue;
                }
                let (cx, cy) = lb.to_canvas(x + w / 2.0, y + h / 2.0);
                let t = encode_box(cx, cy, w * lb.scale_x, h * lb.scale_y, cfg);
                // first box claims a cell
                if !targets
                    .iter()
                    .any(|o| (o.scale, o.row, o.col) == (t.scale, t.row, t.col))
                {
                    targets.push(t);
                }
            }
            Encoded { canvas, targets }
        })
        .collect())
}

/// Balanced objectness BCE plus `(1 - IoU)` and squared error on the box
/// parameters of responsible cells.
fn detection_loss(state: &DetectorState, params: &Params, batch: &[&Encoded]) -> Result<(Graph, Bound, Var)> {
    let cfg = &state.config;
    let grids = cfg.grid_sizes();
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let canvases: Vec<&FrameTensor> = batch.iter().map(|e| &e.canvas).collect();
    let x = g.constant(frames_to_batch(&canvases)?);
    let heads = state.forward(&mut g, &p, x);

    let n_cells: usize = grids.iter().map(|s| s * s).sum::<usize>() * batch.len();
    let n_pos: usize = batch.iter().map(|e| e.targets.len()).sum();
    let n_neg = n_cells - n_pos;

    let mut obj_terms = Vec::new();
    let mut box_terms = Vec::new();
    for (k, (&head, &s)) in heads.iter().zip(&grids).enumerate() {
        let plane = s * s;
        let obj_idx: Vec<usize> = (0..batch.len())
            .flat_map(|n| (0..plane).map(move |c| (n * CELL_CHANNELS + OBJ) * plane + c))
            .collect();
        let mut targets = vec![0.0; obj_idx.len()];
        let mut weights = vec![if n_neg > 0 { 1.0 / n_neg as f64 } else { 0.0 }; obj_idx.len()];
        let mut pos: Vec<(usize, usize, &CellTarget)> = Vec::new();
        for (n, e) in batch.iter().enumerate() {
            for t in e.targets.iter().filter(|t| t.scale == k) {
                let cell = t.row * s + t.col;
                targets[n * plane + cell] = 1.0;
                weights[n * plane + cell] = 1.0 / n_pos as f64;
                pos.push((n, cell, t));
            }
        }
        let obj = g.gather(head, obj_idx);
        obj_terms.push(g.bce_with_logits(obj, Tensor::new(vec![targets.len()], targets), Tensor::new(vec![weights.len()], weights)));

        if pos.is_empty() {
            continue;
        }
        let stride = cfg.strides[k] as f64;
        let input = cfg.input_size as f64;
        let channel = |g: &mut Graph, ch: usize| {
            let idx = pos
                .iter()
                .map(|(n, cell, _)| (n * CELL_CHANNELS + ch) * plane + cell)
                .collect();
            let raw = g.gather(head, idx);
            g.sigmoid(raw)
        };
        let (dx, dy, pw, ph) = (channel(&mut g, 0), channel(&mut g, 1), channel(&mut g, 2), channel(&mut g, 3));
        let column = |f: &dyn Fn(&CellTarget) -> f64| Tensor::new(vec![pos.len()], pos.iter().map(|(_, _, t)| f(t)).collect());
        let preds = g.concat_rows(&[dx, dy, pw, ph]);
        let truth = Tensor::new(
            vec![4 * pos.len()],
            (0..4).flat_map(|c| pos.iter().map(move |(_, _, t)| t.params[c])).collect(),
        );
        let truth = g.constant(truth);
        let err = g.sub(preds, truth);
        let sq = g.mul(err, err);
        box_terms.push(g.sum(sq));

        // IoU in input-normalized units
        let cell_scale = stride / input;
        let cx_off = g.constant(column(&|t| t.col as f64 * cell_scale));
        let cy_off = g.constant(column(&|t| t.row as f64 * cell_scale));
        let pcx = g.scale(dx, cell_scale);
        let pcx = g.add(pcx, cx_off);
        let pcy = g.scale(dy, cell_scale);
        let pcy = g.add(pcy, cy_off);
        let half_w = g.scale(pw, 0.5);
        let half_h = g.scale(ph, 0.5);
        let px1 = g.sub(pcx, half_w);
        let px2 = g.add(pcx, half_w);
        let py1 = g.sub(pcy, half_h);
        let py2 = g.add(pcy, half_h);
        let gx1 = g.constant(column(&|t| (t.col as f64 + t.params[0]) * cell_scale - t.params[2] / 2.0));
        let gx2 = g.constant(column(&|t| (t.col as f64 + t.params[0]) * cell_scale + t.params[2] / 2.0));
        let gy1 = g.constant(column(&|t| (t.row as f64 + t.params[1]) * cell_scale - t.params[3] / 2.0));
        let gy2 = g.constant(column(&|t| (t.row as f64 + t.params[1]) * cell_scale + t.params[3] / 2.0));
        let ix2 = g.minimum(px2, gx2);
        let ix1 = g.maximum(px1, gx1);
        let iw = g.sub(ix2, ix1);
        let iw = g.relu(iw);
        let iy2 = g.minimum(py2, gy2);
        let iy1 = g.maximum(py1, gy1);
        let ih = g.sub(iy2, iy1);
        let ih = g.relu(ih);
        let inter = g.mul(iw, ih);
        let parea = g.mul(pw, ph);
        let garea = g.constant(column(&|t| t.params[2] * t.params[3]));
        let total = g.add(parea, garea);
        let union = g.sub(total, inter);
        let union = g.add_scalar(union, 1e-9);
        let ratio = g.div(inter, union);
        let ratio_sum = g.sum(ratio);
        let miss = g.scale(ratio_sum, -1.0);
        let miss = g.add_scalar(miss, pos.len() as f64);
        box_terms.push(miss);
    }

    let mut loss = obj_terms[0];
    for &t in &obj_terms[1..] {
        loss = g.add(loss, t);
    }
    if n_pos > 0 {
        let mut bsum = box_terms[0];
        for &t in &box_terms[1..] {
            bsum = g.add(bsum, t);
        }
        let bmean = g.scale(bsum, 1.0 / n_pos as f64);
        loss = g.add(loss, bmean);
    }
    Ok((g, p, loss))
}

#[derive(Clone, Debug)]
pub struct DetectorFinetune {
    pub state: DetectorState,
    pub history: TrainingHistory,
}

pub fn finetune_detector(
    state: &DetectorState,
    train: &DetectionSet,
    val: &DetectionSet,
    cfg: &TrainConfig,
) -> Result<DetectorFinetune> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::validation("detector fine-tuning needs non-empty train and val sets"));
    }
    let train_enc = encode_set(state, train)?;
    let val_enc = encode_set(state, val)?;
    let val_refs: Vec<&Encoded> = val_enc.iter().collect();

    let outcome = run_training(
        state.params.clone(),
        |_| true,
        train_enc.len(),
        cfg,
        |params, batch, _seed| {
            let items: Vec<&Encoded> = batch.iter().map(|&i| &train_enc[i]).collect();
            let (g, p, loss) = detection_loss(state, params, &items)?;
            let grads = p.grads(&g.backward(loss));
            Ok(BatchOutcome {
                loss: g.value(loss).item(),
                correct: None,
                grads,
            })
        },
        |params| {
            let mut total = 0.0;
            for chunk in val_refs.chunks(INFERENCE_CHUNK) {
                let (g, _, loss) = detection_loss(state, params, chunk)?;
                total += g.value(loss).item() * chunk.len() as f64;
            }
            Ok(EvalOutcome {
                loss: total / val_refs.len() as f64,
                accuracy: None,
            })
        },
    )?;
    Ok(DetectorFinetune {
        state: DetectorState {
            params: outcome.params,
            ..state.clone()
        },
        history: outcome.history,
    })
}

/// Gradients of the training loss, exposed for finite-difference checks.
pub fn detection_loss_and_grads(
    state: &DetectorState,
    set: &DetectionSet,
) -> Result<(f64, std::collections::BTreeMap<String, Tensor>)> {
    let enc = encode_set(state, set)?;
    let refs: Vec<&Encoded> = enc.iter().collect();
    let (g, p, loss) = detection_loss(state, &state.params, &refs)?;
    let grads = p.grads(&g.backward(loss));
    Ok((g.value(loss).item(), grads))
}

/// Training loss of `params` laid out like `state`.
pub fn detection_loss_value(state: &DetectorState, params: &Params, set: &DetectionSet) -> Result<f64> {
    let enc = encode_set(state, set)?;
    let refs: Vec<&Encoded> = enc.iter().collect();
    let (g, _, loss) = detection_loss(state, params, &refs)?;
    Ok(g.value(loss).item())
}
