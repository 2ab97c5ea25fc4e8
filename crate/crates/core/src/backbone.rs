//! Frame-level feature extractor.
//!
//! The network is a stack of `conv -> ReLU [-> 2x2 max-pool]` blocks. The
//! post-ReLU output of the final block is the map Grad-CAM inspects; its
//! global average pool is the per-frame feature vector, and a linear layer
//! `fc` on top gives the two-way image logits used while fine-tuning.
//!
//! Parameters are named `conv{i}.weight` (`[out, in, k, k]`), `conv{i}.bias`,
//! `fc.weight` (`[feature_dim, 2]`) and `fc.bias`. Any parameter file with that
//! layout can be imported, which is how externally pretrained weights enter.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gunsight_autograd::{Bound, Graph, Params, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, AugmentPolicy};
use crate::checkpoint::{load_params, read_json, save_params, write_json};
use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::frame::{frames_to_batch, FrameTensor};
use crate::train::{run_training, BatchOutcome, EvalOutcome, TrainConfig, TrainingHistory};

pub const NUM_CLASSES: usize = 2;
const INFERENCE_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    SmallConv,
    ImportedPretrained,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub pool: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneState {
    architecture: Architecture,
    layers: Vec<ConvLayer>,
    params: Params,
    frozen_prefix: Vec<String>,
    seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackboneSidecar {
    pub architecture: Architecture,
    pub feature_dim: usize,
    pub frozen_prefix: Vec<String>,
    pub seed: u64,
    pub layers: Vec<ConvLayer>,
    #[serde(default)]
    pub history: Option<TrainingHistory>,
}

pub(crate) struct Forward {
    /// Post-ReLU output of every conv block, `[N, C_i, H_i, W_i]`.
    pub activations: Vec<Var>,
    /// `[N, feature_dim]`
    pub features: Var,
    /// `[N, 2]`
    pub logits: Var,
}

pub(crate) fn param_name(layer: usize, kind: &str) -> String {
    format!("conv{layer}.{kind}")
}

impl BackboneState {
    /// Randomly initialized built-in network. Every block but the last pools.
    pub fn small_conv(in_channels: usize, widths: &[usize], seed: u64) -> Result<Self> {
        if in_channels == 0 || widths.is_empty() || widths.contains(&0) {
            return Err(Error::Config(
                "small-conv backbone needs positive input channels and layer widths".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let mut layers = Vec::new();
        let mut prev = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            let fan_in = (prev * 9) as f64;
            params.insert(
                param_name(i, "weight"),
                Tensor::randn(&[w, prev, 3, 3], (2.0 / fan_in).sqrt(), &mut rng),
            );
            params.insert(param_name(i, "bias"), Tensor::zeros(&[w]));
            layers.push(ConvLayer {
                in_channels: prev,
                out_channels: w,
                kernel: 3,
                pool: i + 1 < widths.len(),
            });
            prev = w;
        }
        let limit = (6.0 / (prev + NUM_CLASSES) as f64).sqrt();
        params.insert("fc.weight", Tensor::uniform(&[prev, NUM_CLASSES], limit, &mut rng));
        params.insert("fc.bias", Tensor::zeros(&[NUM_CLASSES]));
        Ok(Self {
            architecture: Architecture::SmallConv,
            layers,
            params,
            frozen_prefix: Vec::new(),
            seed,
        })
    }

    /// Wrap an existing parameter set. `layers` is inferred from tensor shapes
    /// (pooling after every block but the last) when not given.
    pub fn from_params(
        architecture: Architecture,
        params: Params,
        layers: Option<Vec<ConvLayer>>,
        frozen_prefix: Vec<String>,
        seed: u64,
    ) -> Result<Self> {
        let layers = match layers {
            Some(l) => l,
            None => infer_layers(&params)?,
        };
        let state = Self {
            architecture,
            layers,
            params,
            frozen_prefix,
            seed,
        };
        state.validate_params()?;
        Ok(state)
    }

    fn validate_params(&self) -> Result<()> {
        let expect = |name: &str, shape: &[usize]| -> Result<()> {
            let t = self
                .params
                .get(name)
                .ok_or_else(|| Error::Load(format!("missing parameter {name}")))?;
            if t.shape() != shape {
                return Err(Error::Load(format!(
                    "parameter {name} has shape {:?}, architecture expects {shape:?}",
                    t.shape()
                )));
            }
            Ok(())
        };
        let mut prev = None;
        for (i, l) in self.layers.iter().enumerate() {
            if l.kernel % 2 == 0 {
                return Err(Error::Load(format!("conv{i} kernel {} must be odd", l.kernel)));
            }
            if let Some(p) = prev {
                if p != l.in_channels {
                    return Err(Error::Load(format!(
                        "conv{i} expects {} input channels, previous block emits {p}",
                        l.in_channels
                    )));
                }
            }
            expect(
                &param_name(i, "weight"),
                &[l.out_channels, l.in_channels, l.kernel, l.kernel],
            )?;
            expect(&param_name(i, "bias"), &[l.out_channels])?;
            prev = Some(l.out_channels);
        }
        let d = self.feature_dim();
        expect("fc.weight", &[d, NUM_CLASSES])?;
        expect("fc.bias", &[NUM_CLASSES])?;
        let expected = 2 * self.layers.len() + 2;
        if self.params.len() != expected {
            return Err(Error::Load(format!(
                "architecture has {expected} tensors, parameter set has {}",
                self.params.len()
            )));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Output width of the final conv block (0 for a conv-less network).
    pub fn feature_dim(&self) -> usize {
        self.layers
            .last()
            .map(|l| l.out_channels)
            .unwrap_or_else(|| self.params.get("fc.weight").map_or(0, |w| w.dim(0)))
    }

    pub fn input_channels(&self) -> Option<usize> {
        self.layers.first().map(|l| l.in_channels)
    }

    pub fn frozen_prefix(&self) -> &[String] {
        &self.frozen_prefix
    }

    pub fn with_frozen_prefix(mut self, prefixes: Vec<String>) -> Self {
        self.frozen_prefix = prefixes;
        self
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen_prefix.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Spatial reduction factor of the final block.
    pub fn downsample(&self) -> usize {
        1 << self.layers.iter().filter(|l| l.pool).count()
    }

    pub fn check_frames(&self, frames: &[&FrameTensor]) -> Result<()> {
        let first = frames
            .first()
            .ok_or_else(|| Error::validation("no frames given to the backbone"))?;
        let (h, w, c) = first.shape();
        if frames.iter().any(|f| f.shape() != (h, w, c)) {
            return Err(Error::validation("frames must share one shape"));
        }
        if let Some(expected) = self.input_channels() {
            if c != expected {
                return Err(Error::validation(format!(
                    "backbone expects {expected}-channel frames, got {c}"
                )));
            }
        }
        let down = self.downsample();
        if h < down || w < down {
            return Err(Error::validation(format!(
                "frames of {h}x{w} are smaller than the backbone's downsampling factor {down}"
            )));
        }
        Ok(())
    }

    pub(crate) fn forward(&self, g: &mut Graph, p: &Bound, input: Var) -> Forward {
        self.forward_from(g, p, input, 0)
    }

    /// Run blocks `start..` on `input`, which must be the input of block `start`.
    pub(crate) fn forward_from(&self, g: &mut Graph, p: &Bound, input: Var, start: usize) -> Forward {
        let mut x = input;
        let mut activations = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate().skip(start) {
            let conv = g.conv2d(
                x,
                p.var(&param_name(i, "weight")),
                p.var(&param_name(i, "bias")),
                1,
                l.kernel / 2,
            );
            let act = g.relu(conv);
            activations.push(act);
            x = if l.pool { g.max_pool2d(act, 2) } else { act };
        }
        let features = g.global_avg_pool(x);
        let logits = g.linear(features, p.var("fc.weight"), p.var("fc.bias"));
        Forward {
            activations,
            features,
            logits,
        }
    }

    fn infer(&self, frames: &[&FrameTensor], pick: impl Fn(&Forward) -> Var) -> Result<Tensor> {
        self.check_frames(frames)?;
        let mut rows = Vec::new();
        let mut width = 0;
        for chunk in frames.chunks(INFERENCE_CHUNK) {
            let mut g = Graph::new();
            let p = self.params.bind_with(&mut g, |_| false);
            let x = g.constant(frames_to_batch(chunk)?);
            let fwd = self.forward(&mut g, &p, x);
            let out = g.value(pick(&fwd));
            width = out.dim(1);
            rows.extend_from_slice(out.data());
        }
        Ok(Tensor::new(vec![frames.len(), width], rows))
    }

    /// `[T, feature_dim]` features of an ordered frame list.
    pub fn extract_features(&self, frames: &[FrameTensor]) -> Result<Tensor> {
        let refs: Vec<&FrameTensor> = frames.iter().collect();
        self.infer(&refs, |f| f.features)
    }

    /// `[N, 2]` image-classification logits.
    pub fn image_logits(&self, frames: &[FrameTensor]) -> Result<Tensor> {
        let refs: Vec<&FrameTensor> = frames.iter().collect();
        self.infer(&refs, |f| f.logits)
    }

    /// Logits computed from a captured post-ReLU activation of block `layer`
    /// (shape `[1, C, H, W]`), skipping everything before it.
    pub fn logits_from_activation(&self, layer: usize, activation: &Tensor) -> Result<Tensor> {
        if layer >= self.layers.len() {
            return Err(Error::validation(format!("no conv block {layer}")));
        }
        let mut g = Graph::new();
        let p = self.params.bind_with(&mut g, |_| false);
        let a = g.constant(activation.clone());
        let x = if self.layers[layer].pool {
            g.max_pool2d(a, 2)
        } else {
            a
        };
        let fwd = self.forward_from(&mut g, &p, x, layer + 1);
        Ok(g.value(fwd.logits).clone())
    }

    pub fn sidecar(&self, history: Option<TrainingHistory>) -> BackboneSidecar {
        BackboneSidecar {
            architecture: self.architecture,
            feature_dim: self.feature_dim(),
            frozen_prefix: self.frozen_prefix.clone(),
            seed: self.seed,
            layers: self.layers.clone(),
            history,
        }
    }

    /// Write `<stem>.safetensors` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str, history: Option<TrainingHistory>) -> Result<()> {
        save_params(&dir.join(format!("{stem}.safetensors")), &self.params)?;
        write_json(&dir.join(format!("{stem}.json")), &self.sidecar(history))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<(Self, BackboneSidecar)> {
        let sidecar: BackboneSidecar = read_json(&dir.join(format!("{stem}.json")))?;
        let params = load_params(&dir.join(format!("{stem}.safetensors")))?;
        let state = Self::from_params(
            sidecar.architecture,
            params,
            Some(sidecar.layers.clone()),
            sidecar.frozen_prefix.clone(),
            sidecar.seed,
        )?;
        if state.feature_dim() != sidecar.feature_dim {
            return Err(Error::Load(format!(
                "sidecar feature_dim {} disagrees with parameters ({})",
                sidecar.feature_dim,
                state.feature_dim()
            )));
        }
        Ok((state, sidecar))
    }

    /// Import an externally produced parameter file; the layer stack is read
    /// from an optional `.json` sidecar next to it or inferred from shapes.
    pub fn import(path: &Path) -> Result<Self> {
        let params = load_params(path)?;
        let sidecar_path: PathBuf = path.with_extension("json");
        let layers = if sidecar_path.is_file() {
            Some(read_json::<BackboneSidecar>(&sidecar_path)?.layers)
        } else {
            None
        };
        Self::from_params(Architecture::ImportedPretrained, params, layers, Vec::new(), 0)
    }
}

fn infer_layers(params: &Params) -> Result<Vec<ConvLayer>> {
    let mut layers = Vec::new();
    while let Some(w) = params.get(&param_name(layers.len(), "weight")) {
        if w.rank() != 4 || w.dim(2) != w.dim(3) {
            return Err(Error::Load(format!(
                "conv{} weight has shape {:?}, expected [out, in, k, k]",
                layers.len(),
                w.shape()
            )));
        }
        layers.push(ConvLayer {
            in_channels: w.dim(1),
            out_channels: w.dim(0),
            kernel: w.dim(2),
            pool: true,
        });
    }
    if let Some(last) = layers.last_mut() {
        last.pool = false;
    }
    Ok(layers)
}

/// Target parameters start as an exact copy of the source parameters.
pub fn init_from_pretrained(source: &BackboneState) -> Result<BackboneState> {
    source.validate_params()?;
    Ok(source.clone())
}

#[derive(Clone, Debug)]
pub struct FinetuneResult {
    pub state: BackboneState,
    pub history: TrainingHistory,
    /// Accumulated update: `state.params - initial.params`, entry by entry.
    pub delta: Params,
}

pub(crate) fn argmax_correct(logits: &Tensor, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| {
            let row = logits.row(*i);
            let pred = if row[1] >= row[0] { 1 } else { 0 };
            pred == y
        })
        .count()
}

/// Cross-entropy fine-tuning on augmented labeled images with early stopping.
pub fn finetune_backbone(
    state: &BackboneState,
    train: &[(FrameTensor, Label)],
    val: &[(FrameTensor, Label)],
    policy: &AugmentPolicy,
    cfg: &TrainConfig,
) -> Result<FinetuneResult> {
    cfg.validate()?;
    policy.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::validation("fine-tuning needs non-empty train and val sets"));
    }
    let all: Vec<&FrameTensor> = train.iter().chain(val).map(|(f, _)| f).collect();
    state.check_frames(&all)?;

    let val_frames: Vec<&FrameTensor> = val.iter().map(|(f, _)| f).collect();
    let val_labels: Vec<usize> = val.iter().map(|(_, l)| l.index()).collect();
    let trainable = |name: &str| !state.is_frozen(name);

    let outcome = run_training(
        state.params.clone(),
        trainable,
        train.len(),
        cfg,
        |params, batch, seed| {
            let frames: Vec<FrameTensor> = batch.iter().map(|&i| train[i].0.clone()).collect();
            let labels: Vec<Label> = batch.iter().map(|&i| train[i].1).collect();
            let (aug, labels) = augment_batch(&frames, &labels, policy, seed)?;
            let targets: Vec<usize> = labels.iter().map(|l| l.index()).collect();
            let refs: Vec<&FrameTensor> = aug.iter().collect();
            let mut g = Graph::new();
            let p = params.bind_with(&mut g, trainable);
            let x = g.constant(frames_to_batch(&refs)?);
            let fwd = state.forward(&mut g, &p, x);
            let loss = g.cross_entropy(fwd.logits, &targets);
            let correct = argmax_correct(g.value(fwd.logits), &targets);
            let grads = p.grads(&g.backward(loss));
            Ok(BatchOutcome {
                loss: g.value(loss).item(),
                correct: Some(correct),
                grads,
            })
        },
        |params| {
            let probe = BackboneState {
                params: params.clone(),
                ..state.clone()
            };
            let mut loss = 0.0;
            let mut correct = 0;
            for (chunk, labels) in val_frames
                .chunks(INFERENCE_CHUNK)
                .zip(val_labels.chunks(INFERENCE_CHUNK))
            {
                let logits = probe.infer(chunk, |f| f.logits)?;
                let mut g = Graph::new();
                let l = g.constant(logits.clone());
                let ce = g.cross_entropy(l, labels);
                loss += g.value(ce).item() * labels.len() as f64;
                correct += argmax_correct(&logits, labels);
            }
            Ok(EvalOutcome {
                loss: loss / val_labels.len() as f64,
                accuracy: Some(correct as f64 / val_labels.len() as f64),
            })
        },
    )?;
    Ok(FinetuneResult {
        state: BackboneState {
            params: outcome.params,
            ..state.clone()
        },
        history: outcome.history,
        delta: outcome.delta,
    })
}

/// Mean image cross-entropy of `params` (laid out like `state`) and its
/// gradient, without augmentation. Exposed for finite-difference checks.
pub fn image_loss_and_grads(
    state: &BackboneState,
    params: &Params,
    frames: &[FrameTensor],
    labels: &[Label],
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let refs: Vec<&FrameTensor> = frames.iter().collect();
    state.check_frames(&refs)?;
    if frames.len() != labels.len() {
        return Err(Error::validation("one label per frame required"));
    }
    let targets: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let x = g.constant(frames_to_batch(&refs)?);
    let fwd = state.forward(&mut g, &p, x);
    let loss = g.cross_entropy(fwd.logits, &targets);
    let grads = p.grads(&g.backward(loss));
    Ok((g.value(loss).item(), grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(seed: u64) -> FrameTensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FrameTensor::from_fn(12, 12, 3, |_, _, _| rng.gen::<f64>())
    }

    #[test]
    fn feature_shapes_and_determinism() {
        let b = BackboneState::small_conv(3, &[4, 6], 1).unwrap();
        assert_eq!(b.feature_dim(), 6);
        let f = frame(0);
        let one = b.extract_features(std::slice::from_ref(&f)).unwrap();
        assert_eq!(one.shape(), &[1, 6]);
        let two = b.extract_features(&[f.clone(), f.clone()]).unwrap();
        assert_eq!(two.row(0), two.row(1));
        assert_eq!(two.row(0), one.row(0));
        assert_eq!(b.extract_features(&[f.clone(), f]).unwrap(), two);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let b = BackboneState::small_conv(3, &[4], 1).unwrap();
        let gray = FrameTensor::filled(8, 8, 1, 0.5);
        assert!(matches!(b.extract_features(&[gray]), Err(Error::Validation(_))));
        assert!(b.extract_features(&[]).is_err());
    }

    #[test]
    fn init_from_pretrained_copies_parameters() {
        let src = BackboneState::small_conv(3, &[4, 4], 9).unwrap();
        let dst = init_from_pretrained(&src).unwrap();
        assert_eq!(dst.params(), src.params());
        assert_eq!(dst.feature_dim(), src.feature_dim());
        let f = frame(3);
        assert_eq!(
            dst.extract_features(std::slice::from_ref(&f)).unwrap(),
            src.extract_features(&[f]).unwrap()
        );
    }

    #[test]
    fn shape_mismatch_against_architecture_is_a_load_error() {
        let src = BackboneState::small_conv(3, &[4, 4], 9).unwrap();
        let mut params = src.params().clone();
        params.insert("fc.weight", Tensor::zeros(&[5, 2]));
        let err = BackboneState::from_params(
            Architecture::SmallConv,
            params,
            Some(src.layers().to_vec()),
            vec![],
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Load(_)));
    }

    #[test]
    fn checkpoint_round_trip_and_import() {
        let dir = tempfile::tempdir().unwrap();
        let src = BackboneState::small_conv(3, &[4, 5, 6], 2)
            .unwrap()
            .with_frozen_prefix(vec!["conv0".into()]);
        src.save(dir.path(), "backbone", None).unwrap();
        let (loaded, sidecar) = BackboneState::load(dir.path(), "backbone").unwrap();
        assert_eq!(loaded, src);
        assert_eq!(sidecar.feature_dim, 6);

        // import infers the same layer stack from shapes alone
        save_params(&dir.path().join("ext.safetensors"), src.params()).unwrap();
        let imported = BackboneState::import(&dir.path().join("ext.safetensors")).unwrap();
        assert_eq!(imported.architecture(), Architecture::ImportedPretrained);
        assert_eq!(imported.layers(), src.layers());
        assert_eq!(imported.params(), src.params());
    }

    #[test]
    fn logits_from_captured_activation_match_full_forward() {
        let b = BackboneState::small_conv(3, &[3, 4, 5], 4).unwrap();
        let f = frame(8);
        let mut g = Graph::new();
        let p = b.params().bind_with(&mut g, |_| false);
        let x = g.constant(frames_to_batch(&[&f]).unwrap());
        let fwd = b.forward(&mut g, &p, x);
        let full = g.value(fwd.logits).clone();
        for layer in 0..3 {
            let a = g.value(fwd.activations[layer]).clone();
            let again = b.logits_from_activation(layer, &a).unwrap();
            for (x, y) in again.data().iter().zip(full.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
