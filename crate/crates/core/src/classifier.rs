//! Stage-1 video classifier: per-frame backbone features fed through a
//! sequence head (LSTM, GRU or Transformer encoder) and a two-way softmax.

use std::collections::BTreeMap;
use std::path::Path;

use gunsight_autograd::{softmax_rows, Bound, Graph, Params, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{argmax_correct, BackboneState, NUM_CLASSES};
use crate::checkpoint::{load_params, read_json, save_params, write_json};
use crate::dataset::{Label, VideoSample};
use crate::error::{Error, Result};
use crate::train::{dropout_mask, run_training, BatchOutcome, EvalOutcome, TrainConfig, TrainingHistory};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Lstm,
    Gru,
    Transformer,
}

impl HeadKind {
    pub const ALL: [HeadKind; 3] = [HeadKind::Lstm, HeadKind::Gru, HeadKind::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Lstm => "lstm",
            HeadKind::Gru => "gru",
            HeadKind::Transformer => "transformer",
        }
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub lstm_units: usize,
    pub gru_units: usize,
    /// Dropout after the recurrent block.
    pub recurrent_dropout: f64,
    pub tf_heads: usize,
    pub tf_model_dim: usize,
    pub tf_ffn_dim: usize,
    /// Dropout on the encoder sublayers and after the encoder block.
    pub tf_dropout: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            kind: HeadKind::Lstm,
            lstm_units: 512,
            gru_units: 256,
            recurrent_dropout: 0.5,
            tf_heads: 4,
            tf_model_dim: 256,
            tf_ffn_dim: 512,
            tf_dropout: 0.1,
        }
    }
}

impl HeadConfig {
    pub fn with_kind(kind: HeadKind) -> Self {
        Self {
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("lstm_units", self.lstm_units),
            ("gru_units", self.gru_units),
            ("tf_heads", self.tf_heads),
            ("tf_model_dim", self.tf_model_dim),
            ("tf_ffn_dim", self.tf_ffn_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::validation(format!("{name} must be positive")));
        }
        for (name, rate) in [
            ("recurrent_dropout", self.recurrent_dropout),
            ("tf_dropout", self.tf_dropout),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::validation(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.tf_model_dim % self.tf_heads != 0 {
            return Err(Error::validation(format!(
                "tf_model_dim {} is not divisible by tf_heads {}",
                self.tf_model_dim, self.tf_heads
            )));
        }
        Ok(())
    }

    /// Width of the pooled video embedding.
    pub fn embedding_dim(&self) -> usize {
        match self.kind {
            HeadKind::Lstm => self.lstm_units,
            HeadKind::Gru => self.gru_units,
            HeadKind::Transformer => self.tf_model_dim,
        }
    }

    fn output_dropout(&self) -> f64 {
        match self.kind {
            HeadKind::Lstm | HeadKind::Gru => self.recurrent_dropout,
            HeadKind::Transformer => self.tf_dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadState {
    config: HeadConfig,
    input_dim: usize,
    params: Params,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::uniform(&[rows, cols], limit, rng)
}

pub fn build_head(cfg: &HeadConfig, feature_dim: usize, seed: u64) -> Result<HeadState> {
    cfg.validate()?;
    if feature_dim == 0 {
        return Err(Error::validation("feature_dim must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::new();
    let d = feature_dim;
    match cfg.kind {
        HeadKind::Lstm => {
            let h = cfg.lstm_units;
            p.insert("lstm.w", glorot(&mut rng, d, 4 * h));
            p.insert("lstm.u", glorot(&mut rng, h, 4 * h));
            // gate order i, f, g, o; forget gate starts open
            let mut b = vec![0.0; 4 * h];
            b[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
            p.insert("lstm.b", Tensor::new(vec![4 * h], b));
        }
        HeadKind::Gru => {
            let h = cfg.gru_units;
            p.insert("gru.w", glorot(&mut rng, d, 3 * h));
            p.insert("gru.u", glorot(&mut rng, h, 3 * h));
            p.insert("gru.bw", Tensor::zeros(&[3 * h]));
            p.insert("gru.bu", Tensor::zeros(&[3 * h]));
        }
        HeadKind::Transformer => {
            let m = cfg.tf_model_dim;
            let f = cfg.tf_ffn_dim;
            p.insert("tf.proj.weight", glorot(&mut rng, d, m));
            p.insert("tf.proj.bias", Tensor::zeros(&[m]));
            for name in ["q", "k", "v", "o"] {
                p.insert(format!("tf.attn.{name}.weight"), glorot(&mut rng, m, m));
                p.insert(format!("tf.attn.{name}.bias"), Tensor::zeros(&[m]));
            }
            p.insert("tf.ffn1.weight", glorot(&mut rng, m, f));
            p.insert("tf.ffn1.bias", Tensor::zeros(&[f]));
            p.insert("tf.ffn2.weight", glorot(&mut rng, f, m));
            p.insert("tf.ffn2.bias", Tensor::zeros(&[m]));
            for ln in ["ln1", "ln2"] {
                p.insert(format!("tf.{ln}.gain"), Tensor::ones(&[m]));
                p.insert(format!("tf.{ln}.bias"), Tensor::zeros(&[m]));
            }
        }
    }
    let e = cfg.embedding_dim();
    p.insert("out.weight", glorot(&mut rng, e, NUM_CLASSES));
    p.insert("out.bias", Tensor::zeros(&[NUM_CLASSES]));
    Ok(HeadState {
        config: cfg.clone(),
        input_dim: feature_dim,
        params: p,
    })
}

/// `pe[t, 2i] = sin(t / 10000^(2i/m))`, `pe[t, 2i+1] = cos(...)`.
pub fn positional_encoding(t: usize, m: usize) -> Tensor {
    let mut data = vec![0.0; t * m];
    for pos in 0..t {
        for i in 0..m {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / m as f64);
            let angle = pos as f64 / rate;
            data[pos * m + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![t, m], data)
}

/// Dropout masks are drawn from this seed when training; `None` is inference.
#[derive(Clone, Copy, Debug)]
pub(crate) struct DropoutSeed(pub Option<u64>);

impl DropoutSeed {
    fn apply(&self, g: &mut Graph, x: Var, rate: f64, salt: u64) -> Var {
        match self.0 {
            Some(seed) if rate > 0.0 => {
                let mask = dropout_mask(g.shape(x), rate, seed.wrapping_mul(31).wrapping_add(salt));
                let m = g.constant(mask);
                g.mul(x, m)
            }
            _ => x,
        }
    }
}

impl HeadState {
    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn from_params(config: HeadConfig, input_dim: usize, params: Params) -> Result<Self> {
        let reference = build_head(&config, input_dim, 0)?;
        let consistent = reference.params.len() == params.len()
            && reference
                .params
                .iter()
                .all(|(n, t)| params.get(n).is_some_and(|p| p.shape() == t.shape()));
        if !consistent {
            return Err(Error::Load(format!(
                "head parameters do not match a {} head over {input_dim} features",
                config.kind
            )));
        }
        Ok(Self {
            config,
            input_dim,
            params,
        })
    }

    /// Logits `[1, 2]` for one feature sequence `x` of shape `[T, d]`.
    pub(crate) fn forward(&self, g: &mut Graph, p: &Bound, x: Var, dropout: DropoutSeed) -> Var {
        let emb = match self.config.kind {
            HeadKind::Lstm => self.lstm(g, p, x),
            HeadKind::Gru => self.gru(g, p, x),
            HeadKind::Transformer => self.transformer(g, p, x, dropout),
        };
        let emb = dropout.apply(g, emb, self.config.output_dropout(), 0);
        g.linear(emb, p.var("out.weight"), p.var("out.bias"))
    }

    fn lstm(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let hdim = self.config.lstm_units;
        let steps = g.shape(x)[0];
        let xz = g.linear(x, p.var("lstm.w"), p.var("lstm.b"));
        let mut h = g.constant(Tensor::zeros(&[1, hdim]));
        let mut c = g.constant(Tensor::zeros(&[1, hdim]));
        for t in 0..steps {
            let xt = g.slice_rows(xz, t, 1);
            let hu = g.matmul(h, p.var("lstm.u"));
            let z = g.add(xt, hu);
            let zi = g.slice_cols(z, 0, hdim);
            let i = g.sigmoid(zi);
            let zf = g.slice_cols(z, hdim, hdim);
            let f = g.sigmoid(zf);
            let zg = g.slice_cols(z, 2 * hdim, hdim);
            let cand = g.tanh(zg);
            let zo = g.slice_cols(z, 3 * hdim, hdim);
            let o = g.sigmoid(zo);
            let keep = g.mul(f, c);
            let write = g.mul(i, cand);
            c = g.add(keep, write);
            let tc = g.tanh(c);
            h = g.mul(o, tc);
        }
        h
    }

    fn gru(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let hdim = self.config.gru_units;
        let steps = g.shape(x)[0];
        let xz = g.linear(x, p.var("gru.w"), p.var("gru.bw"));
        let mut h = g.constant(Tensor::zeros(&[1, hdim]));
        for t in 0..steps {
            let xt = g.slice_rows(xz, t, 1);
            let hz = g.linear(h, p.var("gru.u"), p.var("gru.bu"));
            let (xr, hr) = (g.slice_cols(xt, 0, hdim), g.slice_cols(hz, 0, hdim));
            let (xu, hu) = (g.slice_cols(xt, hdim, hdim), g.slice_cols(hz, hdim, hdim));
            let (xn, hn) = (
                g.slice_cols(xt, 2 * hdim, hdim),
                g.slice_cols(hz, 2 * hdim, hdim),
            );
            let rs = g.add(xr, hr);
            let r = g.sigmoid(rs);
            let us = g.add(xu, hu);
            let u = g.sigmoid(us);
            let gated = g.mul(r, hn);
            let ns = g.add(xn, gated);
            let n = g.tanh(ns);
            // h' = (1 - u) * n + u * h = n + u * (h - n)
            let diff = g.sub(h, n);
            let carry = g.mul(u, diff);
            h = g.add(n, carry);
        }
        h
    }

    fn layer_norm(g: &mut Graph, p: &Bound, x: Var, name: &str) -> Var {
        let n = g.layer_norm_rows(x, LN_EPS);
        let s = g.mul_row(n, p.var(&format!("tf.{name}.gain")));
        g.add_row(s, p.var(&format!("tf.{name}.bias")))
    }

    fn transformer(&self, g: &mut Graph, p: &Bound, x: Var, dropout: DropoutSeed) -> Var {
        let m = self.config.tf_model_dim;
        let heads = self.config.tf_heads;
        let dh = m / heads;
        let rate = self.config.tf_dropout;
        let steps = g.shape(x)[0];

        let proj = g.linear(x, p.var("tf.proj.weight"), p.var("tf.proj.bias"));
        let pe = g.constant(positional_encoding(steps, m));
        let h0 = g.add(proj, pe);

        let lin = |g: &mut Graph, x: Var, name: &str| {
            g.linear(
                x,
                p.var(&format!("tf.attn.{name}.weight")),
                p.var(&format!("tf.attn.{name}.bias")),
            )
        };
        let q = lin(g, h0, "q");
        let k = lin(g, h0, "k");
        let v = lin(g, h0, "v");
        let mut per_head = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = g.slice_cols(q, hd * dh, dh);
            let kh = g.slice_cols(k, hd * dh, dh);
            let vh = g.slice_cols(v, hd * dh, dh);
            let kt = g.transpose(kh);
            let raw = g.matmul(qh, kt);
            let scores = g.scale(raw, 1.0 / (dh as f64).sqrt());
            let attn = g.softmax_rows(scores);
            per_head.push(g.matmul(attn, vh));
        }
        let joined = g.concat_cols(&per_head);
        let attn_out = lin(g, joined, "o");
        let attn_out = dropout.apply(g, attn_out, rate, 1);
        let res1 = g.add(h0, attn_out);
        let h1 = Self::layer_norm(g, p, res1, "ln1");

        let f1 = g.linear(h1, p.var("tf.ffn1.weight"), p.var("tf.ffn1.bias"));
        let f1 = g.relu(f1);
        let f2 = g.linear(f1, p.var("tf.ffn2.weight"), p.var("tf.ffn2.bias"));
        let f2 = dropout.apply(g, f2, rate, 2);
        let res2 = g.add(h1, f2);
        let h2 = Self::layer_norm(g, p, res2, "ln2");
        g.mean_rows(h2)
    }

    /// Inference-mode logits `[1, 2]` for a `[T, d]` feature sequence.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        if features.rank() != 2 || features.dim(1) != self.input_dim || features.dim(0) == 0 {
            return Err(Error::validation(format!(
                "head expects a non-empty [T, {}] feature sequence, got {:?}",
                self.input_dim,
                features.shape()
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind_with(&mut g, |_| false);
        let x = g.constant(features.clone());
        let out = self.forward(&mut g, &p, x, DropoutSeed(None));
        Ok(g.value(out).clone())
    }
}

/// Threshold rule: Gun iff `p_gun >= threshold`.
pub fn decide(p_gun: f64, threshold: f64) -> Label {
    if p_gun >= threshold {
        Label::Gun
    } else {
        Label::NoGun
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoPrediction {
    pub label: Label,
    pub p_gun: f64,
    pub p_no_gun: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    pub backbone: BackboneState,
    pub head: HeadState,
    pub decision_threshold: f64,
    pub frames_per_video: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierSidecar {
    pub head: HeadConfig,
    pub input_dim: usize,
    pub decision_threshold: f64,
    pub frames_per_video: usize,
    #[serde(default)]
    pub history: Option<TrainingHistory>,
}

impl ClassifierModel {
    pub fn new(
        backbone: BackboneState,
        head: HeadState,
        decision_threshold: f64,
        frames_per_video: usize,
    ) -> Result<Self> {
        if backbone.feature_dim() != head.input_dim() {
            return Err(Error::Config(format!(
                "backbone emits {} features, head expects {}",
                backbone.feature_dim(),
                head.input_dim()
            )));
        }
        if !(decision_threshold > 0.0 && decision_threshold < 1.0) {
            return Err(Error::validation("decision_threshold must lie in (0, 1)"));
        }
        if frames_per_video == 0 {
            return Err(Error::validation("frames_per_video must be positive"));
        }
        Ok(Self {
            backbone,
            head,
            decision_threshold,
            frames_per_video,
        })
    }

    fn check_sample(&self, sample: &VideoSample) -> Result<()> {
        if sample.len() != self.frames_per_video {
            return Err(Error::validation(format!(
                "video {} has {} frames, the classifier was built for {}",
                sample.id,
                sample.len(),
                self.frames_per_video
            )));
        }
        Ok(())
    }

    pub fn features(&self, sample: &VideoSample) -> Result<Tensor> {
        self.check_sample(sample)?;
        self.backbone.extract_features(&sample.frames)
    }

    /// `[p_no_gun, p_gun]` for a `[T, d]` feature sequence.
    pub fn probabilities(&self, features: &Tensor) -> Result<[f64; 2]> {
        let probs = softmax_rows(&self.head.logits(features)?);
        Ok([probs.data()[0], probs.data()[1]])
    }

    pub fn classify_video(&self, sample: &VideoSample) -> Result<VideoPrediction> {
        let [p_no_gun, p_gun] = self.probabilities(&self.features(sample)?)?;
        Ok(VideoPrediction {
            label: decide(p_gun, self.decision_threshold),
            p_gun,
            p_no_gun,
        })
    }

    pub fn sidecar(&self, history: Option<TrainingHistory>) -> ClassifierSidecar {
        ClassifierSidecar {
            head: self.head.config.clone(),
            input_dim: self.head.input_dim,
            decision_threshold: self.decision_threshold,
            frames_per_video: self.frames_per_video,
            history,
        }
    }

    /// Writes `backbone.*`, `head.safetensors` and `classifier.json` into `dir`.
    pub fn save(&self, dir: &Path, history: Option<TrainingHistory>) -> Result<()> {
        self.backbone.save(dir, "backbone", None)?;
        save_params(&dir.join("head.safetensors"), &self.head.params)?;
        write_json(&dir.join("classifier.json"), &self.sidecar(history))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let sidecar: ClassifierSidecar = read_json(&dir.join("classifier.json"))?;
        let (backbone, _) = BackboneState::load(dir, "backbone")?;
        let head = HeadState::from_params(
            sidecar.head,
            sidecar.input_dim,
            load_params(&dir.join("head.safetensors"))?,
        )?;
        Self::new(
            backbone,
            head,
            sidecar.decision_threshold,
            sidecar.frames_per_video,
        )
    }
}

/// Cross-entropy over a batch of precomputed feature sequences.
pub(crate) fn head_batch_loss(
    head: &HeadState,
    params: &Params,
    features: &[&Tensor],
    targets: &[usize],
    dropout_seed: Option<u64>,
) -> (Graph, Bound, Var, Var) {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let logits: Vec<Var> = features
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let x = g.constant((*f).clone());
            let seed = dropout_seed.map(|s| s.wrapping_add((i as u64) << 20));
            head.forward(&mut g, &p, x, DropoutSeed(seed))
        })
        .collect();
    let stacked = g.concat_rows(&logits);
    let loss = g.cross_entropy(stacked, targets);
    (g, p, stacked, loss)
}

/// Train the sequence head on frozen backbone features.
pub fn train_classifier(
    model: &ClassifierModel,
    train: &[VideoSample],
    val: &[VideoSample],
    cfg: &TrainConfig,
) -> Result<(ClassifierModel, TrainingHistory)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::validation("classifier training set is empty"));
    }
    if val.is_empty() {
        return Err(Error::validation("classifier validation set is empty"));
    }
    let featurize = |set: &[VideoSample]| -> Result<Vec<Tensor>> {
        set.par_iter().map(|s| model.features(s)).collect()
    };
    let train_x = featurize(train)?;
    let val_x = featurize(val)?;
    let train_y: Vec<usize> = train.iter().map(|s| s.label.index()).collect();
    let val_y: Vec<usize> = val.iter().map(|s| s.label.index()).collect();
    let val_refs: Vec<&Tensor> = val_x.iter().collect();
    let head = &model.head;

    let outcome = run_training(
        head.params.clone(),
        |_| true,
        train.len(),
        cfg,
        |params, batch, seed| {
            let feats: Vec<&Tensor> = batch.iter().map(|&i| &train_x[i]).collect();
            let targets: Vec<usize> = batch.iter().map(|&i| train_y[i]).collect();
            let (g, p, logits, loss) = head_batch_loss(head, params, &feats, &targets, Some(seed));
            let correct = argmax_correct(g.value(logits), &targets);
            let grads = p.grads(&g.backward(loss));
            Ok(BatchOutcome {
                loss: g.value(loss).item(),
                correct: Some(correct),
                grads,
            })
        },
        |params| {
            let (g, _, logits, loss) = head_batch_loss(head, params, &val_refs, &val_y, None);
            Ok(EvalOutcome {
                loss: g.value(loss).item(),
                accuracy: Some(argmax_correct(g.value(logits), &val_y) as f64 / val_y.len() as f64),
            })
        },
    )?;
    let trained = ClassifierModel {
        head: HeadState {
            params: outcome.params,
            ..head.clone()
        },
        ..model.clone()
    };
    Ok((trained, outcome.history))
}

/// Mean video cross-entropy of head `params` over precomputed `[T, d]`
/// feature sequences and its gradient, dropout off. Exposed for
/// finite-difference checks.
pub fn head_loss_and_grads(
    head: &HeadState,
    params: &Params,
    features: &[Tensor],
    labels: &[Label],
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::validation("one label per non-empty feature sequence required"));
    }
    if let Some(bad) = features.iter().find(|f| f.rank() != 2 || f.dim(1) != head.input_dim) {
        return Err(Error::validation(format!(
            "feature sequence {:?} does not match head input dim {}",
            bad.shape(),
            head.input_dim
        )));
    }
    let refs: Vec<&Tensor> = features.iter().collect();
    let targets: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    let (g, p, _, loss) = head_batch_loss(head, params, &refs, &targets, None);
    let grads = p.grads(&g.backward(loss));
    Ok((g.value(loss).item(), grads))
}
