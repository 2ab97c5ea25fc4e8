//! Define-by-run tape. Every op appends a node holding its forward value;
//! [`Graph::backward`] walks the tape in reverse and accumulates adjoints for
//! every node that transitively depends on a parameter.

use rayon::prelude::*;

use crate::tensor::{gemm, gemm_at, gemm_bt, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    Gather { x: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor },
    BceWithLogits { logits: Var, targets: Tensor, weights: Tensor },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Div(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// `x[N,M] + b[M]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(b);
        assert_eq!(xv.rank(), 2, "add_row expects a matrix");
        let cols = xv.dim(1);
        assert_eq!(bv.numel(), cols, "add_row bias length");
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let rg = self.rg(&[x, b]);
        self.push(out, Op::AddRow(x, b), rg)
    }

    /// `x[N,M] * s[M]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Var {
        let xv = self.value(x);
        let sv = self.value(s);
        assert_eq!(xv.rank(), 2, "mul_row expects a matrix");
        let cols = xv.dim(1);
        assert_eq!(sv.numel(), cols, "mul_row scale length");
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, ss) in row.iter_mut().zip(sv.data()) {
                *o *= ss;
            }
        }
        let rg = self.rg(&[x, s]);
        self.push(out, Op::MulRow(x, s), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `x W + b` for `x[N,in]`, `W[in,out]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), f64::min);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Minimum(a, b), rg)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), f64::max);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Maximum(a, b), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 2);
        let cols = xv.dim(1);
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.dim(0));
        for row in out.data_mut().chunks_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::LayerNormRows { x, inv_std }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape);
        let rg = self.rg(&[a]);
        self.push(value, Op::Reshape(a), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 2);
        let (rows, cols) = (xv.dim(0), xv.dim(1));
        assert!(start + len <= cols, "slice_cols out of range");
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.data()[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![rows, len], data), Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).dim(0);
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let v = self.value(*p);
                assert_eq!(v.rank(), 2);
                assert_eq!(v.dim(0), rows, "concat_cols row mismatch");
                v.dim(1)
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        self.push(Tensor::new(vec![rows, total], data), Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Slice along axis 0 for a tensor of any rank.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let inner: usize = xv.shape()[1..].iter().product();
        assert!(start + len <= xv.dim(0), "slice_rows out of range");
        let data = xv.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = xv.shape().to_vec();
        shape[0] = len;
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, data), Op::SliceRows { x, start }, rg)
    }

    /// Concatenate along axis 0 for tensors of any rank.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail = self.value(parts[0]).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = self.value(*p);
            assert_eq!(&v.shape()[1..], &tail[..], "concat_rows trailing shape mismatch");
            rows += v.dim(0);
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.rg(parts);
        self.push(Tensor::new(shape, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Column means: `[N,M] -> [1,M]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 2);
        let (rows, cols) = (xv.dim(0), xv.dim(1));
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![1, cols], out), Op::MeanRows(x), rg)
    }

    /// Pick flat elements of `x` into a vector `[idx.len()]`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = self.value(x);
        let data = idx.iter().map(|&i| xv.data()[i]).collect::<Vec<_>>();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![idx.len()], data), Op::Gather { x, idx }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Tensor::scalar(v.sum() / v.numel() as f64);
        let rg = self.rg(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// Mean softmax cross-entropy of `logits[N,C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rank(), 2);
        assert_eq!(lv.dim(0), targets.len(), "cross_entropy batch mismatch");
        let probs = softmax_rows(lv);
        let classes = lv.dim(1);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(n, &t)| {
                assert!(t < classes, "target {t} out of range");
                -log_softmax_at(lv.row(n), t)
            })
            .sum::<f64>()
            / targets.len() as f64;
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Weighted sum of binary cross-entropy terms on raw logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor, weights: Tensor) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.numel(), targets.numel());
        assert_eq!(lv.numel(), weights.numel());
        let loss = lv
            .data()
            .iter()
            .zip(targets.data())
            .zip(weights.data())
            .map(|((&z, &t), &w)| w * (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()))
            .sum::<f64>();
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets,
                weights,
            },
            rg,
        )
    }

    /// 2-D convolution: `x[N,C,H,W]`, `w[O,C,K,K]`, `b[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let value = conv_forward(self.value(x), self.value(w), self.value(b), stride, pad);
        let rg = self.rg(&[x, w, b]);
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        )
    }

    /// Non-overlapping `k x k` max pooling on `[N,C,H,W]`.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 4);
        let (n, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (ho, wo) = (h / k, w / k);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        let d = xv.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * k * w + ox * k;
                    for ky in 0..k {
                        for kx in 0..k {
                            let i = base + (oy * k + ky) * w + ox * k + kx;
                            if d[i] > d[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(vec![n, c, ho, wo], out),
            Op::MaxPool2d { x, argmax },
            rg,
        )
    }

    /// Spatial mean: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 4);
        let (n, c) = (xv.dim(0), xv.dim(1));
        let hw = xv.dim(2) * xv.dim(3);
        let out = xv
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![n, c], out), Op::GlobalAvgPool(x), rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0]));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.wants(*a) {
                    self.acc(grads, *a, g.zip_map(bv, |x, y| x / y));
                }
                if self.wants(*b) {
                    let av = self.value(*a);
                    let mut t = g.zip_map(av, |x, y| x * y);
                    for (v, d) in t.data_mut().iter_mut().zip(bv.data()) {
                        *v = -*v / (d * d);
                    }
                    self.acc(grads, *b, t);
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.map(|v| v * s)),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::AddRow(x, b) => {
                self.acc(grads, *x, g.clone());
                if self.wants(*b) {
                    let cols = g.dim(1);
                    let mut gb = vec![0.0; cols];
                    for row in g.data().chunks(cols) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.acc(grads, *b, Tensor::new(shape, gb));
                }
            }
            Op::MulRow(x, s) => {
                let cols = g.dim(1);
                let sv = self.value(*s);
                if self.wants(*x) {
                    let mut gx = g.clone();
                    for row in gx.data_mut().chunks_mut(cols) {
                        for (o, ss) in row.iter_mut().zip(sv.data()) {
                            *o *= ss;
                        }
                    }
                    self.acc(grads, *x, gx);
                }
                if self.wants(*s) {
                    let xv = self.value(*x);
                    let mut gs = vec![0.0; cols];
                    for (grow, xrow) in g.data().chunks(cols).zip(xv.data().chunks(cols)) {
                        for ((o, gg), xx) in gs.iter_mut().zip(grow).zip(xrow) {
                            *o += gg * xx;
                        }
                    }
                    self.acc(grads, *s, Tensor::new(sv.shape().to_vec(), gs));
                }
            }
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (n, k) = (av.dim(0), av.dim(1));
                let m = bv.dim(1);
                if self.wants(*a) {
                    let mut ga = vec![0.0; n * k];
                    gemm_bt(g.data(), bv.data(), &mut ga, n, m, k);
                    self.acc(grads, *a, Tensor::new(vec![n, k], ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * m];
                    gemm_at(av.data(), g.data(), &mut gb, k, n, m);
                    self.acc(grads, *b, Tensor::new(vec![k, m], gb));
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::Sigmoid(a) => {
                let t = g.zip_map(&node.value, |gg, y| gg * y * (1.0 - y));
                self.acc(grads, *a, t);
            }
            Op::Tanh(a) => {
                let t = g.zip_map(&node.value, |gg, y| gg * (1.0 - y * y));
                self.acc(grads, *a, t);
            }
            Op::Relu(a) => {
                let t = g.zip_map(self.value(*a), |gg, x| if x > 0.0 { gg } else { 0.0 });
                self.acc(grads, *a, t);
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let pick_a = matches!(node.op, Op::Minimum(..));
                let av = self.value(*a);
                let bv = self.value(*b);
                let mut ga = g.clone();
                let mut gb = g.clone();
                for (i, (x, y)) in av.data().iter().zip(bv.data()).enumerate() {
                    let a_wins = if pick_a { x <= y } else { x >= y };
                    if a_wins {
                        gb.data_mut()[i] = 0.0;
                    } else {
                        ga.data_mut()[i] = 0.0;
                    }
                }
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::SoftmaxRows(a) => {
                let cols = g.dim(1);
                let mut t = g.clone();
                for (trow, yrow) in t.data_mut().chunks_mut(cols).zip(node.value.data().chunks(cols)) {
                    let dot: f64 = trow.iter().zip(yrow).map(|(gg, y)| gg * y).sum();
                    for (tt, y) in trow.iter_mut().zip(yrow) {
                        *tt = y * (*tt - dot);
                    }
                }
                self.acc(grads, *a, t);
            }
            Op::LayerNormRows { x, inv_std } => {
                let cols = g.dim(1);
                let mut t = g.clone();
                for ((trow, xhat), is) in t
                    .data_mut()
                    .chunks_mut(cols)
                    .zip(node.value.data().chunks(cols))
                    .zip(inv_std)
                {
                    let mean_g = trow.iter().sum::<f64>() / cols as f64;
                    let mean_gx =
                        trow.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for (tt, xh) in trow.iter_mut().zip(xhat) {
                        *tt = is * (*tt - mean_g - xh * mean_gx);
                    }
                }
                self.acc(grads, *x, t);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.acc(grads, *a, g.clone().reshape(&shape));
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (rows, cols) = (xv.dim(0), xv.dim(1));
                let len = g.dim(1);
                let mut t = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    t.data_mut()[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                self.acc(grads, *x, t);
            }
            Op::ConcatCols(parts) => {
                let rows = g.dim(0);
                let total = g.dim(1);
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).dim(1);
                    if self.wants(*p) {
                        let mut data = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            data.extend_from_slice(
                                &g.data()[r * total + offset..r * total + offset + w],
                            );
                        }
                        self.acc(grads, *p, Tensor::new(vec![rows, w], data));
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let inner: usize = xv.shape()[1..].iter().product();
                let mut t = Tensor::zeros(xv.shape());
                t.data_mut()[start * inner..start * inner + g.numel()].copy_from_slice(g.data());
                self.acc(grads, *x, t);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let n = pv.numel();
                    if self.wants(*p) {
                        let data = g.data()[offset..offset + n].to_vec();
                        self.acc(grads, *p, Tensor::new(pv.shape().to_vec(), data));
                    }
                    offset += n;
                }
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let rows = xv.dim(0);
                let mut t = Tensor::zeros(xv.shape());
                let cols = xv.dim(1);
                for row in t.data_mut().chunks_mut(cols) {
                    for (o, gg) in row.iter_mut().zip(g.data()) {
                        *o = gg / rows as f64;
                    }
                }
                self.acc(grads, *x, t);
            }
            Op::Gather { x, idx } => {
                let mut t = Tensor::zeros(self.value(*x).shape());
                for (p, &i) in idx.iter().enumerate() {
                    t.data_mut()[i] += g.data()[p];
                }
                self.acc(grads, *x, t);
            }
            Op::Sum(a) => {
                let gg = g.item();
                self.acc(grads, *a, Tensor::full(self.value(*a).shape(), gg));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let gg = g.item() / av.numel() as f64;
                self.acc(grads, *a, Tensor::full(av.shape(), gg));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let gg = g.item() / targets.len() as f64;
                let classes = probs.dim(1);
                let mut t = probs.clone();
                for (n, &target) in targets.iter().enumerate() {
                    t.data_mut()[n * classes + target] -= 1.0;
                }
                t.data_mut().iter_mut().for_each(|v| *v *= gg);
                self.acc(grads, *logits, t);
            }
            Op::BceWithLogits {
                logits,
                targets,
                weights,
            } => {
                let gg = g.item();
                let lv = self.value(*logits);
                let data = lv
                    .data()
                    .iter()
                    .zip(targets.data())
                    .zip(weights.data())
                    .map(|((&z, &t), &w)| gg * w * (sigmoid(z) - t))
                    .collect();
                self.acc(grads, *logits, Tensor::new(lv.shape().to_vec(), data));
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (gx, gw, gb) = conv_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(gx) = gx {
                    self.acc(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.acc(grads, *w, gw);
                }
                if self.wants(*b) {
                    self.acc(grads, *b, gb);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut t = Tensor::zeros(self.value(*x).shape());
                for (gg, &i) in g.data().iter().zip(argmax) {
                    t.data_mut()[i] += gg;
                }
                self.acc(grads, *x, t);
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                let hw = xv.dim(2) * xv.dim(3);
                let mut t = Tensor::zeros(xv.shape());
                for (plane, gg) in t.data_mut().chunks_mut(hw).zip(g.data()) {
                    plane.iter_mut().for_each(|v| *v = gg / hw as f64);
                }
                self.acc(grads, *x, t);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[idx] - lse
}

pub fn softmax_rows(t: &Tensor) -> Tensor {
    assert_eq!(t.rank(), 2, "softmax_rows expects a matrix");
    let cols = t.dim(1);
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Self {
        assert_eq!(x.rank(), 4, "conv2d input must be [N,C,H,W]");
        assert_eq!(w.rank(), 4, "conv2d weight must be [O,C,K,K]");
        assert_eq!(x.dim(1), w.dim(1), "conv2d channel mismatch");
        let (h, wd, k) = (x.dim(2), x.dim(3), w.dim(2));
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d kernel larger than input");
        Self {
            c: x.dim(1),
            h,
            w: wd,
            k,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
            stride,
            pad,
        }
    }

    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn spatial(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, img: &[f64]) -> Vec<f64> {
        let sp = self.spatial();
        let mut cols = vec![0.0; self.patch() * sp];
        for c in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * sp..(row + 1) * sp];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            dst[oy * self.wo + ox] =
                                img[(c * self.h + iy as usize) * self.w + ix as usize];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let sp = self.spatial();
        for c in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * sp..(row + 1) * sp];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            img[(c * self.h + iy as usize) * self.w + ix as usize] +=
                                src[oy * self.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let geom = ConvGeom::new(x, w, stride, pad);
    let (n, o) = (x.dim(0), w.dim(0));
    assert_eq!(b.numel(), o, "conv2d bias length");
    let img_len = geom.c * geom.h * geom.w;
    let sp = geom.spatial();
    let per_sample: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let cols = geom.im2col(&x.data()[i * img_len..(i + 1) * img_len]);
            let mut out = vec![0.0; o * sp];
            for (oc, chunk) in out.chunks_mut(sp).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b.data()[oc]);
            }
            gemm(w.data(), &cols, &mut out, o, geom.patch(), sp);
            out
        })
        .collect();
    Tensor::new(vec![n, o, geom.ho, geom.wo], per_sample.concat())
}

fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
    want_x: bool,
    want_w: bool,
) -> (Option<Tensor>, Option<Tensor>, Tensor) {
    let geom = ConvGeom::new(x, w, stride, pad);
    let (n, o) = (x.dim(0), w.dim(0));
    let img_len = geom.c * geom.h * geom.w;
    let sp = geom.spatial();
    let patch = geom.patch();

    let per_sample: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let gi = &g.data()[i * o * sp..(i + 1) * o * sp];
            let gw = want_w.then(|| {
                let cols = geom.im2col(&x.data()[i * img_len..(i + 1) * img_len]);
                let mut gw = vec![0.0; o * patch];
                gemm_bt(gi, &cols, &mut gw, o, sp, patch);
                gw
            });
            let gx = want_x.then(|| {
                let mut dcols = vec![0.0; patch * sp];
                gemm_at(w.data(), gi, &mut dcols, patch, o, sp);
                let mut img = vec![0.0; img_len];
                geom.col2im(&dcols, &mut img);
                img
            });
            (gx, gw)
        })
        .collect();

    let mut gb = vec![0.0; o];
    for i in 0..n {
        for (oc, acc) in gb.iter_mut().enumerate() {
            let start = (i * o + oc) * sp;
            *acc += g.data()[start..start + sp].iter().sum::<f64>();
        }
    }

    let mut gx_all = want_x.then(|| Vec::with_capacity(n * img_len));
    let mut gw_all = want_w.then(|| vec![0.0; o * patch]);
    for (gx, gw) in per_sample {
        if let (Some(all), Some(gx)) = (gx_all.as_mut(), gx) {
            all.extend(gx);
        }
        if let (Some(all), Some(gw)) = (gw_all.as_mut(), gw) {
            for (a, v) in all.iter_mut().zip(gw) {
                *a += v;
            }
        }
    }
    (
        gx_all.map(|d| Tensor::new(x.shape().to_vec(), d)),
        gw_all.map(|d| Tensor::new(w.shape().to_vec(), d)),
        Tensor::new(vec![o], gb),
    )
}
