//! Tape of recorded operations and the reverse sweep over it.

use super::kernels::{self, ConvDims, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Element type used inside convolution and dense GEMMs. Everything
/// else, including accumulation of gradients across batch items, is `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Clamp applied to probabilities before taking logarithms in [`Graph::bce`].
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        dims: ConvDims,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
        n: usize,
        f: usize,
        o: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Prelu(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Reshape(Var),
    ColumnsToBatch(Var),
    Upsample {
        x: Var,
        factor: (usize, usize),
    },
    Sum(Var),
    Mean(Var),
    WeightedSum(Var, Vec<f64>),
    Mse(Var, Var),
    Bce(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Batch-norm statistics source.
#[derive(Debug, Clone, Copy)]
pub enum BnStats<'a> {
    /// Normalise with the statistics of the current batch.
    Batch,
    /// Normalise with fixed running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel mean and biased variance of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// A single forward pass worth of recorded operations.
///
/// Nodes are appended in evaluation order, so walking them backwards is a
/// valid topological order for the reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
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
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that gradients flow into.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that gradients never reach.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the value of `v` into a new constant node.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`Graph::backward`] target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("gradient shape"))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let vx = self.value(x);
        let value = Tensor::new(vx.shape(), vx.data().iter().map(|&v| f(v)).collect()).expect("same shape");
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_map(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, Op::Scale(x, s), |v| v * s)
    }

    /// Sum of several same-shape nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::shape("add_all of no terms"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// 2-D cross-correlation on `[N, C, H, W]` with kernel `[O, C, kh, kw]`
    /// and optional bias `[O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        dilation: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(format!("conv2d expects 4-D input and kernel, got {xs:?} and {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(format!(
                "conv2d input has {} channels, kernel expects {}",
                xs[1], ws[1]
            )));
        }
        if stride.0 == 0 || stride.1 == 0 || dilation.0 == 0 || dilation.1 == 0 {
            return Err(Error::domain("stride and dilation must be at least 1"));
        }
        if ws[2] == 0 || ws[3] == 0 {
            return Err(Error::shape("empty kernel"));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape(format!("bias shape {:?}, expected [{}]", self.shape(b), ws[0])));
            }
        }
        let geom = ConvGeom {
            in_ch: ws[1],
            out_ch: ws[0],
            kernel: (ws[2], ws[3]),
            stride,
            dilation,
            padding,
        };
        let (oh, ow) = geom.output_size((xs[2], xs[3])).ok_or_else(|| {
            Error::shape(format!(
                "kernel {:?} with dilation {dilation:?} does not fit input {:?}",
                geom.kernel,
                &xs[2..]
            ))
        })?;
        let dims = ConvDims {
            batch: xs[0],
            h: xs[2],
            w: xs[3],
            oh,
            ow,
        };
        let bias = b.map(|b| self.value(b).data());
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let out = match self.precision {
            Precision::F64 => kernels::conv_forward::<f64>(xv, wv, bias, &geom, &dims),
            Precision::F32 => kernels::conv_forward::<f32>(xv, wv, bias, &geom, &dims),
        };
        let value = Tensor::new(&[xs[0], geom.out_ch, oh, ow], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv { x, w, b, geom, dims }, rg))
    }

    /// 1-D cross-correlation on `[N, C, L]` with kernel `[O, C, k]`.
    ///
    /// `same_padding` zero-pads by `dilation·(k-1)/2` on both sides.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        dilation: usize,
        same_padding: bool,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 {
            return Err(Error::shape(format!("conv1d expects 3-D input and kernel, got {xs:?} and {ws:?}")));
        }
        let pad = if same_padding { dilation * (ws[2] - 1) / 2 } else { 0 };
        let x4 = self.reshape(x, &[xs[0], xs[1], xs[2], 1])?;
        let w4 = self.reshape(w, &[ws[0], ws[1], ws[2], 1])?;
        let y = self.conv2d(x4, w4, b, (stride, 1), (dilation, 1), (pad, 0))?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, &[ys[0], ys[1], ys[2]])
    }

    /// `[N, F] · [O, F]ᵀ + [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.shape(b) != [ws[0]] {
            return Err(Error::shape(format!(
                "linear: input {xs:?}, weight {ws:?}, bias {:?}",
                self.shape(b)
            )));
        }
        let (n, f, o) = (xs[0], xs[1], ws[0]);
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let out = match self.precision {
            Precision::F64 => kernels::linear_forward::<f64>(xv, wv, bv, n, f, o),
            Precision::F32 => kernels::linear_forward::<f32>(xv, wv, bv, n, f, o),
        };
        let value = Tensor::new(&[n, o], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Linear { x, w, b, n, f, o }, rg))
    }

    /// Batch normalisation over every axis but axis 1.
    ///
    /// With [`BnStats::Batch`] the batch moments are returned so the caller
    /// can update running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape(format!("batch_norm needs at least 2 axes, got {xs:?}")));
        }
        let (n, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!("batch_norm affine parameters must have shape [{c}]")));
        }
        let xv = self.value(x).data();
        let count = (n * inner) as f64;
        let (mean, var, batch_stats) = match stats {
            BnStats::Batch => {
                if n < 2 {
                    return Err(Error::domain("batch_norm in training mode needs a batch of at least 2"));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for item in 0..n {
                        let off = (item * c + ch) * inner;
                        s += xv[off..off + inner].iter().sum::<f64>();
                    }
                    let m = s / count;
                    let mut ss = 0.0;
                    for item in 0..n {
                        let off = (item * c + ch) * inner;
                        ss += xv[off..off + inner].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = ss / count;
                }
                (mean, var, true)
            }
            BnStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("running statistics do not match channel count"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for item in 0..n {
            for ch in 0..c {
                let off = (item * c + ch) * inner;
                for i in off..off + inner {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let value = Tensor::new(&xs, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let var_node = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((var_node, batch_stats.then_some(BatchMoments { mean, var })))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.map(x, Op::LeakyRelu(x, slope), |v| if v > 0.0 { v } else { slope * v })
    }

    /// Leaky ReLU with a learned slope per channel (axis 1).
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(alpha) != [xs[1]] {
            return Err(Error::shape(format!(
                "prelu slope {:?} does not match channels of {xs:?}",
                self.shape(alpha)
            )));
        }
        let inner: usize = xs[2..].iter().product();
        let c = xs[1];
        let a = self.value(alpha).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if v > 0.0 { v } else { a[(i / inner) % c] * v })
            .collect();
        let value = Tensor::new(&xs, data)?;
        let rg = self.rg(x) || self.rg(alpha);
        Ok(self.push(value, Op::Prelu(x, alpha), rg))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Regroups `[N, C, H, W]` into `[N·W, C, H, 1]`, one batch entry per
    /// column, ordered by image then column.
    pub fn columns_to_batch(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape(format!("columns_to_batch expects 4-D input, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for (i, v) in src.iter().enumerate() {
            out[column_index(i, c, h, w)] = *v;
        }
        let value = Tensor::new(&[n * w, c, h, 1], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::ColumnsToBatch(x), rg))
    }

    /// Nearest-neighbour upsampling of `[N, C, H, W]` by integer factors.
    pub fn upsample_nearest(&mut self, x: Var, factor: (usize, usize)) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || factor.0 == 0 || factor.1 == 0 {
            return Err(Error::shape(format!("upsample expects 4-D input, got {xs:?}")));
        }
        let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (oh, ow) = (h * factor.0, w * factor.1);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(nc * oh * ow);
        for plane in 0..nc {
            for oy in 0..oh {
                let row = &src[(plane * h + oy / factor.0) * w..][..w];
                for ox in 0..ow {
                    out.push(row[ox / factor.1]);
                }
            }
        }
        let value = Tensor::new(&[xs[0], xs[1], oh, ow], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Upsample { x, factor }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// `Σ wᵢ xᵢ` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let v = self.value(x);
        if v.len() != weights.len() {
            return Err(Error::shape("weighted_sum weights do not match input length"));
        }
        let s = v.data().iter().zip(weights).map(|(a, b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(x, weights.to_vec()), rg))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let s = va.iter().zip(vb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / va.len() as f64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), rg))
    }

    /// Binary cross-entropy of probabilities against a constant label,
    /// averaged over all elements. Probabilities are clamped to
    /// `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce(&mut self, p: Var, target: f64) -> Var {
        let loss = bce_mean(self.value(p).data(), target);
        let rg = self.rg(p);
        self.push(Tensor::scalar(loss), Op::Bce(p, target), rg)
    }

    /// Reverse sweep from a scalar node. Clears gradients from any
    /// previous sweep first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &grad);
            self.nodes[i].grad = Some(grad);
            for (target, contribution) in contributions {
                let node = &mut self.nodes[target.0];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contribution) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    /// Gradients of node `i`'s inputs, given the gradient of its output.
    fn local_grads(&self, i: usize, gy: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(*a) {
                    out.push((*a, gy.to_vec()));
                }
                if want(*b) {
                    out.push((*b, gy.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    out.push((*a, gy.to_vec()));
                }
                if want(*b) {
                    out.push((*b, gy.iter().map(|g| -g).collect()));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    out.push((*a, gy.iter().zip(val(*b)).map(|(g, y)| g * y).collect()));
                }
                if want(*b) {
                    out.push((*b, gy.iter().zip(val(*a)).map(|(g, x)| g * x).collect()));
                }
            }
            Op::Scale(x, s) => out.push((*x, gy.iter().map(|g| g * s).collect())),
            Op::Conv { x, w, b, geom, dims } => {
                let need_dx = want(*x);
                let grads = match self.precision {
                    Precision::F64 => kernels::conv_backward::<f64>(val(*x), val(*w), gy, geom, dims, need_dx),
                    Precision::F32 => kernels::conv_backward::<f32>(val(*x), val(*w), gy, geom, dims, need_dx),
                };
                if let Some(dx) = grads.dx {
                    out.push((*x, dx));
                }
                if want(*w) {
                    out.push((*w, grads.dw));
                }
                if let Some(b) = b.filter(|b| want(*b)) {
                    out.push((b, grads.db));
                }
            }
            Op::Linear { x, w, b, n, f, o } => {
                let (xv, wv) = (val(*x), val(*w));
                let (dx, dw, db) = match self.precision {
                    Precision::F64 => kernels::linear_backward::<f64>(xv, wv, gy, *n, *f, *o, want(*x)),
                    Precision::F32 => kernels::linear_backward::<f32>(xv, wv, gy, *n, *f, *o, want(*x)),
                };
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if want(*w) {
                    out.push((*w, dw));
                }
                if want(*b) {
                    out.push((*b, db));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xs = self.nodes[x.0].value.shape();
                let (n, c) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for item in 0..n {
                    for ch in 0..c {
                        let off = (item * c + ch) * inner;
                        for j in off..off + inner {
                            dgamma[ch] += gy[j] * xhat[j];
                            dbeta[ch] += gy[j];
                        }
                    }
                }
                if want(*x) {
                    let g = val(*gamma);
                    let m = (n * inner) as f64;
                    let mut dx = vec![0.0; gy.len()];
                    for item in 0..n {
                        for ch in 0..c {
                            let off = (item * c + ch) * inner;
                            let scale = g[ch] * inv_std[ch];
                            for j in off..off + inner {
                                dx[j] = if *batch_stats {
                                    scale * (gy[j] - dbeta[ch] / m - xhat[j] * dgamma[ch] / m)
                                } else {
                                    scale * gy[j]
                                };
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                if want(*gamma) {
                    out.push((*gamma, dgamma));
                }
                if want(*beta) {
                    out.push((*beta, dbeta));
                }
            }
            Op::Relu(x) => out.push((
                *x,
                gy.iter().zip(val(*x)).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect(),
            )),
            Op::LeakyRelu(x, slope) => out.push((
                *x,
                gy.iter()
                    .zip(val(*x))
                    .map(|(g, &v)| if v > 0.0 { *g } else { g * slope })
                    .collect(),
            )),
            Op::Prelu(x, alpha) => {
                let xs = self.nodes[x.0].value.shape();
                let c = xs[1];
                let inner: usize = xs[2..].iter().product();
                let a = val(*alpha);
                let xv = val(*x);
                if want(*x) {
                    out.push((
                        *x,
                        gy.iter()
                            .zip(xv)
                            .enumerate()
                            .map(|(i, (g, &v))| if v > 0.0 { *g } else { g * a[(i / inner) % c] })
                            .collect(),
                    ));
                }
                if want(*alpha) {
                    let mut da = vec![0.0; c];
                    for (i, (g, &v)) in gy.iter().zip(xv).enumerate() {
                        if v <= 0.0 {
                            da[(i / inner) % c] += g * v;
                        }
                    }
                    out.push((*alpha, da));
                }
            }
            Op::Tanh(x) => out.push((
                *x,
                gy.iter().zip(node.value.data()).map(|(g, y)| g * (1.0 - y * y)).collect(),
            )),
            Op::Sigmoid(x) => out.push((
                *x,
                gy.iter().zip(node.value.data()).map(|(g, y)| g * y * (1.0 - y)).collect(),
            )),
            Op::Reshape(x) => out.push((*x, gy.to_vec())),
            Op::ColumnsToBatch(x) => {
                let xs = self.nodes[x.0].value.shape();
                let (c, h, w) = (xs[1], xs[2], xs[3]);
                let dx = (0..gy.len()).map(|i| gy[column_index(i, c, h, w)]).collect();
                out.push((*x, dx));
            }
            Op::Upsample { x, factor } => {
                let xs = self.nodes[x.0].value.shape();
                let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let (oh, ow) = (h * factor.0, w * factor.1);
                let mut dx = vec![0.0; nc * h * w];
                for plane in 0..nc {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            dx[(plane * h + oy / factor.0) * w + ox / factor.1] += gy[(plane * oh + oy) * ow + ox];
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Sum(x) => out.push((*x, vec![gy[0]; self.nodes[x.0].value.len()])),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                out.push((*x, vec![gy[0] / n as f64; n]));
            }
            Op::WeightedSum(x, w) => out.push((*x, w.iter().map(|wi| wi * gy[0]).collect())),
            Op::Mse(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let k = 2.0 * gy[0] / va.len() as f64;
                let d: Vec<f64> = va.iter().zip(vb).map(|(x, y)| k * (x - y)).collect();
                if want(*b) {
                    out.push((*b, d.iter().map(|v| -v).collect()));
                }
                if want(*a) {
                    out.push((*a, d));
                }
            }
            Op::Bce(p, y) => {
                let pv = val(*p);
                let k = gy[0] / pv.len() as f64;
                out.push((
                    *p,
                    pv.iter()
                        .map(|&q| {
                            if q < BCE_EPS || q > 1.0 - BCE_EPS {
                                0.0
                            } else {
                                -k * (y / q - (1.0 - y) / (1.0 - q))
                            }
                        })
                        .collect(),
                ));
            }
        }
        out
    }
}

/// Position of element `i` of `[N, C, H, W]` in the `[N·W, C, H, 1]` layout.
fn column_index(i: usize, c: usize, h: usize, w: usize) -> usize {
    let x = i % w;
    let y = (i / w) % h;
    let ch = (i / (w * h)) % c;
    let n = i / (w * h * c);
    ((n * w + x) * c + ch) * h + y
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy with clamped probabilities.
pub fn bce_mean(p: &[f64], target: f64) -> f64 {
    let s: f64 = p
        .iter()
        .map(|&q| {
            let q = q.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(target * q.ln() + (1.0 - target) * (1.0 - q).ln())
        })
        .sum();
    s / p.len() as f64
}
