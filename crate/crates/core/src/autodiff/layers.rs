//! Parameterised building blocks shared by the networks.

use rand::Rng;

use super::graph::{BnStats, Var};
use super::params::{BnUpdate, Ctx, Mode, ParamId, ParamSet};
use super::tensor::Tensor;
use crate::error::Result;

/// Glorot-uniform initialisation.
fn glorot<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-limit..limit))
}

/// 2-D convolution with bias; a `(k, 1)` kernel gives a vertical 1-D filter.
#[derive(Debug, Clone)]
pub struct Conv2d {
    w: ParamId,
    b: ParamId,
    stride: (usize, usize),
    dilation: (usize, usize),
    padding: (usize, usize),
}

impl Conv2d {
    /// Zero "same" padding for stride 1; for stride 2 and odd kernels the
    /// output is half the input size (rounded up).
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        dilation: (usize, usize),
        rng: &mut R,
    ) -> Self {
        let (kh, kw) = kernel;
        let fan_in = in_ch * kh * kw;
        let fan_out = out_ch * kh * kw;
        let w = ps.add(format!("{name}.weight"), glorot(&[out_ch, in_ch, kh, kw], fan_in, fan_out, rng), true);
        let b = ps.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]), true);
        Self {
            w,
            b,
            stride,
            dilation,
            padding: (dilation.0 * (kh - 1) / 2, dilation.1 * (kw - 1) / 2),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.var(self.w), ctx.var(self.b));
        ctx.graph.conv2d(x, w, Some(b), self.stride, self.dilation, self.padding)
    }
}

pub const BN_EPS: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), true),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: ps.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: ps.add(format!("{name}.running_var"), Tensor::full(&[channels], 1.0), false),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (gamma, beta) = (ctx.var(self.gamma), ctx.var(self.beta));
        match ctx.mode() {
            Mode::Train => {
                let (y, moments) = ctx.graph.batch_norm(x, gamma, beta, BnStats::Batch, BN_EPS)?;
                ctx.record_bn(BnUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    moments: moments.expect("batch statistics"),
                });
                Ok(y)
            }
            Mode::Infer => {
                let mean = ctx.value(self.running_mean).data().to_vec();
                let var = ctx.value(self.running_var).data().to_vec();
                let (y, _) = ctx.graph.batch_norm(
                    x,
                    gamma,
                    beta,
                    BnStats::Running {
                        mean: &mean,
                        var: &var,
                    },
                    BN_EPS,
                )?;
                Ok(y)
            }
        }
    }
}

/// Per-channel learned leaky slope.
#[derive(Debug, Clone)]
pub struct Prelu {
    alpha: ParamId,
}

impl Prelu {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize) -> Self {
        Self {
            alpha: ps.add(format!("{name}.alpha"), Tensor::full(&[channels], 0.25), true),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let alpha = ctx.var(self.alpha);
        ctx.graph.prelu(x, alpha)
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            w: ps.add(format!("{name}.weight"), glorot(&[outputs, inputs], inputs, outputs, rng), true),
            b: ps.add(format!("{name}.bias"), Tensor::zeros(&[outputs]), true),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.var(self.w), ctx.var(self.b));
        ctx.graph.linear(x, w, b)
    }
}
