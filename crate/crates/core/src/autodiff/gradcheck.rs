//! Reverse-mode gradients checked against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{BnStats, Graph, Precision, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares `d f / d x` from the reverse sweep with
/// `(f(x + hᵢ eᵢ) - f(x - hᵢ eᵢ)) / 2hᵢ`, where `hᵢ = h·max(1, |xᵢ|)`.
///
/// `f` must build a scalar from its input node. The relative error of
/// one coordinate is `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::domain("finite-difference step must be positive"));
    }
    let mut g = Graph::new(Precision::F64);
    let xv = g.leaf(x.clone());
    let y = f(&mut g, xv)?;
    g.backward(y)?;
    let analytic = g
        .grad(xv)
        .map(Tensor::into_data)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut g = Graph::new(Precision::F64);
        let v = g.constant(probe);
        let y = f(&mut g, v)?;
        Ok(g.value(y).item())
    };

    let mut numeric = Vec::with_capacity(x.len());
    let mut max_rel_err = 0.0f64;
    let mut worst_index = 0;
    for i in 0..x.len() {
        let hi = h * x.data()[i].abs().max(1.0);
        let mut plus = x.clone();
        plus.data_mut()[i] += hi;
        let mut minus = x.clone();
        minus.data_mut()[i] -= hi;
        let d = (eval(plus)? - eval(minus)?) / (2.0 * hi);
        let a = analytic[i];
        let err = (a - d).abs() / a.abs().max(d.abs()).max(GRAD_FLOOR);
        if !err.is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient at coordinate {i}")));
        }
        if err > max_rel_err {
            max_rel_err = err;
            worst_index = i;
        }
        numeric.push(d);
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst_index,
        analytic,
        numeric,
    })
}

/// Largest relative error accepted by [`layer_suite`].
pub const LAYER_TOL: f64 = 1e-4;

/// Finite-difference step used by [`layer_suite`].
pub const LAYER_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCheck {
    pub name: String,
    pub max_rel_err: f64,
}

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < LAYER_TOL
    }
}

/// Uniform in `[-1, 1]`, kept at least `0.01` away from zero so no probe
/// straddles the kink of a piecewise-linear activation.
fn probe_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(-1.0..1.0);
        if v.abs() < 0.01 { 0.01f64.copysign(v) } else { v }
    })
}

/// Checks every layer type of the engine with respect to each of its
/// inputs, in 64-bit arithmetic, on data drawn from `seed`. Each loss is
/// `Σ r ⊙ layer(x)` with random weights `r`.
pub fn layer_suite(seed: u64) -> Result<Vec<LayerCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut check = |name: String, shape: &[usize], op: &dyn Fn(&mut Graph, Var) -> Result<Var>, rng: &mut ChaCha8Rng| -> Result<()> {
        let x = probe_tensor(shape, rng);
        let wseed: u64 = rng.random();
        let r = grad_check(
            |g, v| {
                let y = op(g, v)?;
                let mut wr = ChaCha8Rng::seed_from_u64(wseed);
                let w: Vec<f64> = (0..g.value(y).len()).map(|_| wr.random_range(-1.0..1.0)).collect();
                g.weighted_sum(y, &w)
            },
            &x,
            LAYER_STEP,
        )?;
        out.push(LayerCheck {
            name,
            max_rel_err: r.max_rel_err,
        });
        Ok(())
    };

    for d in [1usize, 2, 3, 15] {
        let k = probe_tensor(&[2, 2, 3], &mut rng);
        let x = probe_tensor(&[2, 2, 36], &mut rng);
        check(format!("conv1d d={d} input"), &[2, 2, 36], &|g, v| {
            let k = g.constant(k.clone());
            g.conv1d(v, k, None, 1, d, true)
        }, &mut rng)?;
        let b = probe_tensor(&[2], &mut rng);
        check(format!("conv1d d={d} kernel"), &[2, 2, 3], &|g, v| {
            let (x, b) = (g.constant(x.clone()), g.constant(b.clone()));
            g.conv1d(x, v, Some(b), 1, d, true)
        }, &mut rng)?;
    }
    let w = probe_tensor(&[3, 2, 3, 3], &mut rng);
    check("conv2d input".into(), &[2, 2, 7, 6], &|g, v| {
        let w = g.constant(w.clone());
        g.conv2d(v, w, None, (2, 1), (1, 1), (1, 1))
    }, &mut rng)?;
    let x = probe_tensor(&[2, 2, 7, 6], &mut rng);
    check("conv2d kernel".into(), &[3, 2, 3, 3], &|g, v| {
        let x = g.constant(x.clone());
        g.conv2d(x, v, None, (1, 2), (1, 1), (1, 1))
    }, &mut rng)?;
    let x = probe_tensor(&[2, 2, 9, 3], &mut rng);
    check("conv2d vertical dilated kernel".into(), &[3, 2, 3, 1], &|g, v| {
        let x = g.constant(x.clone());
        g.conv2d(x, v, None, (1, 1), (3, 1), (3, 0))
    }, &mut rng)?;

    let (gamma, beta) = (probe_tensor(&[3], &mut rng), probe_tensor(&[3], &mut rng));
    check("batch norm input".into(), &[4, 3, 2, 2], &|g, v| {
        let (ga, be) = (g.constant(gamma.clone()), g.constant(beta.clone()));
        Ok(g.batch_norm(v, ga, be, BnStats::Batch, 1e-3)?.0)
    }, &mut rng)?;
    let x = probe_tensor(&[4, 3, 2, 2], &mut rng);
    check("batch norm gamma".into(), &[3], &|g, v| {
        let (x, be) = (g.constant(x.clone()), g.constant(beta.clone()));
        Ok(g.batch_norm(x, v, be, BnStats::Batch, 1e-3)?.0)
    }, &mut rng)?;
    check("batch norm beta".into(), &[3], &|g, v| {
        let (x, ga) = (g.constant(x.clone()), g.constant(gamma.clone()));
        Ok(g.batch_norm(x, ga, v, BnStats::Batch, 1e-3)?.0)
    }, &mut rng)?;

    let slope = probe_tensor(&[3], &mut rng);
    check("prelu input".into(), &[2, 3, 4], &|g, v| {
        let a = g.constant(slope.clone());
        g.prelu(v, a)
    }, &mut rng)?;
    let x = probe_tensor(&[2, 3, 4], &mut rng);
    check("prelu slope".into(), &[3], &|g, v| {
        let x = g.constant(x.clone());
        g.prelu(x, v)
    }, &mut rng)?;
    check("leaky relu".into(), &[12], &|g, v| Ok(g.leaky_relu(v, 0.2)), &mut rng)?;
    check("relu".into(), &[12], &|g, v| Ok(g.relu(v)), &mut rng)?;
    check("tanh".into(), &[12], &|g, v| Ok(g.tanh(v)), &mut rng)?;
    check("sigmoid".into(), &[12], &|g, v| Ok(g.sigmoid(v)), &mut rng)?;

    let (w, b) = (probe_tensor(&[4, 6], &mut rng), probe_tensor(&[4], &mut rng));
    check("dense input".into(), &[3, 6], &|g, v| {
        let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
        g.linear(v, w, b)
    }, &mut rng)?;
    let x = probe_tensor(&[3, 6], &mut rng);
    check("dense weight".into(), &[4, 6], &|g, v| {
        let (x, b) = (g.constant(x.clone()), g.constant(b.clone()));
        g.linear(x, v, b)
    }, &mut rng)?;
    check("dense bias".into(), &[4], &|g, v| {
        let (x, w) = (g.constant(x.clone()), g.constant(w.clone()));
        g.linear(x, w, v)
    }, &mut rng)?;
    check("upsample".into(), &[2, 2, 3, 2], &|g, v| g.upsample_nearest(v, (2, 1)), &mut rng)?;
    check("columns to batch".into(), &[2, 2, 3, 4], &|g, v| g.columns_to_batch(v), &mut rng)?;
    Ok(out)
}
