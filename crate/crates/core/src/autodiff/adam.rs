use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Bias-corrected Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub lr: f64,
    pub eps: f64,
    pub step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(beta1) || !unit(beta2) {
            return Err(Error::domain(format!("Adam betas must lie in [0, 1), got {beta1}, {beta2}")));
        }
        if !(lr >= 0.0 && lr.is_finite()) || !(eps > 0.0) {
            return Err(Error::domain(format!("invalid Adam lr {lr} or eps {eps}")));
        }
        Ok(Self {
            beta1,
            beta2,
            lr,
            eps,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    /// `β₂ = 0.999`, `ε = 1e-8`.
    pub fn with_defaults(lr: f64, beta1: f64) -> Result<Self> {
        Self::new(lr, beta1, 0.999, 1e-8)
    }

    /// One update over slices; `params[i]` moves along `grads[i]`.
    /// A `None` gradient leaves the parameter and its moments untouched.
    pub fn step_slices(&mut self, params: &mut [&mut [f64]], grads: &[Option<&[f64]>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("parameter and gradient counts differ"));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(Error::shape("parameter shapes changed between Adam steps"));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.len() != p.len() {
                return Err(Error::shape(format!("gradient {i} has the wrong length")));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Updates the trainable entries of `params` with per-entry gradients
    /// as returned by [`super::Bound::grads`].
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape("one gradient slot per parameter expected"));
        }
        let grad_slices: Vec<Option<&[f64]>> = params
            .iter()
            .zip(grads)
            .filter(|(p, _)| p.trainable)
            .map(|(_, g)| g.as_ref().map(Tensor::data))
            .collect();
        let mut slices: Vec<&mut [f64]> = params
            .iter_mut()
            .filter(|p| p.trainable)
            .map(|p| p.value.data_mut())
            .collect();
        self.step_slices(&mut slices, &grad_slices)
    }
}
