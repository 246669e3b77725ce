use super::graph::{BatchMoments, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named tensor owned by a model. Non-trainable entries hold buffers
/// such as batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered collection of model parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }

    /// Overwrites values by name. Every parameter must be present with a
    /// matching shape; extra entries are rejected.
    pub fn load_named(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        if entries.len() != self.params.len() {
            return Err(Error::shape(format!(
                "checkpoint has {} tensors, model has {}",
                entries.len(),
                self.params.len()
            )));
        }
        for p in &mut self.params {
            let (_, t) = entries
                .iter()
                .find(|(name, _)| *name == p.name)
                .ok_or_else(|| Error::shape(format!("checkpoint lacks tensor {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::shape(format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    /// Exponential moving average of running statistics:
    /// `running = momentum·running + (1 - momentum)·batch`.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate], momentum: f64) {
        for u in updates {
            let blend = |dst: &mut Tensor, src: &[f64]| {
                for (d, s) in dst.data_mut().iter_mut().zip(src) {
                    *d = momentum * *d + (1.0 - momentum) * s;
                }
            };
            blend(&mut self.params[u.running_mean.0].value, &u.moments.mean);
            blend(&mut self.params[u.running_var.0].value, &u.moments.var);
        }
    }
}

/// Running-statistics update produced by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub moments: BatchMoments,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics are collected.
    Train,
    /// Running statistics in batch norm.
    Infer,
}

/// Graph nodes bound to a [`ParamSet`] for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    /// Gradients of every parameter after a backward sweep; `None` for
    /// buffers and for parameters the loss does not depend on.
    pub fn grads(&self, graph: &Graph) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| v.and_then(|v| graph.grad(v))).collect()
    }
}

/// Forward-pass context handed to layers.
pub struct Ctx<'a> {
    pub graph: &'a mut Graph,
    params: &'a ParamSet,
    bound: Bound,
    mode: Mode,
    bn_updates: Vec<BnUpdate>,
}

impl<'a> Ctx<'a> {
    /// Binds trainable parameters as gradient-carrying leaves when
    /// `trainable` is set, otherwise as constants.
    pub fn new(graph: &'a mut Graph, params: &'a ParamSet, mode: Mode, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|p| {
                p.trainable.then(|| {
                    if trainable {
                        graph.leaf(p.value.clone())
                    } else {
                        graph.constant(p.value.clone())
                    }
                })
            })
            .collect();
        Self {
            graph,
            params,
            bound: Bound { vars },
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Graph node of a trainable parameter.
    pub fn var(&self, id: ParamId) -> Var {
        self.bound.vars[id.0].expect("buffer parameters have no graph node")
    }

    /// Current value of any parameter, including buffers.
    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params.get(id).value
    }

    pub(crate) fn record_bn(&mut self, update: BnUpdate) {
        self.bn_updates.push(update);
    }

    pub fn finish(self) -> (Bound, Vec<BnUpdate>) {
        (self.bound, self.bn_updates)
    }
}
