//! Minimal reverse-mode differentiation engine.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! walks it in reverse. Model weights live in a [`ParamSet`] and are copied
//! into the graph through a [`Ctx`] for each pass, so graphs never own
//! model state and can be dropped freely.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
mod kernels;
pub mod layers;
mod params;
mod tensor;

pub use adam::AdamState;
pub use checkpoint::{decode_ckp1, encode_ckp1, load_ckp1, save_ckp1, CKP1_MAGIC};
pub use gradcheck::{grad_check, layer_suite, GradCheckReport, LayerCheck, GRAD_FLOOR, LAYER_STEP, LAYER_TOL};
pub use graph::{bce_mean, sigmoid, BatchMoments, BnStats, Graph, Precision, Var, BCE_EPS};
pub use kernels::ConvGeom;
pub use params::{Bound, BnUpdate, Ctx, Mode, Param, ParamId, ParamSet};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
