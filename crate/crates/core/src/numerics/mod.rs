//! Dense double-precision math with reverse-mode differentiation.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{decode as decode_checkpoint, encode as encode_checkpoint, load as load_checkpoint, restore_into, save as save_checkpoint};
pub use gradcheck::{grad_check, grad_check_subset, GradCheckReport};
pub use graph::{Graph, NeighbourLayout, Var};
pub use optim::Adam;
pub use params::{derive_seed, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

use crate::error::Result;

/// Row-wise softmax of `scale · t`.
pub fn softmax_rows(t: &Tensor, scale: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(t.clone());
    let y = g.softmax_rows(x, scale, None)?;
    Ok(g.value(y).clone())
}

/// Layer normalisation with explicit gain and bias rows.
pub fn layer_norm(t: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(t.clone());
    let gn = g.constant(gain.clone());
    let b = g.constant(bias.clone());
    let y = g.layer_norm(x, gn, b, eps)?;
    Ok(g.value(y).clone())
}
