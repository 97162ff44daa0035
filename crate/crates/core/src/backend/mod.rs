//! Differentiable tensor backend: dense tensors, a reverse-mode tape, layers
//! and a finite-difference gradient checker.

mod gradcheck;
mod graph;
mod kernels;
pub mod nn;
mod param;
mod tensor;

pub use gradcheck::{gradient_check, Coverage, GradCheckReport, LossAndGrads};
pub use graph::{Gradients, Graph, Var};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::{DType, Element, Tensor};

use crate::error::Result;

/// Eager convolution of a single `[cin,h,w]` input.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let w = g.constant(weight.clone());
    let b = g.constant(bias.clone());
    let y = g.conv2d(x, w, Some(b), stride, padding)?;
    Ok(g.value(y).clone())
}

/// Eager group normalization.
pub fn group_norm<T: Element>(
    input: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let ga = g.constant(gamma.clone());
    let be = g.constant(beta.clone());
    let y = g.group_norm(x, groups, ga, be, eps)?;
    Ok(g.value(y).clone())
}

/// Eager attention layer; returns the output and the `[hw, hw]` attention weights.
pub fn attention_layer<T: Element>(
    input: &Tensor<T>,
    layer: &nn::AttentionLayer,
    store: &ParamStore<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    g.freeze(store);
    let x = g.constant(input.clone());
    let (y, a) = layer.forward_with_weights(&mut g, store, x)?;
    Ok((g.value(y).clone(), g.value(a).clone()))
}
