//! Minimal differentiable-tensor layer used by the three networks.

pub mod certify;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

pub use gradcheck::{gradient_check, gradient_check_params};
pub use graph::{Gradients, Graph, Var};
pub use nn::{adain, Attention, Conv1d, ConvTranspose1d, Ctx, GatedConv, Linear, Norm, NormKind};
pub use optim::{AdamWConfig, OptimState};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

use crate::error::Result;

/// Plain (non-recording) 1-D convolution of `input` (C_in × L) with
/// `weight` (C_out × C_in × k).
pub fn conv1d(input: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.leaf(input.clone());
    let w = g.leaf(weight.clone());
    let y = g.conv1d(x, w, stride, padding)?;
    Ok(g.value(y).clone())
}

pub fn leaky_relu(x: &Tensor, slope: Real) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| if v >= 0.0 { v } else { slope * v })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Mean over rows of `−log softmax(logits)[target]`.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Real> {
    let mut g = Graph::new();
    let l = g.leaf(logits.clone());
    let loss = g.cross_entropy(l, targets, None)?;
    Ok(g.scalar(loss))
}
