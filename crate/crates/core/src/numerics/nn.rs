//! Layers built on the tape: linear, temporal convolutions, normalization,
//! multi-head attention and AdaIN.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{invalid, Result};

/// Default negative slope for leaky ReLU.
pub const LEAKY_SLOPE: Real = 0.2;

pub fn uniform_tensor<R: Rng + ?Sized>(shape: &[usize], bound: Real, rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

fn fan_in_bound(fan_in: usize) -> Real {
    1.0 / (fan_in.max(1) as Real).sqrt()
}

/// Forward-pass state: training flag plus pending running-stat updates.
#[derive(Debug, Default)]
pub struct Ctx {
    pub training: bool,
    stat_updates: Vec<StatUpdate>,
}

#[derive(Debug)]
struct StatUpdate {
    mean_id: ParamId,
    var_id: ParamId,
    momentum: Real,
    mean: Vec<Real>,
    var: Vec<Real>,
}

impl Ctx {
    pub fn train() -> Self {
        Self {
            training: true,
            stat_updates: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        Self::default()
    }

    /// Fold the running statistics observed since the last call into the store.
    pub fn apply_stats(&mut self, store: &mut ParamStore) {
        for u in self.stat_updates.drain(..) {
            for (id, obs) in [(u.mean_id, &u.mean), (u.var_id, &u.var)] {
                let t = store.get_mut(id);
                for (r, o) in t.data_mut().iter_mut().zip(obs) {
                    *r = (1.0 - u.momentum) * *r + u.momentum * o;
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let bound = fan_in_bound(inputs);
        let w = store.add(
            format!("{name}.w"),
            uniform_tensor(&[inputs, outputs], bound, rng),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[outputs]));
        Self {
            w,
            b,
            inputs,
            outputs,
        }
    }

    /// `x`: rows × inputs.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let h = g.matmul(x, w);
        g.add_row_vec(h, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let bound = fan_in_bound(cin * kernel);
        let w = store.add(
            format!("{name}.w"),
            uniform_tensor(&[cout, cin, kernel], bound, rng),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self {
            w,
            b,
            stride,
            padding,
        }
    }

    /// `x`: channels × len.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let h = g.conv1d(x, w, self.stride, self.padding)?;
        Ok(g.add_col_vec(h, b))
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose1d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let bound = fan_in_bound(cin * kernel / stride.max(1));
        let w = store.add(
            format!("{name}.w"),
            uniform_tensor(&[cin, cout, kernel], bound, rng),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self {
            w,
            b,
            stride,
            padding,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let h = g.conv_transpose1d(x, w, self.stride, self.padding)?;
        Ok(g.add_col_vec(h, b))
    }
}

/// Normalization applied to channel-major (channels × len) activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Per-channel statistics over time, tracked as running averages for inference.
    Channel,
    /// Per-time-step statistics across channels; identical in training and inference.
    Layer,
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub kind: NormKind,
    gamma: ParamId,
    beta: ParamId,
    running_mean: Option<ParamId>,
    running_var: Option<ParamId>,
    pub eps: Real,
    pub momentum: Real,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, kind: NormKind) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(&[channels], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        let (running_mean, running_var) = match kind {
            NormKind::Channel => (
                Some(store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]))),
                Some(store.add_buffer(
                    format!("{name}.running_var"),
                    Tensor::filled(&[channels], 1.0),
                )),
            ),
            NormKind::Layer => (None, None),
        };
        Self {
            kind,
            gamma,
            beta,
            running_mean,
            running_var,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, ctx: &mut Ctx) -> Var {
        let normed = match self.kind {
            NormKind::Layer => g.normalize_cols(x, self.eps),
            NormKind::Channel if ctx.training => {
                let t = g.value(x);
                let (c, l) = (t.rows(), t.cols());
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for i in 0..c {
                    let (m, v) = super::graph::moments(t.data()[i * l..(i + 1) * l].iter().copied());
                    mean[i] = m;
                    var[i] = v;
                }
                ctx.stat_updates.push(StatUpdate {
                    mean_id: self.running_mean.unwrap(),
                    var_id: self.running_var.unwrap(),
                    momentum: self.momentum,
                    mean,
                    var,
                });
                g.normalize_rows(x, self.eps)
            }
            NormKind::Channel => {
                let rm = g.param(self.running_mean.unwrap());
                let rv = g.param(self.running_var.unwrap());
                let neg_mean: Vec<Real> = g.value(rm).data().iter().map(|m| -m).collect();
                let inv_sd: Vec<Real> = g
                    .value(rv)
                    .data()
                    .iter()
                    .map(|v| 1.0 / v.max(self.eps).sqrt())
                    .collect();
                let nm = g.leaf(Tensor::vector(neg_mean));
                let is = g.leaf(Tensor::vector(inv_sd));
                let centered = g.add_col_vec(x, nm);
                g.mul_col_vec(centered, is)
            }
        };
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let scaled = g.mul_col_vec(normed, gamma);
        g.add_col_vec(scaled, beta)
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(invalid(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model, rng),
            k: Linear::new(store, &format!("{name}.k"), d_model, d_model, rng),
            v: Linear::new(store, &format!("{name}.v"), d_model, d_model, rng),
            o: Linear::new(store, &format!("{name}.o"), d_model, d_model, rng),
            heads,
        })
    }

    /// `query`: Lq × d, `key_value`: Lkv × d. Pass the same var twice for self-attention.
    pub fn forward(&self, g: &mut Graph, query: Var, key_value: Var) -> Result<Var> {
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, key_value);
        let v = self.v.forward(g, key_value);
        let heads = scaled_dot_product_heads(g, q, k, v, self.heads)?;
        Ok(self.o.forward(g, heads))
    }
}

/// Scaled dot-product attention over already-projected `q`, `k`, `v`,
/// split into `heads` contiguous column blocks and re-concatenated.
pub fn scaled_dot_product_heads(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<Var> {
    let d = g.value(q).cols();
    if heads == 0 || d % heads != 0 {
        return Err(invalid(format!(
            "model width {d} is not divisible by {heads} heads"
        )));
    }
    if g.value(k).cols() != d || g.value(v).cols() != d {
        return Err(invalid("attention query/key/value widths differ"));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as Real).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh),
                g.slice_cols(k, h * dh, dh),
                g.slice_cols(v, h * dh, dh),
            )
        };
        let scores = g.matmul_nt(qh, kh);
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores);
        outs.push(g.matmul(attn, vh));
    }
    Ok(if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    })
}

/// Adaptive instance normalization: each column of `x` (L × d) is
/// normalized over L (variance floored at `eps`), then `scale·x̂ + shift`.
pub fn adain(g: &mut Graph, x: Var, scale: Var, shift: Var, eps: Real) -> Var {
    let normed = g.normalize_cols(x, eps);
    let scaled = g.mul_row_vec(normed, scale);
    g.add_row_vec(scaled, shift)
}

/// Temporal convolution with the `tanh(feature) · sigmoid(gate)` activation
/// and a residual connection.
#[derive(Clone, Debug)]
pub struct GatedConv {
    feature: Conv1d,
    gate: Conv1d,
}

impl GatedConv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            feature: Conv1d::new(store, &format!("{name}.feat"), channels, channels, 3, 1, 1, rng),
            gate: Conv1d::new(store, &format!("{name}.gate"), channels, channels, 3, 1, 1, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let f = self.feature.forward(g, x)?;
        let f = g.tanh(f);
        let s = self.gate.forward(g, x)?;
        let s = g.sigmoid(s);
        let h = g.mul(f, s);
        Ok(g.add(x, h))
    }
}
