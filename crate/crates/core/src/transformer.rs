//! Building blocks shared by the predictor and the refiner.

use rand::Rng;

use crate::error::Result;
use crate::numerics::nn::LEAKY_SLOPE;
use crate::numerics::{adain, Attention, Conv1d, Ctx, GatedConv, Graph, Linear, Norm, NormKind, ParamStore, Real, Tensor, Var};

/// Standard sinusoidal encoding of position `pos`: `sin` on even and `cos` on
/// odd components with wavelengths growing geometrically to 10000·2π.
pub fn sinusoid(pos: usize, d: usize) -> Vec<Real> {
    sinusoid_with_base(pos, d, 10000.0)
}

/// Sinusoidal encoding whose longest wavelength is `base`·2π.
pub fn sinusoid_with_base(pos: usize, d: usize, base: Real) -> Vec<Real> {
    (0..d)
        .map(|j| {
            let i = (j / 2) as Real;
            let angle = pos as Real / base.powf(2.0 * i / d as Real);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// One row per position.
pub fn sinusoid_rows(positions: impl IntoIterator<Item = usize>, d: usize) -> Tensor {
    let mut data = Vec::new();
    let mut rows = 0;
    for p in positions {
        data.extend(sinusoid(p, d));
        rows += 1;
    }
    Tensor::new(vec![rows, d], data).expect("table shape")
}

/// Self-attention, cross-attention and a leaky-ReLU linear layer, each with a
/// residual connection, followed by AdaIN whose affine comes from the
/// speaker embedding.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    self_attn: Attention,
    cross_attn: Attention,
    ff: Linear,
    style: Linear,
    width: usize,
}

pub const ADAIN_EPS: Real = 1e-5;

impl DecoderBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        identity_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let self_attn = Attention::new(store, &format!("{name}.self"), width, heads, rng)?;
        let cross_attn = Attention::new(store, &format!("{name}.cross"), width, heads, rng)?;
        let ff = Linear::new(store, &format!("{name}.ff"), width, width, rng);
        let style = Linear::new(store, &format!("{name}.style"), identity_dim, 2 * width, rng);
        Ok(Self {
            self_attn,
            cross_attn,
            ff,
            style,
            width,
        })
    }

    /// `x`: L × width, `memory`: M × width, `identity`: 1 × identity_dim.
    pub fn forward(&self, g: &mut Graph, x: Var, memory: Var, identity: Var) -> Result<Var> {
        let a = self.self_attn.forward(g, x, x)?;
        let h = g.add(x, a);
        let c = self.cross_attn.forward(g, h, memory)?;
        let h = g.add(h, c);
        let f = self.ff.forward(g, h);
        let f = g.leaky_relu(f, LEAKY_SLOPE);
        let h = g.add(h, f);
        let style = self.style.forward(g, identity);
        let s = g.slice_cols(style, 0, self.width);
        let ones = g.leaf(Tensor::filled(&[1, self.width], 1.0));
        let scale = g.add(s, ones);
        let shift = g.slice_cols(style, self.width, self.width);
        Ok(adain(g, h, scale, shift, ADAIN_EPS))
    }
}

/// Three stride-2 convolutions (k4/p1) with normalization and leaky ReLU;
/// total stride 8 so one output step covers one code window.
#[derive(Clone, Debug)]
pub struct AudioEncoder {
    convs: Vec<Conv1d>,
    norms: Vec<Norm>,
}

impl AudioEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        width: usize,
        norm: NormKind,
        rng: &mut R,
    ) -> Self {
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for i in 0..3 {
            let cin = if i == 0 { input } else { width };
            convs.push(Conv1d::new(store, &format!("{name}.conv{i}"), cin, width, 4, 2, 1, rng));
            norms.push(Norm::new(store, &format!("{name}.norm{i}"), width, norm));
        }
        Self { convs, norms }
    }

    /// `audio`: channels × frames (multiple of 8). Returns steps × width.
    pub fn forward(&self, g: &mut Graph, audio: Var, ctx: &mut Ctx) -> Result<Var> {
        let mut h = audio;
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            h = conv.forward(g, h)?;
            h = norm.forward(g, h, ctx);
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        Ok(g.transpose(h))
    }
}

/// Input convolution, a stack of gated convolutions, then a k8/s8
/// convolution down to one step per code window.
#[derive(Clone, Debug)]
pub struct ContextEncoder {
    input: Conv1d,
    layers: Vec<GatedConv>,
    pool: Conv1d,
}

impl ContextEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        width: usize,
        layers: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            input: Conv1d::new(store, &format!("{name}.input"), input, hidden, 3, 1, 1, rng),
            layers: (0..layers)
                .map(|i| GatedConv::new(store, &format!("{name}.gated{i}"), hidden, rng))
                .collect(),
            pool: Conv1d::new(store, &format!("{name}.pool"), hidden, width, 8, 8, 0, rng),
        }
    }

    /// `context`: channels × frames (multiple of 8). Returns steps × width.
    pub fn forward(&self, g: &mut Graph, context: Var) -> Result<Var> {
        let mut h = self.input.forward(g, context)?;
        for layer in &self.layers {
            h = layer.forward(g, h)?;
        }
        let h = self.pool.forward(g, h)?;
        Ok(g.transpose(h))
    }
}
