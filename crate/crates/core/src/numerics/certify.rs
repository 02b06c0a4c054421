//! The gradient certification suite: every differentiable op of [`Graph`]
//! and every parameterized layer against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::nn::{scaled_dot_product_heads, uniform_tensor};
use super::*;
use crate::error::Result;

/// Tolerance for ops with curvature.
pub const TOL: Real = 1e-4;
/// Tolerance for linear ops (linear layers, convolutions, attention given
/// its inputs).
pub const LINEAR_TOL: Real = 1e-6;
const EPS: Real = 1e-5;
/// Linear maps have no truncation error, so a wide step only reduces rounding noise.
const LINEAR_EPS: Real = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct Certificate {
    pub op: &'static str,
    /// Worst relative error over all probed coordinates.
    pub error: Real,
    pub tolerance: Real,
}

impl Certificate {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    uniform_tensor(shape, 1.0, &mut rng(seed))
}

/// Random values kept at least `margin` away from zero (kink-free points).
fn rand_away_from_zero(shape: &[usize], seed: u64, margin: Real) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| {
        let v: Real = r.random_range(margin..1.0);
        if r.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

/// Weighted sum of all elements with fixed pseudo-random weights, so every
/// output coordinate contributes a distinct amount to the scalar.
pub fn probe(g: &mut Graph, v: Var) -> Var {
    let n = g.value(v).numel();
    let shape = g.value(v).shape().to_vec();
    let w = g.leaf(Tensor::new(shape, (0..n).map(|i| ((i * 37 % 11) as Real - 5.0) / 7.0).collect()).unwrap());
    let p = g.mul(v, w);
    g.sum(p)
}

fn check(
    out: &mut Vec<Certificate>,
    op: &'static str,
    inputs: &[Tensor],
    tolerance: Real,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<()> {
    let eps = if tolerance <= LINEAR_TOL { LINEAR_EPS } else { EPS };
    let error = gradient_check(inputs, eps, f)?;
    out.push(Certificate { op, error, tolerance });
    Ok(())
}

/// Run every check. Fails only if a check cannot be evaluated; the verdict
/// is in each [`Certificate`].
pub fn certify_all() -> Result<Vec<Certificate>> {
    let mut out = Vec::new();

    let x = rand_tensor(&[5, 4], 2);
    let w = rand_tensor(&[4, 3], 3);
    let b = rand_tensor(&[3], 4);
    check(&mut out, "linear", &[x, w, b], LINEAR_TOL, |g, v| {
        let h = g.matmul(v[0], v[1]);
        let h = g.add_row_vec(h, v[2]);
        Ok(probe(g, h))
    })?;

    let a = rand_tensor(&[3, 4], 5);
    let b = rand_tensor(&[6, 4], 6);
    check(&mut out, "matmul_nt+transpose", &[a, b], LINEAR_TOL, |g, v| {
        let h = g.matmul_nt(v[0], v[1]);
        let t = g.transpose(h);
        Ok(probe(g, t))
    })?;

    for (k, s, p, len) in [(3, 1, 1, 9), (4, 2, 1, 16), (2, 2, 0, 8), (8, 8, 0, 16)] {
        let x = rand_tensor(&[3, len], 7 + k as u64);
        let w = rand_tensor(&[2, 3, k], 8 + s as u64);
        let bias = rand_tensor(&[2], 9);
        check(&mut out, "conv1d", &[x, w, bias], LINEAR_TOL, |g, v| {
            let h = g.conv1d(v[0], v[1], s, p)?;
            let h = g.add_col_vec(h, v[2]);
            Ok(probe(g, h))
        })?;
    }

    let x = rand_tensor(&[3, 8], 12);
    let w = rand_tensor(&[3, 2, 4], 13);
    check(&mut out, "conv_transpose1d", &[x, w], LINEAR_TOL, |g, v| {
        let h = g.conv_transpose1d(v[0], v[1], 2, 1)?;
        Ok(probe(g, h))
    })?;

    let a = rand_tensor(&[4, 3], 14);
    let b = rand_tensor(&[4, 3], 15);
    let rv = rand_tensor(&[3], 16);
    let cv = rand_tensor(&[4], 17);
    check(&mut out, "elementwise+broadcast", &[a, b, rv, cv], TOL, |g, v| {
        let s = g.add(v[0], v[1]);
        let d = g.sub(s, v[1]);
        let m = g.mul(d, v[1]);
        let m = g.scale(m, 1.7);
        let r = g.mul_row_vec(m, v[2]);
        let c = g.mul_col_vec(r, v[3]);
        let c = g.add_col_vec(c, v[3]);
        Ok(probe(g, c))
    })?;

    let x = rand_away_from_zero(&[3, 5], 18, 0.05);
    check(&mut out, "activations", &[x], TOL, |g, v| {
        let a = g.leaky_relu(v[0], 0.2);
        let t = g.tanh(a);
        let s = g.sigmoid(t);
        Ok(probe(g, s))
    })?;

    let x = rand_tensor(&[4, 6], 19);
    check(&mut out, "softmax_rows", &[x.clone()], TOL, |g, v| {
        let s = g.softmax_rows(v[0]);
        Ok(probe(g, s))
    })?;
    check(&mut out, "normalize_rows", &[x.clone()], TOL, |g, v| {
        let s = g.normalize_rows(v[0], 1e-5);
        Ok(probe(g, s))
    })?;
    check(&mut out, "normalize_cols", &[x], TOL, |g, v| {
        let s = g.normalize_cols(v[0], 1e-5);
        Ok(probe(g, s))
    })?;

    let logits = rand_tensor(&[5, 7], 20);
    check(&mut out, "cross_entropy", &[logits], TOL, |g, v| {
        g.cross_entropy(v[0], &[0, 3, 6, 2, 2], Some(&[1.0, 0.0, 2.0, 1.0, 0.5]))
    })?;
    let a = rand_tensor(&[4, 3], 21);
    let b = rand_tensor(&[4, 3], 22);
    check(&mut out, "l1", &[a.clone(), b.clone()], TOL, |g, v| {
        let w: Vec<Real> = (0..12).map(|i| (i % 3) as Real).collect();
        Ok(g.l1(v[0], v[1], Some(w)))
    })?;
    check(&mut out, "mean_sq_diff", &[a, b], TOL, |g, v| Ok(g.mean_sq_diff(v[0], v[1])))?;

    let a = rand_tensor(&[4, 6], 23);
    let b = rand_tensor(&[2, 6], 24);
    check(&mut out, "shape_ops", &[a, b], LINEAR_TOL, |g, v| {
        let r = g.slice_rows(v[0], 1, 2);
        let c = g.slice_cols(v[0], 2, 3);
        let cr = g.concat_rows(&[r, v[1]]);
        let cc = g.concat_cols(&[c, c]);
        let gr = g.gather_rows(cr, &[3, 0, 0, 2]);
        let d1 = g.diff_rows(gr);
        let d2 = g.diff_cols(cc);
        let re = g.reshape(d2, &[20]);
        let p1 = probe(g, d1);
        let p2 = probe(g, re);
        let m = g.mean(d1);
        let s = g.add(p1, p2);
        Ok(g.add(s, m))
    })?;

    let q = rand_tensor(&[5, 8], 25);
    let k = rand_tensor(&[3, 8], 26);
    let v = rand_tensor(&[3, 8], 27);
    check(&mut out, "attention", &[q, k, v], LINEAR_TOL, |g, x| {
        let o = scaled_dot_product_heads(g, x[0], x[1], x[2], 2)?;
        Ok(probe(g, o))
    })?;

    let x = rand_tensor(&[16, 4], 28);
    let s = rand_tensor(&[4], 29);
    let b = rand_tensor(&[4], 30);
    check(&mut out, "adain", &[x, s, b], TOL, |g, v| {
        let y = adain(g, v[0], v[1], v[2], 1e-5);
        Ok(probe(g, y))
    })?;

    out.push(parameterized_layers()?);
    Ok(out)
}

/// Parameter gradients through a stack of every parameterized layer.
fn parameterized_layers() -> Result<Certificate> {
    let mut store = ParamStore::new();
    let mut r = rng(31);
    let conv = Conv1d::new(&mut store, "c", 3, 4, 3, 1, 1, &mut r);
    let norm_c = Norm::new(&mut store, "nc", 4, NormKind::Channel);
    let norm_l = Norm::new(&mut store, "nl", 4, NormKind::Layer);
    let gated = GatedConv::new(&mut store, "g", 4, &mut r);
    let up = ConvTranspose1d::new(&mut store, "u", 4, 2, 4, 2, 1, &mut r);
    let att = Attention::new(&mut store, "a", 4, 2, &mut r)?;
    let x = rand_tensor(&[3, 10], 32);
    let ids = store.trainable_ids();
    let error = gradient_check_params(&mut store, &ids, 12, EPS, |g| {
        let mut ctx = Ctx::train();
        let xv = g.leaf(x.clone());
        let h = conv.forward(g, xv)?;
        let h = norm_c.forward(g, h, &mut ctx);
        let h = g.tanh(h);
        let h = norm_l.forward(g, h, &mut ctx);
        let h = gated.forward(g, h)?;
        let t = g.transpose(h);
        let a = att.forward(g, t, t)?;
        let back = g.transpose(a);
        let u = up.forward(g, back)?;
        Ok(probe(g, u))
    })?;
    Ok(Certificate {
        op: "layers(params)",
        error,
        tolerance: TOL,
    })
}
