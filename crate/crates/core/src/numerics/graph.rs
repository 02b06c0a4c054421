//! Reverse-mode tape over 2-D tensors.
//!
//! Every value is stored row-major; vectors are treated as a single row.
//! Parameters are borrowed from a [`ParamStore`] rather than copied, and
//! gradients come back as a [`Gradients`] value that can be folded into the
//! store once the graph has been dropped.

use std::collections::HashMap;

use super::kernels::{self, col2im_add, conv_out_len, conv_transpose_out_len, im2col};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Real),
    AddRowVec(Var, Var),
    MulRowVec(Var, Var),
    AddColVec(Var, Var),
    MulColVec(Var, Var),
    LeakyRelu(Var, Real),
    Tanh(Var),
    Sigmoid(Var),
    Conv1d { x: Var, w: Var, stride: usize, padding: usize },
    ConvTranspose1d { x: Var, w: Var, stride: usize, padding: usize },
    SoftmaxRows(Var),
    NormalizeRows { x: Var, eps: Real },
    NormalizeCols { x: Var, eps: Real },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<Real> },
    L1 { a: Var, b: Var, weights: Option<Vec<Real>> },
    MeanSqDiff(Var, Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, index: Vec<usize> },
    StraightThrough(Var),
    DiffRows(Var),
    DiffCols(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

/// One forward pass worth of recorded operations.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Result of [`Graph::backward`]; independent of the graph's lifetime.
pub struct Gradients {
    grads: Vec<Option<Vec<Real>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[Real]> {
        self.grads[v.0].as_deref()
    }

    pub fn param(&self, id: ParamId) -> Option<&[Real]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, n)| self.grads[*n].as_deref())
    }

    /// Add `scale` × every parameter gradient into the store's grad buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore, scale: Real) {
        for (id, node) in &self.params {
            if let Some(g) = &self.grads[*node] {
                if store.is_trainable(*id) {
                    store.accumulate_grad(*id, g, scale);
                }
            }
        }
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self
                .params
                .expect("parameter node without a parameter store")
                .get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> Real {
        self.value(v).data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    /// Constant or input tensor. Gradients are still reported for it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        assert!(self.params.is_some(), "graph built without a parameter store");
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (m, k) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        assert_eq!(k, kb, "matmul inner dimensions differ: {k} vs {kb}");
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            0.0,
        );
        self.push(
            Tensor::new(vec![m, n], out).unwrap(),
            Op::MatMul { a, b, trans_b },
        )
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x).transpose2();
        self.push(t, Op::Transpose(x))
    }

    // ---- elementwise ----------------------------------------------------

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(Real, Real) -> Real) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            ta.numel(),
            tb.numel(),
            "elementwise shapes differ: {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data).unwrap()
    }

    fn map(&self, x: Var, f: impl Fn(Real) -> Real) -> Tensor {
        let t = self.value(x);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect()).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: Real) -> Var {
        let t = self.map(x, |v| v * s);
        self.push(t, Op::Scale(x, s))
    }

    fn bcast(&mut self, x: Var, v: Var, per_col: bool, mul: bool) -> Var {
        let (r, c) = self.dims(x);
        let tv = self.value(v);
        let expect = if per_col { c } else { r };
        assert_eq!(tv.numel(), expect, "broadcast vector length mismatch");
        let (tx, vd) = (self.value(x).data(), tv.data());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                let b = if per_col { vd[j] } else { vd[i] };
                let a = tx[i * c + j];
                out.push(if mul { a * b } else { a + b });
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out).unwrap();
        let op = match (per_col, mul) {
            (true, false) => Op::AddRowVec(x, v),
            (true, true) => Op::MulRowVec(x, v),
            (false, false) => Op::AddColVec(x, v),
            (false, true) => Op::MulColVec(x, v),
        };
        self.push(t, op)
    }

    /// Add a length-`cols` vector to every row.
    pub fn add_row_vec(&mut self, x: Var, v: Var) -> Var {
        self.bcast(x, v, true, false)
    }

    /// Multiply every row elementwise by a length-`cols` vector.
    pub fn mul_row_vec(&mut self, x: Var, v: Var) -> Var {
        self.bcast(x, v, true, true)
    }

    /// Add a length-`rows` vector to every column.
    pub fn add_col_vec(&mut self, x: Var, v: Var) -> Var {
        self.bcast(x, v, false, false)
    }

    pub fn mul_col_vec(&mut self, x: Var, v: Var) -> Var {
        self.bcast(x, v, false, true)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: Real) -> Var {
        let t = self.map(x, |v| if v >= 0.0 { v } else { slope * v });
        self.push(t, Op::LeakyRelu(x, slope))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, Real::tanh);
        self.push(t, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    // ---- convolution ----------------------------------------------------

    /// `x`: channels_in × len, `w`: channels_out × channels_in × kernel.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (cin, len) = self.dims(x);
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 3 {
            return Err(invalid(format!("conv1d weight must be 3-D, got {ws:?}")));
        }
        let (cout, wcin, k) = (ws[0], ws[1], ws[2]);
        if wcin != cin {
            return Err(invalid(format!(
                "conv1d input has {cin} channels, weight expects {wcin}"
            )));
        }
        if k == 0 || stride == 0 {
            return Err(invalid("conv1d needs kernel >= 1 and stride >= 1"));
        }
        let lout = conv_out_len(len, k, stride, padding).ok_or_else(|| {
            invalid(format!(
                "conv1d input length {len} with padding {padding} is shorter than kernel {k}"
            ))
        })?;
        let cols = im2col(self.value(x).data(), cin, len, k, stride, padding, lout);
        let mut out = vec![0.0; cout * lout];
        kernels::gemm(
            cout,
            cin * k,
            lout,
            self.value(w).data(),
            false,
            &cols,
            false,
            &mut out,
            0.0,
        );
        Ok(self.push(
            Tensor::new(vec![cout, lout], out).unwrap(),
            Op::Conv1d {
                x,
                w,
                stride,
                padding,
            },
        ))
    }

    /// Adjoint of [`Graph::conv1d`] with the same geometry.
    /// `x`: channels_in × len, `w`: channels_in × channels_out × kernel.
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (cin, len) = self.dims(x);
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 3 || ws[0] != cin {
            return Err(invalid(format!(
                "conv_transpose1d weight {ws:?} incompatible with {cin} input channels"
            )));
        }
        let (cout, k) = (ws[1], ws[2]);
        let lout = conv_transpose_out_len(len, k, stride, padding)
            .ok_or_else(|| invalid("conv_transpose1d produces an empty output"))?;
        let mut cols = vec![0.0; cout * k * len];
        kernels::gemm(
            cout * k,
            cin,
            len,
            self.value(w).data(),
            true,
            self.value(x).data(),
            false,
            &mut cols,
            0.0,
        );
        let mut out = vec![0.0; cout * lout];
        col2im_add(&cols, &mut out, cout, lout, k, stride, padding, len);
        Ok(self.push(
            Tensor::new(vec![cout, lout], out).unwrap(),
            Op::ConvTranspose1d {
                x,
                w,
                stride,
                padding,
            },
        ))
    }

    // ---- normalization and softmax --------------------------------------

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(Tensor::new(vec![r, c], out).unwrap(), Op::SoftmaxRows(x))
    }

    /// Each row shifted/scaled to zero mean and unit variance; the variance
    /// is floored at `eps`.
    pub fn normalize_rows(&mut self, x: Var, eps: Real) -> Var {
        let (r, c) = self.dims(x);
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let (mean, var) = moments(row.iter().copied());
            let inv = 1.0 / var.max(eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv;
            }
        }
        self.push(
            Tensor::new(vec![r, c], out).unwrap(),
            Op::NormalizeRows { x, eps },
        )
    }

    /// Each column normalized over the rows.
    pub fn normalize_cols(&mut self, x: Var, eps: Real) -> Var {
        let (r, c) = self.dims(x);
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for j in 0..c {
            let (mean, var) = moments((0..r).map(|i| src[i * c + j]));
            let inv = 1.0 / var.max(eps).sqrt();
            for i in 0..r {
                out[i * c + j] = (src[i * c + j] - mean) * inv;
            }
        }
        self.push(
            Tensor::new(vec![r, c], out).unwrap(),
            Op::NormalizeCols { x, eps },
        )
    }

    // ---- losses ---------------------------------------------------------

    /// Weighted mean over rows of `-log softmax(logits)[target]`.
    /// A zero total weight yields a loss of exactly 0.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: Option<&[Real]>,
    ) -> Result<Var> {
        let (r, k) = self.dims(logits);
        if targets.len() != r {
            return Err(invalid(format!(
                "cross_entropy: {r} logit rows but {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(invalid(format!(
                "cross_entropy target {bad} out of range [0, {k})"
            )));
        }
        let weights = match weights {
            Some(w) if w.len() != r => {
                return Err(invalid("cross_entropy weight length mismatch"));
            }
            Some(w) => w.to_vec(),
            None => vec![1.0; r],
        };
        let total: Real = weights.iter().sum();
        let data = self.value(logits).data();
        let mut loss = 0.0;
        if total > 0.0 {
            for (i, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
                if w == 0.0 {
                    continue;
                }
                let row = &data[i * k..(i + 1) * k];
                loss += w * (log_sum_exp(row) - row[t]);
            }
            loss /= total;
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
            },
        ))
    }

    /// Mean over all elements of `w ⊙ |a − b|` (weights default to 1).
    pub fn l1(&mut self, a: Var, b: Var, weights: Option<Vec<Real>>) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.numel(), tb.numel(), "l1 shapes differ");
        if let Some(w) = &weights {
            assert_eq!(w.len(), ta.numel(), "l1 weight length mismatch");
        }
        let n = ta.numel().max(1) as Real;
        let sum: Real = ta
            .data()
            .iter()
            .zip(tb.data())
            .enumerate()
            .map(|(i, (x, y))| weights.as_ref().map_or(1.0, |w| w[i]) * (x - y).abs())
            .sum();
        self.push(Tensor::scalar(sum / n), Op::L1 { a, b, weights })
    }

    /// Mean over all elements of `(a − b)²`.
    pub fn mean_sq_diff(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.numel(), tb.numel(), "mean_sq_diff shapes differ");
        let n = ta.numel().max(1) as Real;
        let sum: Real = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(Tensor::scalar(sum / n), Op::MeanSqDiff(a, b))
    }

    // ---- shape ----------------------------------------------------------

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.dims(x);
        assert!(start + len <= r, "slice_rows out of range");
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        self.push(
            Tensor::new(vec![len, c], data).unwrap(),
            Op::SliceRows { x, start },
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.dims(x);
        assert!(start + len <= c, "slice_cols out of range");
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        self.push(
            Tensor::new(vec![r, len], data).unwrap(),
            Op::SliceCols { x, start },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.dims(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims(p);
            assert_eq!(pc, c, "concat_rows column mismatch");
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        self.push(
            Tensor::new(vec![rows, c], data).unwrap(),
            Op::ConcatRows(parts.to_vec()),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pr, pc) = self.dims(p);
                assert_eq!(pr, r, "concat_cols row mismatch");
                pc
            })
            .collect();
        let c: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(
            Tensor::new(vec![r, c], data).unwrap(),
            Op::ConcatCols(parts.to_vec()),
        )
    }

    /// Select rows by index (embedding lookup); indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Var {
        let (r, c) = self.dims(x);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            assert!(i < r, "gather_rows index {i} out of range {r}");
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.push(
            Tensor::new(vec![index.len(), c], data).unwrap(),
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
        )
    }

    /// Forward value `quantized`, backward identity into `z`.
    pub fn straight_through(&mut self, z: Var, quantized: Tensor) -> Var {
        assert_eq!(self.value(z).numel(), quantized.numel());
        let q = quantized.reshaped(self.value(z).shape()).unwrap();
        self.push(q, Op::StraightThrough(z))
    }

    /// `out[i] = x[i+1] − x[i]` along the row axis.
    pub fn diff_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let src = self.value(x).data();
        let n = r.saturating_sub(1);
        let mut data = Vec::with_capacity(n * c);
        for i in 0..n {
            for j in 0..c {
                data.push(src[(i + 1) * c + j] - src[i * c + j]);
            }
        }
        self.push(Tensor::new(vec![n, c], data).unwrap(), Op::DiffRows(x))
    }

    /// `out[:, j] = x[:, j+1] − x[:, j]`.
    pub fn diff_cols(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let src = self.value(x).data();
        let n = c.saturating_sub(1);
        let mut data = Vec::with_capacity(r * n);
        for i in 0..r {
            for j in 0..n {
                data.push(src[i * c + j + 1] - src[i * c + j]);
            }
        }
        self.push(Tensor::new(vec![r, n], data).unwrap(), Op::DiffCols(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: Real = t.data().iter().sum::<Real>() / t.numel().max(1) as Real;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshaped(shape).expect("reshape size");
        self.push(t, Op::Reshape(x))
    }

    // ---- backward -------------------------------------------------------

    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0; self.value(root).numel()]);

        for idx in (0..=root.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let op = &self.nodes[idx].op;
            let out = self.value(Var(idx));
            match op {
                Op::Leaf | Op::Param(_) => {
                    grads[idx] = Some(gout);
                    continue;
                }
                Op::MatMul { a, b, trans_b } => {
                    let (m, k) = self.dims(*a);
                    let n = out.cols();
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    let mut ga = vec![0.0; m * k];
                    // dA = dC · Bᵀ (or dC · B when B was used transposed)
                    kernels::gemm(m, n, k, &gout, false, vb, !trans_b, &mut ga, 0.0);
                    add_grad(&mut grads, *a, &ga);
                    let mut gb = vec![0.0; k * n];
                    if *trans_b {
                        // B is n×k: dB = dCᵀ · A
                        kernels::gemm(n, m, k, &gout, true, va, false, &mut gb, 0.0);
                    } else {
                        kernels::gemm(k, m, n, va, true, &gout, false, &mut gb, 0.0);
                    }
                    add_grad(&mut grads, *b, &gb);
                }
                Op::Transpose(x) => {
                    let (r, c) = (out.rows(), out.cols());
                    let mut g = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            g[j * r + i] = gout[i * c + j];
                        }
                    }
                    add_grad(&mut grads, *x, &g);
                }
                Op::Add(a, b) => {
                    add_grad(&mut grads, *a, &gout);
                    add_grad(&mut grads, *b, &gout);
                }
                Op::Sub(a, b) => {
                    add_grad(&mut grads, *a, &gout);
                    let neg: Vec<Real> = gout.iter().map(|v| -v).collect();
                    add_grad(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    let ga: Vec<Real> = gout.iter().zip(vb).map(|(g, y)| g * y).collect();
                    let gb: Vec<Real> = gout.iter().zip(va).map(|(g, x)| g * x).collect();
                    add_grad(&mut grads, *a, &ga);
                    add_grad(&mut grads, *b, &gb);
                }
                Op::Scale(x, s) => {
                    let g: Vec<Real> = gout.iter().map(|v| v * s).collect();
                    add_grad(&mut grads, *x, &g);
                }
                Op::AddRowVec(x, v) | Op::AddColVec(x, v) => {
                    let per_col = matches!(op, Op::AddRowVec(..));
                    let (r, c) = (out.rows(), out.cols());
                    let mut gv = vec![0.0; if per_col { c } else { r }];
                    for i in 0..r {
                        for j in 0..c {
                            gv[if per_col { j } else { i }] += gout[i * c + j];
                        }
                    }
                    add_grad(&mut grads, *x, &gout);
                    add_grad(&mut grads, *v, &gv);
                }
                Op::MulRowVec(x, v) | Op::MulColVec(x, v) => {
                    let per_col = matches!(op, Op::MulRowVec(..));
                    let (r, c) = (out.rows(), out.cols());
                    let (vx, vv) = (self.value(*x).data(), self.value(*v).data());
                    let mut gx = vec![0.0; r * c];
                    let mut gv = vec![0.0; if per_col { c } else { r }];
                    for i in 0..r {
                        for j in 0..c {
                            let k = if per_col { j } else { i };
                            gx[i * c + j] = gout[i * c + j] * vv[k];
                            gv[k] += gout[i * c + j] * vx[i * c + j];
                        }
                    }
                    add_grad(&mut grads, *x, &gx);
                    add_grad(&mut grads, *v, &gv);
                }
                Op::LeakyRelu(x, slope) => {
                    let vx = self.value(*x).data();
                    let g: Vec<Real> = gout
                        .iter()
                        .zip(vx)
                        .map(|(g, v)| if *v >= 0.0 { *g } else { g * slope })
                        .collect();
                    add_grad(&mut grads, *x, &g);
                }
                Op::Tanh(x) => {
                    let g: Vec<Real> = gout
                        .iter()
                        .zip(out.data())
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    add_grad(&mut grads, *x, &g);
                }
                Op::Sigmoid(x) => {
                    let g: Vec<Real> = gout
                        .iter()
                        .zip(out.data())
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect();
                    add_grad(&mut grads, *x, &g);
                }
                Op::Conv1d {
                    x,
                    w,
                    stride,
                    padding,
                } => {
                    let (cin, len) = self.dims(*x);
                    let ws = self.value(*w).shape();
                    let (cout, k) = (ws[0], ws[2]);
                    let lout = out.cols();
                    let cols = im2col(self.value(*x).data(), cin, len, k, *stride, *padding, lout);
                    let mut gw = vec![0.0; cout * cin * k];
                    kernels::gemm(cout, lout, cin * k, &gout, false, &cols, true, &mut gw, 0.0);
                    add_grad(&mut grads, *w, &gw);
                    let mut gcols = vec![0.0; cin * k * lout];
                    kernels::gemm(
                        cin * k,
                        cout,
                        lout,
                        self.value(*w).data(),
                        true,
                        &gout,
                        false,
                        &mut gcols,
                        0.0,
                    );
                    let mut gx = vec![0.0; cin * len];
                    col2im_add(&gcols, &mut gx, cin, len, k, *stride, *padding, lout);
                    add_grad(&mut grads, *x, &gx);
                }
                Op::ConvTranspose1d {
                    x,
                    w,
                    stride,
                    padding,
                } => {
                    let (cin, len) = self.dims(*x);
                    let ws = self.value(*w).shape();
                    let (cout, k) = (ws[1], ws[2]);
                    let lout = out.cols();
                    let gcols = im2col(&gout, cout, lout, k, *stride, *padding, len);
                    // cols = Wᵀ x, so dW = x · gcolsᵀ and dx = W · gcols.
                    let mut gw = vec![0.0; cin * cout * k];
                    kernels::gemm(
                        cin,
                        len,
                        cout * k,
                        self.value(*x).data(),
                        false,
                        &gcols,
                        true,
                        &mut gw,
                        0.0,
                    );
                    add_grad(&mut grads, *w, &gw);
                    let mut gx = vec![0.0; cin * len];
                    kernels::gemm(
                        cin,
                        cout * k,
                        len,
                        self.value(*w).data(),
                        false,
                        &gcols,
                        false,
                        &mut gx,
                        0.0,
                    );
                    add_grad(&mut grads, *x, &gx);
                }
                Op::SoftmaxRows(x) => {
                    let c = out.cols();
                    let mut g = vec![0.0; gout.len()];
                    for (i, (yr, gr)) in out.data().chunks(c).zip(gout.chunks(c)).enumerate() {
                        let dot: Real = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..c {
                            g[i * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    add_grad(&mut grads, *x, &g);
                }
                Op::NormalizeRows { x, eps } => {
                    let (r, c) = (out.rows(), out.cols());
                    let src = self.value(*x).data();
                    let mut g = vec![0.0; r * c];
                    for i in 0..r {
                        let idx: Vec<usize> = (i * c..(i + 1) * c).collect();
                        normalize_backward(src, out.data(), &gout, &idx, *eps, &mut g);
                    }
                    add_grad(&mut grads, *x, &g);
                }
                Op::NormalizeCols { x, eps } => {
                    let (r, c) = (out.rows(), out.cols());
                    let src = self.value(*x).data();
                    let mut g = vec![0.0; r * c];
                    for j in 0..c {
                        let idx: Vec<usize> = (0..r).map(|i| i * c + j).collect();
                        normalize_backward(src, out.data(), &gout, &idx, *eps, &mut g);
                    }
                    add_grad(&mut grads, *x, &g);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                } => {
                    let (r, k) = self.dims(*logits);
                    let total: Real = weights.iter().sum();
                    let mut g = vec![0.0; r * k];
                    if total > 0.0 {
                        let data = self.value(*logits).data();
                        for i in 0..r {
                            if weights[i] == 0.0 {
                                continue;
                            }
                            let mut p = data[i * k..(i + 1) * k].to_vec();
                            softmax_in_place(&mut p);
                            p[targets[i]] -= 1.0;
                            let s = gout[0] * weights[i] / total;
                            for j in 0..k {
                                g[i * k + j] = s * p[j];
                            }
                        }
                    }
                    add_grad(&mut grads, *logits, &g);
                }
                Op::L1 { a, b, weights } => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    let n = va.len().max(1) as Real;
                    let ga: Vec<Real> = va
                        .iter()
                        .zip(vb)
                        .enumerate()
                        .map(|(i, (x, y))| {
                            let w = weights.as_ref().map_or(1.0, |w| w[i]);
                            gout[0] * w * sign(x - y) / n
                        })
                        .collect();
                    let gb: Vec<Real> = ga.iter().map(|v| -v).collect();
                    add_grad(&mut grads, *a, &ga);
                    add_grad(&mut grads, *b, &gb);
                }
                Op::MeanSqDiff(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    let n = va.len().max(1) as Real;
                    let ga: Vec<Real> = va
                        .iter()
                        .zip(vb)
                        .map(|(x, y)| gout[0] * 2.0 * (x - y) / n)
                        .collect();
                    let gb: Vec<Real> = ga.iter().map(|v| -v).collect();
                    add_grad(&mut grads, *a, &ga);
                    add_grad(&mut grads, *b, &gb);
                }
                Op::SliceRows { x, start } => {
                    let (r, c) = self.dims(*x);
                    let mut g = vec![0.0; r * c];
                    g[start * c..start * c + gout.len()].copy_from_slice(&gout);
                    add_grad(&mut grads, *x, &g);
                }
                Op::SliceCols { x, start } => {
                    let (r, c) = self.dims(*x);
                    let len = out.cols();
                    let mut g = vec![0.0; r * c];
                    for i in 0..r {
                        g[i * c + start..i * c + start + len]
                            .copy_from_slice(&gout[i * len..(i + 1) * len]);
                    }
                    add_grad(&mut grads, *x, &g);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).numel();
                        add_grad(&mut grads, p, &gout[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let (r, c) = (out.rows(), out.cols());
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.dims(p).1;
                        let mut g = Vec::with_capacity(r * w);
                        for i in 0..r {
                            g.extend_from_slice(&gout[i * c + offset..i * c + offset + w]);
                        }
                        add_grad(&mut grads, p, &g);
                        offset += w;
                    }
                }
                Op::GatherRows { x, index } => {
                    let (r, c) = self.dims(*x);
                    let mut g = vec![0.0; r * c];
                    for (o, &i) in index.iter().enumerate() {
                        for j in 0..c {
                            g[i * c + j] += gout[o * c + j];
                        }
                    }
                    add_grad(&mut grads, *x, &g);
                }
                Op::StraightThrough(z) => add_grad(&mut grads, *z, &gout),
                Op::DiffRows(x) => {
                    let (r, c) = self.dims(*x);
                    let mut g = vec![0.0; r * c];
                    for i in 0..r.saturating_sub(1) {
                        for j in 0..c {
                            let d = gout[i * c + j];
                            g[(i + 1) * c + j] += d;
                            g[i * c + j] -= d;
                        }
                    }
                    add_grad(&mut grads, *x, &g);
                }
                Op::DiffCols(x) => {
                    let (r, c) = self.dims(*x);
                    let n = c.saturating_sub(1);
                    let mut g = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..n {
                            let d = gout[i * n + j];
                            g[i * c + j + 1] += d;
                            g[i * c + j] -= d;
                        }
                    }
                    add_grad(&mut grads, *x, &g);
                }
                Op::Sum(x) => {
                    let g = vec![gout[0]; self.value(*x).numel()];
                    add_grad(&mut grads, *x, &g);
                }
                Op::Mean(x) => {
                    let n = self.value(*x).numel();
                    let g = vec![gout[0] / n.max(1) as Real; n];
                    add_grad(&mut grads, *x, &g);
                }
                Op::Reshape(x) => add_grad(&mut grads, *x, &gout),
            }
        }

        let params = self
            .param_vars
            .iter()
            .map(|(id, v)| (*id, v.0))
            .collect();
        Gradients { grads, params }
    }
}

fn add_grad(grads: &mut [Option<Vec<Real>>], v: Var, g: &[Real]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn sign(x: Real) -> Real {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn sigmoid(v: Real) -> Real {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[Real]) -> Real {
    let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<Real>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [Real]) {
    let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Population mean and variance.
pub(crate) fn moments(values: impl Iterator<Item = Real> + Clone) -> (Real, Real) {
    let mut n = 0usize;
    let mut sum = 0.0;
    for v in values.clone() {
        sum += v;
        n += 1;
    }
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = sum / n as Real;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<Real>() / n as Real;
    (mean, var)
}

fn normalize_backward(
    src: &[Real],
    out: &[Real],
    gout: &[Real],
    idx: &[usize],
    eps: Real,
    g: &mut [Real],
) {
    let n = idx.len() as Real;
    let (_, var) = moments(idx.iter().map(|&i| src[i]));
    let inv = 1.0 / var.max(eps).sqrt();
    let mean_g = idx.iter().map(|&i| gout[i]).sum::<Real>() / n;
    // Below the floor the scale is constant and only the centering remains.
    let mean_gy = if var > eps {
        idx.iter().map(|&i| gout[i] * out[i]).sum::<Real>() / n
    } else {
        0.0
    };
    for &i in idx {
        g[i] = inv * (gout[i] - mean_g - out[i] * mean_gy);
    }
}
