//! Recording graph and reverse sweep.
//!
//! Every operation appends a node whose inputs have smaller indices, so the
//! node list is already in topological order and the backward pass is a
//! single reverse scan. Gradients arriving at a node from several consumers
//! are summed.

use std::sync::Arc;

use rayon::prelude::*;

use super::gemm::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    in_ch: usize,
    height: usize,
    width: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reshape(Var),
    Permute { x: Var, map: Vec<usize> },
    SliceLast { x: Var, start: usize },
    ConcatLast(Vec<Var>),
    Sum(Var),
    Mean(Var),
    RowMask { x: Var, keep: Arc<[bool]> },
    MaskedMeanPool { x: Var, keep: Arc<[bool]> },
    BceWithLogits { logits: Var, targets: Vec<f64> },
    SupCon { z: Var, coeff: Vec<f64> },
    L2Normalize { x: Var, norms: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<Vec<f64>> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded recording context.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    branches: Branches,
}

/// Which side of each kink (`relu`, `minimum`) the forward pass takes.
#[derive(Default)]
enum Branches {
    #[default]
    Free,
    Record(Vec<bool>),
    Replay { taken: Vec<bool>, next: usize },
}

/// Gradients of one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape matches node"))
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("tensors have at least one axis")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// For each output position of a permutation, the input position it reads.
fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..numel {
        map.push(offset);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            offset += step[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= out_shape[axis] * step[axis];
            idx[axis] = 0;
        }
    }
    map
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let pos = g.positions();
    for c in 0..g.in_ch {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let out = &mut cols[row * pos..(row + 1) * pos];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        out[oy * g.out_w + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.height
                            && (ix as usize) < g.width
                        {
                            x[(c * g.height + iy as usize) * g.width + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let pos = g.positions();
    for c in 0..g.in_ch {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * pos..(row + 1) * pos];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dx[(c * g.height + iy as usize) * g.width + ix as usize] +=
                                src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that logs every branch decision of `relu` and `minimum`,
    /// one flag per element in evaluation order.
    pub fn recording() -> Self {
        Self {
            branches: Branches::Record(Vec::new()),
            ..Self::default()
        }
    }

    /// A graph whose `relu` and `minimum` follow a recorded branch log
    /// instead of comparing their inputs. The forward function is then the
    /// smooth piece active where the log was recorded.
    pub fn replaying(taken: Vec<bool>) -> Self {
        Self {
            branches: Branches::Replay { taken, next: 0 },
            ..Self::default()
        }
    }

    /// The branch log of a [`Graph::recording`] graph.
    pub fn take_branches(&mut self) -> Vec<bool> {
        match &mut self.branches {
            Branches::Record(v) => std::mem::take(v),
            _ => Vec::new(),
        }
    }

    /// Whether a [`Graph::replaying`] graph consumed exactly its whole log.
    pub fn replay_matched(&self) -> bool {
        match &self.branches {
            Branches::Replay { taken, next } => *next == taken.len(),
            _ => true,
        }
    }

    fn branch(&mut self, natural: bool) -> bool {
        match &mut self.branches {
            Branches::Free => natural,
            Branches::Record(v) => {
                v.push(natural);
                natural
            }
            Branches::Replay { taken, next } => {
                *next += 1;
                taken.get(*next - 1).copied().unwrap_or(natural)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn unary(&mut self, x: Var, data: Vec<f64>, op: Op) -> Var {
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data).expect("same shape"), op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Batched `[g, m, k] · [g, k, n]`, or `[g, m, k] · [g, n, k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (groups, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; groups * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for gi in 0..groups {
            gemm(
                m,
                k,
                n,
                &da[gi * m * k..(gi + 1) * m * k],
                false,
                &db[gi * k * n..(gi + 1) * k * n],
                trans_b,
                &mut out[gi * m * n..(gi + 1) * m * n],
                0.0,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![groups, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            rg,
        ))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = last_dim(self.shape(x));
        if self.shape(bias) != [n] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let out: Vec<f64> = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, b)| v + b))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias(x, bias), rg))
    }

    /// `x · w + b` for `x: [rows, in]`, `w: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise `a / b`; `b` must stay away from zero.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        let mut out = Vec::with_capacity(self.data(a).len());
        for i in 0..self.data(a).len() {
            let (x, y) = (self.data(a)[i], self.data(b)[i]);
            out.push(if self.branch(x <= y) { x } else { y });
        }
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Minimum(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.data(x).iter().map(|v| v * c).collect();
        self.unary(x, out, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.data(x).iter().map(|v| v + c).collect();
        self.unary(x, out, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = if matches!(self.branches, Branches::Free) {
            self.data(x).iter().map(|v| v.max(0.0)).collect()
        } else {
            let mut out = Vec::with_capacity(self.data(x).len());
            for i in 0..self.data(x).len() {
                let v = self.data(x)[i];
                let on = self.branch(v > 0.0);
                out.push(if on { v } else { 0.0 });
            }
            out
        };
        self.unary(x, out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        self.unary(x, out, Op::Sigmoid(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.softmax_impl(x, None)
    }

    /// Softmax over the last axis where `keep[i] == false` entries get
    /// exactly zero weight. A row with nothing kept is all zeros.
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        if keep.len() != self.value(x).numel() {
            return Err(Error::shape("masked_softmax", self.shape(x), &[keep.len()]));
        }
        Ok(self.softmax_impl(x, Some(keep)))
    }

    fn softmax_impl(&mut self, x: Var, keep: Option<&[bool]>) -> Var {
        let n = last_dim(self.shape(x));
        let data = self.data(x);
        let mut out = vec![0.0; data.len()];
        for (r, (row, dst)) in data.chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let kept = |j: usize| keep.is_none_or(|k| k[r * n + j]);
            let max = (0..n).filter(|&j| kept(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for j in (0..n).filter(|&j| kept(j)) {
                dst[j] = (row[j] - max).exp();
                sum += dst[j];
            }
            for v in dst.iter_mut() {
                *v /= sum;
            }
        }
        self.unary(x, out, Op::Softmax(x))
    }

    /// Normalizes each row over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = last_dim(self.shape(x));
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let data = self.data(x);
        let rows = data.len() / n;
        let mut xhat = vec![0.0; data.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; data.len()];
        for r in 0..rows {
            let row = &data[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[r * n + j] = h;
                out[r * n + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &shape, perm));
        }
        let map = permute_map(&shape, perm);
        let data = self.data(x);
        let out = map.iter().map(|&i| data[i]).collect();
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Permute { x, map }, rg))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = last_dim(&shape);
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_last", &shape, &[start, len]));
        }
        let out = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SliceLast { x, start }, rg))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        for &p in parts {
            if &self.shape(p)[..self.shape(p).len() - 1] != lead {
                return Err(Error::shape("concat_last", self.shape(first), self.shape(p)));
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|&p| last_dim(self.shape(p))).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::ConcatLast(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Zeroes whole rows: `x` is viewed as `keep.len()` equal rows.
    pub fn row_mask(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let numel = self.value(x).numel();
        if keep.is_empty() || numel % keep.len() != 0 {
            return Err(Error::shape("row_mask", self.shape(x), &[keep.len()]));
        }
        let width = numel / keep.len();
        let out = self
            .data(x)
            .chunks(width)
            .zip(keep)
            .flat_map(|(row, &k)| row.iter().map(move |&v| if k { v } else { 0.0 }))
            .collect();
        Ok(self.unary(x, out, Op::RowMask { x, keep: keep.into() }))
    }

    /// Mean over the kept elements of each set: `[b, n, d]` → `[b, d]`.
    pub fn masked_mean_pool(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || keep.len() != shape[0] * shape[1] {
            return Err(Error::shape("masked_mean_pool", &shape, &[keep.len()]));
        }
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let data = self.data(x);
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            let count = keep[bi * n..(bi + 1) * n].iter().filter(|&&k| k).count();
            if count == 0 {
                continue;
            }
            for ni in (0..n).filter(|&ni| keep[bi * n + ni]) {
                let row = &data[(bi * n + ni) * d..(bi * n + ni + 1) * d];
                for (o, v) in out[bi * d..(bi + 1) * d].iter_mut().zip(row) {
                    *o += v / count as f64;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![b, d], out)?, Op::MaskedMeanPool { x, keep: keep.into() }, rg))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let z = self.data(logits);
        if z.len() != targets.len() {
            return Err(Error::shape("bce_with_logits", self.shape(logits), &[targets.len()]));
        }
        let loss = z
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / z.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Supervised contrastive loss of embeddings `z: [b, d]` with class
    /// `labels`, averaged over anchors. Each label must occur at least twice.
    pub fn supcon_loss(&mut self, z: Var, labels: &[usize], temperature: f64) -> Result<Var> {
        let shape = self.shape(z).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape("supcon_loss", &shape, &[labels.len()]));
        }
        if temperature <= 0.0 {
            return Err(Error::Usage(format!("temperature must be positive, got {temperature}")));
        }
        let (b, d) = (shape[0], shape[1]);
        for &l in labels {
            if labels.iter().filter(|&&m| m == l).count() < 2 {
                return Err(Error::Usage(format!("label {l} appears only once in the batch")));
            }
        }
        let zd = self.data(z);
        let mut sim = vec![0.0; b * b];
        gemm(b, d, b, zd, false, zd, true, &mut sim, 0.0);
        sim.iter_mut().for_each(|s| *s /= temperature);

        // g[i][a] = dL/dsim[i][a]
        let mut g = vec![0.0; b * b];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &sim[i * b..(i + 1) * b];
            let max = (0..b).filter(|&a| a != i).map(|a| row[a]).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..b).filter(|&a| a != i).map(|a| (row[a] - max).exp()).sum();
            let lse = max + denom.ln();
            let positives: Vec<usize> = (0..b).filter(|&p| p != i && labels[p] == labels[i]).collect();
            let np = positives.len() as f64;
            loss += lse - positives.iter().map(|&p| row[p]).sum::<f64>() / np;
            for a in (0..b).filter(|&a| a != i) {
                let q = (row[a] - lse).exp();
                let pos = if labels[a] == labels[i] { 1.0 / np } else { 0.0 };
                g[i * b + a] = (q - pos) / b as f64;
            }
        }
        loss /= b as f64;
        // dL/dz = (G + Gᵀ) z / τ
        let coeff: Vec<f64> = (0..b * b)
            .map(|ia| {
                let (i, a) = (ia / b, ia % b);
                (g[i * b + a] + g[a * b + i]) / temperature
            })
            .collect();
        let rg = self.rg(z);
        Ok(self.push(Tensor::scalar(loss), Op::SupCon { z, coeff }, rg))
    }

    /// Scales each row over the last axis to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let n = last_dim(self.shape(x));
        let data = self.data(x);
        let norms: Vec<f64> = data
            .chunks(n)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12))
            .collect();
        let out = data
            .chunks(n)
            .zip(&norms)
            .flat_map(|(r, &nm)| r.iter().map(move |v| v / nm))
            .collect();
        self.unary(x, out, Op::L2Normalize { x, norms })
    }

    /// 2-D convolution of `x: [b, c, h, w]` with `w: [o, c, k, k]` and bias `[o]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || stride == 0 {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if self.shape(b) != [sw[0]] {
            return Err(Error::shape("conv2d bias", &sw, self.shape(b)));
        }
        let k = sw[2];
        if sx[2] + 2 * pad < k || sx[3] + 2 * pad < k {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            height: sx[2],
            width: sx[3],
            out_ch: sw[0],
            kernel: k,
            stride,
            pad,
            out_h: (sx[2] + 2 * pad - k) / stride + 1,
            out_w: (sx[3] + 2 * pad - k) / stride + 1,
        };
        let (patch, pos) = (geom.patch(), geom.positions());
        let in_size = geom.in_ch * geom.height * geom.width;
        let out_size = geom.out_ch * pos;
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = vec![0.0; geom.batch * out_size];
        let cols: Vec<Vec<f64>> = out
            .par_chunks_mut(out_size)
            .enumerate()
            .map(|(bi, dst)| {
                let mut col = vec![0.0; patch * pos];
                im2col(&xd[bi * in_size..(bi + 1) * in_size], &geom, &mut col);
                for (o, chunk) in dst.chunks_mut(pos).enumerate() {
                    chunk.fill(bd[o]);
                }
                gemm(geom.out_ch, patch, pos, wd, false, &col, false, dst, 1.0);
                col
            })
            .collect();
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let shape = vec![geom.batch, geom.out_ch, geom.out_h, geom.out_w];
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0].value;
        if out.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        if !out.is_finite() {
            return Err(Error::Usage("backward from a non-finite output".into()));
        }
        let count = output.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; count];
        grads[output.0] = Some(vec![1.0]);

        for i in (0..count).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes[..count].iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |g| gemm(m, n, k, dy, false, db, true, g, 1.0));
                acc(*b, &mut |g| gemm(k, m, n, da, true, dy, false, g, 1.0));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (groups, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |g| {
                    for gi in 0..groups {
                        let dyg = &dy[gi * m * n..(gi + 1) * m * n];
                        let bg = &db[gi * k * n..(gi + 1) * k * n];
                        // dA = dY · op(B)ᵀ
                        gemm(m, n, k, dyg, false, bg, !trans_b, &mut g[gi * m * k..(gi + 1) * m * k], 1.0);
                    }
                });
                acc(*b, &mut |g| {
                    for gi in 0..groups {
                        let dyg = &dy[gi * m * n..(gi + 1) * m * n];
                        let ag = &da[gi * m * k..(gi + 1) * m * k];
                        let dst = &mut g[gi * k * n..(gi + 1) * k * n];
                        if *trans_b {
                            // B is [n, k]: dB = dYᵀ · A
                            gemm(n, m, k, dyg, true, ag, false, dst, 1.0);
                        } else {
                            gemm(k, m, n, ag, true, dyg, false, dst, 1.0);
                        }
                    }
                });
            }
            Op::AddBias(x, b) => {
                let n = last_dim(self.shape(*b));
                acc(*x, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                acc(*b, &mut |g| {
                    for row in dy.chunks(n) {
                        g.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                acc(*b, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                acc(*b, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |g| {
                    for ((g, d), y) in g.iter_mut().zip(dy).zip(db) {
                        *g += d * y;
                    }
                });
                acc(*b, &mut |g| {
                    for ((g, d), x) in g.iter_mut().zip(dy).zip(da) {
                        *g += d * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |g| {
                    for ((g, d), y) in g.iter_mut().zip(dy).zip(db) {
                        *g += d / y;
                    }
                });
                acc(*b, &mut |g| {
                    for (i, g) in g.iter_mut().enumerate() {
                        *g -= dy[i] * da[i] / (db[i] * db[i]);
                    }
                });
            }
            Op::Minimum(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        if da[i] <= db[i] {
                            g[i] += dy[i];
                        }
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        if da[i] > db[i] {
                            g[i] += dy[i];
                        }
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += c * d)),
            Op::AddScalar(x) | Op::Reshape(x) => {
                acc(*x, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d))
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        if xd[i] > 0.0 {
                            g[i] += dy[i];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = last_dim(node.value.shape());
                acc(*x, &mut |g| {
                    for ((gr, yr), dr) in g.chunks_mut(n).zip(y.chunks(n)).zip(dy.chunks(n)) {
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = last_dim(node.value.shape());
                let gd = self.data(*gamma);
                acc(*gamma, &mut |g| {
                    for (row_d, row_h) in dy.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            g[j] += row_d[j] * row_h[j];
                        }
                    }
                });
                acc(*beta, &mut |g| {
                    for row in dy.chunks(n) {
                        g.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                });
                acc(*x, &mut |g| {
                    let mut dh = vec![0.0; n];
                    for (r, gr) in g.chunks_mut(n).enumerate() {
                        let (dr, hr) = (&dy[r * n..(r + 1) * n], &xhat[r * n..(r + 1) * n]);
                        for j in 0..n {
                            dh[j] = dr[j] * gd[j];
                        }
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let scale = inv_std[r] / n as f64;
                        for j in 0..n {
                            gr[j] += scale * (n as f64 * dh[j] - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                });
            }
            Op::Permute { x, map } => acc(*x, &mut |g| {
                for (o, &i) in map.iter().enumerate() {
                    g[i] += dy[o];
                }
            }),
            Op::SliceLast { x, start } => {
                let n = last_dim(self.shape(*x));
                let len = last_dim(node.value.shape());
                acc(*x, &mut |g| {
                    for (gr, dr) in g.chunks_mut(n).zip(dy.chunks(len)) {
                        for j in 0..len {
                            gr[start + j] += dr[j];
                        }
                    }
                });
            }
            Op::ConcatLast(parts) => {
                let total = last_dim(node.value.shape());
                let mut offset = 0;
                for &p in parts {
                    let w = last_dim(self.shape(p));
                    acc(p, &mut |g| {
                        for (gr, dr) in g.chunks_mut(w).zip(dy.chunks(total)) {
                            for j in 0..w {
                                gr[j] += dr[offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|g| *g += dy[0])),
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                acc(*x, &mut |g| g.iter_mut().for_each(|g| *g += dy[0] / n));
            }
            Op::RowMask { x, keep } => {
                let width = node.value.numel() / keep.len();
                acc(*x, &mut |g| {
                    for ((gr, dr), &k) in g.chunks_mut(width).zip(dy.chunks(width)).zip(keep.iter()) {
                        if k {
                            gr.iter_mut().zip(dr).for_each(|(g, d)| *g += d);
                        }
                    }
                });
            }
            Op::MaskedMeanPool { x, keep } => {
                let s = self.shape(*x);
                let (b, n, d) = (s[0], s[1], s[2]);
                acc(*x, &mut |g| {
                    for bi in 0..b {
                        let count = keep[bi * n..(bi + 1) * n].iter().filter(|&&k| k).count();
                        for ni in (0..n).filter(|&ni| keep[bi * n + ni]) {
                            for j in 0..d {
                                g[(bi * n + ni) * d + j] += dy[bi * d + j] / count as f64;
                            }
                        }
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.data(*logits);
                let n = z.len() as f64;
                acc(*logits, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[0] * (sigmoid(z[i]) - targets[i]) / n;
                    }
                });
            }
            Op::SupCon { z, coeff } => {
                let s = self.shape(*z);
                let (b, d) = (s[0], s[1]);
                let zd = self.data(*z);
                let scaled: Vec<f64> = coeff.iter().map(|c| c * dy[0]).collect();
                acc(*z, &mut |g| gemm(b, b, d, &scaled, false, zd, false, g, 1.0));
            }
            Op::L2Normalize { x, norms } => {
                let n = last_dim(node.value.shape());
                let y = node.value.data();
                acc(*x, &mut |g| {
                    for (r, gr) in g.chunks_mut(n).enumerate() {
                        let (yr, dr) = (&y[r * n..(r + 1) * n], &dy[r * n..(r + 1) * n]);
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gr[j] += (dr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (patch, pos) = (geom.patch(), geom.positions());
                let out_size = geom.out_ch * pos;
                let in_size = geom.in_ch * geom.height * geom.width;
                let wd = self.data(*w);
                acc(*b, &mut |g| {
                    for chunk in dy.chunks(out_size) {
                        for (o, row) in chunk.chunks(pos).enumerate() {
                            g[o] += row.iter().sum::<f64>();
                        }
                    }
                });
                acc(*w, &mut |g| {
                    let partials: Vec<Vec<f64>> = (0..geom.batch)
                        .into_par_iter()
                        .map(|bi| {
                            let mut p = vec![0.0; geom.out_ch * patch];
                            let dyb = &dy[bi * out_size..(bi + 1) * out_size];
                            gemm(geom.out_ch, pos, patch, dyb, false, &cols[bi], true, &mut p, 0.0);
                            p
                        })
                        .collect();
                    for p in partials {
                        g.iter_mut().zip(&p).for_each(|(g, v)| *g += v);
                    }
                });
                acc(*x, &mut |g| {
                    g.par_chunks_mut(in_size).enumerate().for_each(|(bi, gx)| {
                        let mut dcol = vec![0.0; patch * pos];
                        let dyb = &dy[bi * out_size..(bi + 1) * out_size];
                        gemm(patch, geom.out_ch, pos, wd, true, dyb, false, &mut dcol, 0.0);
                        col2im(&dcol, geom, gx);
                    });
                });
            }
        }
    }
}
