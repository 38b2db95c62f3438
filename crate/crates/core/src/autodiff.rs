//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation executed on it in order. Calling
//! [`Graph::backward`] replays the tape in reverse, applying each operation's
//! adjoint rule. Gradients accumulate across repeated `backward` calls until
//! [`Graph::zero_grad`].

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{contract, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    AddBias,
    Scale,
    ScaleBy,
    ScaleRows,
    Recip,
    MatMul,
    Transpose,
    Reshape,
    Concat,
    Narrow,
    Softmax,
    MaskFill,
    Sum,
    Mean,
    SumAxis,
    MeanAxis,
    L2Norm,
    LayerNorm,
    Gelu,
    Embedding,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 25] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddBias,
        OpKind::Scale,
        OpKind::ScaleBy,
        OpKind::ScaleRows,
        OpKind::Recip,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::Softmax,
        OpKind::MaskFill,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SumAxis,
        OpKind::MeanAxis,
        OpKind::L2Norm,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::Embedding,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddBias => "add_bias",
            OpKind::Scale => "scale",
            OpKind::ScaleBy => "scale_by",
            OpKind::ScaleRows => "scale_rows",
            OpKind::Recip => "recip",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::Softmax => "softmax",
            OpKind::MaskFill => "mask_fill",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumAxis => "sum_axis",
            OpKind::MeanAxis => "mean_axis",
            OpKind::L2Norm => "l2_norm",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::Embedding => "embedding",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    ScaleRows(Var, Var),
    Recip(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Box<[Var]>, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Softmax(Var, usize),
    MaskFill(Var, Box<[bool]>),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    L2Norm(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Box<[T]>,
        inv_std: Box<[T]>,
    },
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Box<[usize]>,
    },
    CrossEntropy {
        logits: Var,
        targets: Box<[Option<usize>]>,
        probs: Box<[T]>,
        count: usize,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Scale(..) => OpKind::Scale,
            Op::ScaleBy(..) => OpKind::ScaleBy,
            Op::ScaleRows(..) => OpKind::ScaleRows,
            Op::Recip(..) => OpKind::Recip,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Concat(..) => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Softmax(..) => OpKind::Softmax,
            Op::MaskFill(..) => OpKind::MaskFill,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::SumAxis(..) => OpKind::SumAxis,
            Op::MeanAxis(..) => OpKind::MeanAxis,
            Op::L2Norm(..) => OpKind::L2Norm,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The computation tape.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    bound: Vec<Option<Var>>,
    bound_list: Vec<(ParamId, Var)>,
    fault: Option<(OpKind, T)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `(outer, len, inner)` strides for an axis of a shape.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &d)| d)
        .collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

/// `out[p×r] += a[p×q] · b[q×r]`
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let a_row = &a[i * q..(i + 1) * q];
        let out_row = &mut out[i * r..(i + 1) * r];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &b[k * r..(k + 1) * r];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// `out[q×r] += a[p×q]ᵀ · g[p×r]`
fn gemm_tn<T: Real>(a: &[T], g: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    for k in 0..p {
        let a_row = &a[k * q..(k + 1) * q];
        let g_row = &g[k * r..(k + 1) * r];
        for (i, &aki) in a_row.iter().enumerate() {
            let out_row = &mut out[i * r..(i + 1) * r];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += aki * gv;
            }
        }
    }
}

/// `out[p×q] += a[p×r] · b[q×r]ᵀ`
fn gemm_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    let bt = transpose_2d(b, q, r);
    gemm_nn(a, &bt, out, p, r, q);
}

fn transpose_2d<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::of(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = T::of(0.044_715);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x);
    (y, dy)
}

/// GELU (tanh approximation) evaluated outside the tape.
pub fn gelu<T: Real>(x: T) -> T {
    gelu_parts(x).0
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            bound: Vec::new(),
            bound_list: Vec::new(),
            fault: None,
        }
    }

    /// Scales every adjoint produced by operations of `kind` by `factor`.
    /// Used by negative-control gradient checks.
    pub fn inject_adjoint_fault(&mut self, kind: OpKind, factor: T) {
        self.fault = Some((kind, factor));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Binds a stored parameter as a leaf, once per graph.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(Some(v)) = self.bound.get(id.index()) {
            return *v;
        }
        let v = self.leaf(store.value(id).clone(), store.is_trainable(id));
        if self.bound.len() <= id.index() {
            self.bound.resize(id.index() + 1, None);
        }
        self.bound[id.index()] = Some(v);
        self.bound_list.push((id, v));
        v
    }

    /// Adds `scale ×` the accumulated gradient of every bound trainable
    /// parameter into the store's gradient buffers.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>, scale: T) {
        for &(id, v) in &self.bound_list {
            if let Some(g) = &self.grads[v.0] {
                for (dst, &src) in store.grad_mut(id).iter_mut().zip(g) {
                    *dst += scale * src;
                }
            }
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.nodes[v.0].value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- element-wise -------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape(), data).expect("zip shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |p, q| p + q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |p, q| p - q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |p, q| p * q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(bias).numel() != cols {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::Dimension {
                op: "scale_by",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let sv = self.value(s).item();
        let out = self.value(x).map(|v| v * sv);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::ScaleBy(x, s), rg))
    }

    /// Multiplies row `r` of `x` (viewed as `[rows, cols]`) by `s[r]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let rows = self.value(x).rows();
        if self.value(s).numel() != rows {
            return Err(Error::Dimension {
                op: "scale_rows",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let cols = self.value(x).cols();
        let sv = self.value(s).data().to_vec();
        let mut out = self.value(x).clone();
        for (row, &k) in out.data_mut().chunks_mut(cols).zip(&sv) {
            row.iter_mut().for_each(|v| *v *= k);
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::ScaleRows(x, s), rg))
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|v| v.is_zero()) {
            return contract("recip of zero");
        }
        let out = self.value(x).map(|v| T::one() / v);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Recip(x), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    // ---- structural ----------------------------------------------------

    /// Matrix product over the last two axes. `b` may be rank 2 (shared
    /// across `a`'s leading batch axes) or carry the same batch axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::Dimension {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (q2, r) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if q != q2 {
            return Err(mismatch());
        }
        let batched_b = sb.len() > 2;
        if batched_b && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(mismatch());
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([p, r]);
        let out = if batched_b {
            let batch = self.value(a).numel() / (p * q);
            let mut out = vec![T::zero(); batch * p * r];
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                gemm_nn(
                    &ad[bi * p * q..(bi + 1) * p * q],
                    &bd[bi * q * r..(bi + 1) * q * r],
                    &mut out[bi * p * r..(bi + 1) * p * r],
                    p,
                    q,
                    r,
                );
            }
            out
        } else {
            let rows = self.value(a).numel() / q;
            let mut out = vec![T::zero(); rows * r];
            gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, rows, q, r);
            out
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::Axis { axis: 1, rank: s.len() });
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let mut shape = s.clone();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let mut out = Vec::with_capacity(self.value(x).numel());
        for block in self.value(x).data().chunks(rows * cols) {
            out.extend(transpose_2d(block, rows, cols));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = match xs.first() {
            Some(&f) => self.shape(f).to_vec(),
            None => return contract("concat of zero tensors"),
        };
        if axis >= first.len() {
            return Err(Error::Axis {
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                let d = self.value(x).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat(xs.into(), axis), rg))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Axis { axis, rank: s.len() });
        }
        if len == 0 || start + len > s[axis] {
            return Err(Error::Index {
                index: start + len,
                size: s[axis],
            });
        }
        let (outer, full, inner) = split_axis(&s, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Narrow { x, axis, start }, rg))
    }

    // ---- reductions & normalisation -----------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::of(self.value(x).numel() as f64);
        let s = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s / n), Op::Mean(x), rg)
    }

    fn reduce_axis(&self, x: Var, axis: usize) -> Result<Tensor<T>> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(Error::Axis { axis, rank: s.len() });
        }
        let (outer, len, inner) = split_axis(s, axis);
        let d = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        Tensor::new(&reduced_shape(s, axis), out)
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.reduce_axis(x, axis)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SumAxis(x, axis), rg))
    }

    /// Mean along `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = T::of(self.shape(x)[axis.min(self.shape(x).len() - 1)] as f64);
        let out = self.reduce_axis(x, axis)?.map(|v| v / len);
        let rg = self.rg(x);
        Ok(self.push(out, Op::MeanAxis(x, axis), rg))
    }

    /// Euclidean norm along the last axis.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out: Vec<T> = xv
            .data()
            .chunks(xv.cols())
            .map(|r| r.iter().fold(T::zero(), |a, &b| a + b * b).sqrt())
            .collect();
        let shape = reduced_shape(xv.shape(), xv.rank() - 1);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::L2Norm(x), rg))
    }

    /// Softmax along `axis`, computed with the per-slice maximum subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Axis { axis, rank: s.len() });
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let d = self.value(x).data();
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).fold(T::neg_infinity(), |m, l| m.max(d[idx(l)]));
                let mut z = T::zero();
                for l in 0..len {
                    let e = (d[idx(l)] - m).exp();
                    out[idx(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[idx(l)] /= z;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&s, out)?, Op::Softmax(x, axis), rg))
    }

    /// Replaces masked positions (`true`) with negative infinity.
    pub fn mask_fill(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::Dimension {
                op: "mask_fill",
                lhs: self.shape(x).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let mut out = self.value(x).clone();
        for (v, &m) in out.data_mut().iter_mut().zip(mask) {
            if m {
                *v = T::neg_infinity();
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaskFill(x, mask.into()), rg))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let n = T::of(cols as f64);
        let eps = T::of(LN_EPS);
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = vec![T::zero(); xv.numel()];
        for (r, row) in xv.data().chunks(cols).enumerate() {
            let mu = row.iter().fold(T::zero(), |a, &b| a + b) / n;
            let var = row.iter().fold(T::zero(), |a, &b| a + (b - mu) * (b - mu)) / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mu) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gv[c] + bv[c];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: xhat.into(),
                inv_std: inv_std.into(),
            },
            rg,
        ))
    }

    /// Gathers rows of `table` (`[vocab, d]`) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::Shape {
                shape: tv.shape().to_vec(),
                reason: "embedding table must be rank 2".into(),
            });
        }
        if ids.is_empty() {
            return contract("embedding lookup of an empty id sequence");
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    index: id,
                    size: vocab,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(&[ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.into(),
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (`[rows, classes]`). Rows whose target equals `ignore` do
    /// not contribute.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: Option<usize>) -> Result<Var> {
        let lv = self.value(logits);
        let classes = lv.cols();
        if lv.rows() != targets.len() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![T::zero(); lv.numel()];
        let mut kept = Vec::with_capacity(targets.len());
        let mut total = T::zero();
        let mut count = 0;
        for (r, row) in lv.data().chunks(classes).enumerate() {
            let t = targets[r];
            if Some(t) == ignore {
                kept.push(None);
                continue;
            }
            if t >= classes {
                return Err(Error::Index {
                    index: t,
                    size: classes,
                });
            }
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let z = row.iter().fold(T::zero(), |a, &v| a + (v - m).exp());
            let lse = m + z.ln();
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - lse).exp();
            }
            total += lse - row[t];
            count += 1;
            kept.push(Some(t));
        }
        if count == 0 {
            return contract("cross_entropy with no scored targets");
        }
        let loss = total / T::of(count as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: kept.into(),
                probs: probs.into(),
                count,
            },
            rg,
        ))
    }

    // ---- composites ----------------------------------------------------

    /// `softmax(q kᵀ / √d_k) v`, with optional `[a, b]` mask (`true` = hidden).
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] {
            return Err(Error::Dimension {
                op: "scaled_dot_attention",
                lhs: sq,
                rhs: sk,
            });
        }
        if sk[0] != sv[0] {
            return Err(Error::Dimension {
                op: "scaled_dot_attention",
                lhs: sk,
                rhs: sv,
            });
        }
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scores = self.scale(scores, T::one() / T::of(sq[1] as f64).sqrt());
        let scores = match mask {
            Some(m) => self.mask_fill(scores, m)?,
            None => scores,
        };
        let probs = self.softmax(scores, 1)?;
        self.matmul(probs, v)
    }

    /// Cosine similarity between corresponding rows of two `[rows, d]` tensors.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_rows", a, b)?;
        let prod = self.mul(a, b)?;
        let last = self.value(prod).rank() - 1;
        let dot = self.sum_axis(prod, last)?;
        let na = self.l2_norm(a)?;
        let nb = self.l2_norm(b)?;
        if self.value(na).data().iter().chain(self.value(nb).data()).any(|v| v.is_zero()) {
            return contract("cosine similarity of a zero vector");
        }
        let denom = self.mul(na, nb)?;
        let inv = self.recip(denom)?;
        self.mul(dot, inv)
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let n = self.l2_norm(x)?;
        if self.value(n).data().iter().any(|v| v.is_zero()) {
            return contract("normalising a zero vector");
        }
        let inv = self.recip(n)?;
        self.scale_rows(x, inv)
    }

    // ---- backward ------------------------------------------------------

    /// Back-propagates from a scalar `loss`, accumulating into every
    /// gradient-tracking node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let factor = match self.fault {
                Some((k, f)) if k == node.op.kind() => f,
                _ => T::one(),
            };
            self.node_backward(i, &g, factor, &mut adj);
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[T], factor: T, adj: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = adj[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
            if factor == T::one() {
                f(buf);
            } else {
                let mut tmp = vec![T::zero(); buf.len()];
                f(&mut tmp);
                buf.iter_mut().zip(tmp).for_each(|(b, t)| *b += factor * t);
            }
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((x, &gy), &w) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gy * w;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, &gy), &w) in gb.iter_mut().zip(g).zip(av) {
                        *x += gy * w;
                    }
                });
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(p, &q)| *p += q));
                let cols = nodes[b.0].value.numel();
                acc(*b, &mut |gb| {
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(p, &q)| *p += q);
                    }
                });
            }
            Op::Scale(x, s) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(p, &q)| *p += *s * q));
            }
            Op::ScaleBy(x, s) => {
                let sv = val(*s)[0];
                let xv = val(*x);
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(p, &q)| *p += sv * q));
                acc(*s, &mut |gs| {
                    gs[0] += g.iter().zip(xv).fold(T::zero(), |a, (&p, &q)| a + p * q);
                });
            }
            Op::ScaleRows(x, s) => {
                let (xv, sv) = (val(*x), val(*s));
                let cols = nodes[x.0].value.cols();
                acc(*x, &mut |gx| {
                    for ((gr, row), &k) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(sv) {
                        gr.iter_mut().zip(row).for_each(|(p, &q)| *p += k * q);
                    }
                });
                acc(*s, &mut |gs| {
                    for (r, (grow, xrow)) in g.chunks(cols).zip(xv.chunks(cols)).enumerate() {
                        gs[r] += grow.iter().zip(xrow).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    }
                });
            }
            Op::Recip(x) => {
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for ((p, &q), &yv) in gx.iter_mut().zip(g).zip(y) {
                        *p -= q * yv * yv;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let r = sb[sb.len() - 1];
                let (av, bv) = (val(*a), val(*b));
                if sb.len() > 2 {
                    let batch = av.len() / (p * q);
                    acc(*a, &mut |ga| {
                        for bi in 0..batch {
                            gemm_nt(
                                &g[bi * p * r..(bi + 1) * p * r],
                                &bv[bi * q * r..(bi + 1) * q * r],
                                &mut ga[bi * p * q..(bi + 1) * p * q],
                                p,
                                q,
                                r,
                            );
                        }
                    });
                    acc(*b, &mut |gb| {
                        for bi in 0..batch {
                            gemm_tn(
                                &av[bi * p * q..(bi + 1) * p * q],
                                &g[bi * p * r..(bi + 1) * p * r],
                                &mut gb[bi * q * r..(bi + 1) * q * r],
                                p,
                                q,
                                r,
                            );
                        }
                    });
                } else {
                    let rows = av.len() / q;
                    acc(*a, &mut |ga| gemm_nt(g, bv, ga, rows, q, r));
                    acc(*b, &mut |gb| gemm_tn(av, g, gb, rows, q, r));
                }
            }
            Op::Transpose(x) => {
                let s = nodes[x.0].value.shape();
                let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
                acc(*x, &mut |gx| {
                    for (blk, gblk) in gx.chunks_mut(rows * cols).zip(g.chunks(rows * cols)) {
                        for i in 0..rows {
                            for j in 0..cols {
                                blk[i * cols + j] += gblk[j * rows + i];
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(p, &q)| *p += q));
            }
            Op::Concat(xs, axis) => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &x in xs.iter() {
                    let len = nodes[x.0].value.shape()[*axis];
                    acc(x, &mut |gx| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for k in 0..len * inner {
                                gx[dst + k] += g[src + k];
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                let len = node.value.shape()[*axis];
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let dst = o * full * inner + start * inner;
                        let src = o * len * inner;
                        for k in 0..len * inner {
                            gx[dst + k] += g[src + k];
                        }
                    }
                });
            }
            Op::Softmax(x, axis) => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |l: usize| (o * len + l) * inner + i;
                            let dot = (0..len).fold(T::zero(), |a, l| a + g[idx(l)] * y[idx(l)]);
                            for l in 0..len {
                                gx[idx(l)] += y[idx(l)] * (g[idx(l)] - dot);
                            }
                        }
                    }
                });
            }
            Op::MaskFill(x, mask) => {
                acc(*x, &mut |gx| {
                    for ((p, &q), &m) in gx.iter_mut().zip(g).zip(mask.iter()) {
                        if !m {
                            *p += q;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |gx| gx.iter_mut().for_each(|p| *p += g[0]));
            }
            Op::Mean(x) => {
                let n = T::of(nodes[x.0].value.numel() as f64);
                acc(*x, &mut |gx| gx.iter_mut().for_each(|p| *p += g[0] / n));
            }
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let (outer, len, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                let k = if matches!(node.op, Op::MeanAxis(..)) {
                    T::one() / T::of(len as f64)
                } else {
                    T::one()
                };
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                gx[(o * len + l) * inner + i] += k * g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::L2Norm(x) => {
                let xv = &nodes[x.0].value;
                let cols = xv.cols();
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for (r, (grow, xrow)) in gx.chunks_mut(cols).zip(xv.data().chunks(cols)).enumerate() {
                        if y[r].is_zero() {
                            continue;
                        }
                        let k = g[r] / y[r];
                        grow.iter_mut().zip(xrow).for_each(|(p, &q)| *p += k * q);
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
                let cols = nodes[gamma.0].value.numel();
                let gv = val(*gamma);
                acc(*beta, &mut |gb| {
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(p, &q)| *p += q);
                    }
                });
                acc(*gamma, &mut |gg| {
                    for (row, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            gg[c] += row[c] * hrow[c];
                        }
                    }
                });
                let n = T::of(cols as f64);
                acc(*x, &mut |gx| {
                    for (r, ((gxr, row), hrow)) in gx
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(xhat.chunks(cols))
                        .enumerate()
                    {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for c in 0..cols {
                            let d = row[c] * gv[c];
                            m1 += d;
                            m2 += d * hrow[c];
                        }
                        m1 /= n;
                        m2 /= n;
                        for c in 0..cols {
                            let d = row[c] * gv[c];
                            gxr[c] += inv_std[r] * (d - m1 - hrow[c] * m2);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((p, &q), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        *p += q * gelu_parts(xi).1;
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].value.cols();
                acc(*table, &mut |gt| {
                    for (row, &id) in g.chunks(d).zip(ids.iter()) {
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(p, &q)| *p += q);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let classes = nodes[logits.0].value.cols();
                let k = g[0] / T::of(*count as f64);
                acc(*logits, &mut |gl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for c in 0..classes {
                            gl[r * classes + c] += k * probs[r * classes + c];
                        }
                        gl[r * classes + t] -= k;
                    }
                });
            }
        }
    }
}
