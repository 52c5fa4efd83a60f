use std::cell::RefCell;
use std::rc::Rc;

use crate::conv::{conv2d_forward, ConvGeometry};
use crate::error::{DiffError, Result};
use crate::scalar::{gemm, Real};
use crate::tensor::Tensor;
use crate::Conv2dSpec;

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Conv2d { x: Var, k: Var, geom: ConvGeometry },
    AddBias { x: Var, b: Var },
    AddChannelBias { x: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    LogSumExp { x: Var, axis: usize, mask: Option<Rc<Vec<bool>>> },
    Sum { x: Var, axis: usize },
    Mean { x: Var, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    PNorm { x: Var, p: u8 },
    SqNorm(Var),
    Reshape(Var),
    Transpose(Var),
    Take { x: Var, indices: Rc<Vec<usize>> },
    Concat { parts: Vec<Var> },
}

pub(crate) struct Node<T> {
    pub value: Rc<Tensor<T>>,
    pub op: Op<T>,
    pub needs_grad: bool,
}

/// Records tensor operations for reverse-mode differentiation.
///
/// Every op evaluates eagerly and appends one node. Nodes are never removed,
/// so a graph is meant to live for one forward/backward pass.
pub struct Graph<T: Real> {
    pub(crate) nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn without_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    fn unary(&self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let xv = self.value(x);
        let out = xv.map(f);
        self.push(out, op, self.needs(x))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(Rc<Tensor<T>>, Rc<Tensor<T>>)> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(DiffError::shape(op, av.shape(), bv.shape()));
        }
        Ok((av, bv))
    }

    fn zip(&self, op: &'static str, a: Var, b: Var, node: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (av, bv) = self.same_shape(op, a, b)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(out, node, self.needs(a) || self.needs(b)))
    }

    /// `op(a) * op(b)` for rank-2 operands, where `op` optionally transposes.
    pub fn matmul_t(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 {
            return Err(DiffError::shape("matmul", av.shape(), bv.shape()));
        }
        let (m, k) = if ta {
            (av.shape()[1], av.shape()[0])
        } else {
            (av.shape()[0], av.shape()[1])
        };
        let (k2, n) = if tb {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if k != k2 {
            return Err(DiffError::shape("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, av.data(), ta, bv.data(), tb, &mut out, false);
        let node = Op::MatMul { a, b, ta, tb };
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            node,
            self.needs(a) || self.needs(b),
        ))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Cross-correlation of `x: [N, C, H, W]` with `k: [O, C, kh, kw]`.
    pub fn conv2d(&self, x: Var, k: Var, spec: Conv2dSpec) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(k));
        let geom = ConvGeometry::new(xv.shape(), kv.shape(), spec)?;
        let out = conv2d_forward(&geom, xv.data(), kv.data());
        Ok(self.push(
            Tensor::from_parts(geom.out_shape(), out),
            Op::Conv2d { x, k, geom },
            self.needs(x) || self.needs(k),
        ))
    }

    /// Adds `b: [D]` to every row of `x: [.., D]`.
    pub fn add_bias(&self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let d = bv.len();
        if bv.rank() != 1 || xv.shape().last() != Some(&d) {
            return Err(DiffError::shape("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        Ok(self.push(
            Tensor::from_parts(xv.shape().to_vec(), out),
            Op::AddBias { x, b },
            self.needs(x) || self.needs(b),
        ))
    }

    /// Adds `b: [C]` along axis 1 of `x: [N, C, ...]`.
    pub fn add_channel_bias(&self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rank() != 1 || xv.rank() < 2 || xv.shape()[1] != bv.len() {
            return Err(DiffError::shape("add_channel_bias", xv.shape(), bv.shape()));
        }
        let (_, c, inner) = split_axis(xv.shape(), 1);
        let mut out = xv.data().to_vec();
        for (i, plane) in out.chunks_mut(inner).enumerate() {
            let bb = bv.data()[i % c];
            plane.iter_mut().for_each(|v| *v += bb);
        }
        Ok(self.push(
            Tensor::from_parts(xv.shape().to_vec(), out),
            Op::AddChannelBias { x, b },
            self.needs(x) || self.needs(b),
        ))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&self, x: Var, c: T) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&self, x: Var, c: T) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if let Some(i) = xv.data().iter().position(|&v| !(v > T::zero())) {
            return Err(DiffError::Domain {
                op: "log",
                detail: format!("argument {} at flat index {i} is not positive", xv.data()[i]),
            });
        }
        Ok(self.unary(x, Op::Log(x), |v| v.ln()))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<Rc<Tensor<T>>> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(DiffError::invalid(
                op,
                format!("axis {axis} out of range for shape {:?}", xv.shape()),
            ));
        }
        Ok(xv)
    }

    /// `ln Σ exp(x)` along `axis`, shifted by the maximum for stability.
    pub fn logsumexp(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.check_axis("logsumexp", x, axis)?;
        let out = lse_forward(&xv, axis, None);
        Ok(self.push(out, Op::LogSumExp { x, axis, mask: None }, self.needs(x)))
    }

    /// [`Graph::logsumexp`] over the last axis restricted to entries whose
    /// `mask` flag is set. Every row needs at least one included entry.
    pub fn masked_logsumexp(&self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 || mask.len() != xv.len() {
            return Err(DiffError::shape("masked_logsumexp", xv.shape(), &[mask.len()]));
        }
        let axis = xv.rank() - 1;
        let width = xv.shape()[axis];
        if mask.chunks(width).any(|row| !row.iter().any(|&m| m)) {
            return Err(DiffError::invalid("masked_logsumexp", "a row has no included entries"));
        }
        let out = lse_forward(&xv, axis, Some(&mask));
        let mask = Some(Rc::new(mask));
        Ok(self.push(out, Op::LogSumExp { x, axis, mask }, self.needs(x)))
    }

    pub fn sum(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.check_axis("sum", x, axis)?;
        let out = reduce_axis(&xv, axis, T::one());
        Ok(self.push(out, Op::Sum { x, axis }, self.needs(x)))
    }

    pub fn mean(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.check_axis("mean", x, axis)?;
        let len = T::from_usize(xv.shape()[axis]).unwrap();
        let out = reduce_axis(&xv, axis, T::one() / len);
        Ok(self.push(out, Op::Mean { x, axis }, self.needs(x)))
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().copied().fold(T::zero(), |a, b| a + b);
        self.push(Tensor::scalar(s), Op::SumAll(x), self.needs(x))
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().copied().fold(T::zero(), |a, b| a + b);
        let m = s / T::from_usize(xv.len()).unwrap();
        self.push(Tensor::scalar(m), Op::MeanAll(x), self.needs(x))
    }

    /// L1 (`p = 1`) or Euclidean (`p = 2`) norm over the last axis.
    pub fn pnorm(&self, x: Var, p: u8) -> Result<Var> {
        if p != 1 && p != 2 {
            return Err(DiffError::invalid("pnorm", format!("p must be 1 or 2, got {p}")));
        }
        let xv = self.value(x);
        if xv.rank() == 0 {
            return Err(DiffError::invalid("pnorm", "needs at least one axis"));
        }
        let width = *xv.shape().last().unwrap();
        let data = xv
            .data()
            .chunks(width)
            .map(|row| {
                if p == 1 {
                    row.iter().map(|v| v.abs()).fold(T::zero(), |a, b| a + b)
                } else {
                    row.iter().map(|&v| v * v).fold(T::zero(), |a, b| a + b).sqrt()
                }
            })
            .collect();
        let out = Tensor::from_parts(without_axis(xv.shape(), xv.rank() - 1), data);
        Ok(self.push(out, Op::PNorm { x, p }, self.needs(x)))
    }

    /// Squared Euclidean norm over the last axis.
    pub fn sq_norm(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 {
            return Err(DiffError::invalid("sq_norm", "needs at least one axis"));
        }
        let width = *xv.shape().last().unwrap();
        let data = xv
            .data()
            .chunks(width)
            .map(|row| row.iter().map(|&v| v * v).fold(T::zero(), |a, b| a + b))
            .collect();
        let out = Tensor::from_parts(without_axis(xv.shape(), xv.rank() - 1), data);
        Ok(self.push(out, Op::SqNorm(x), self.needs(x)))
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.len() {
            return Err(DiffError::shape("reshape", xv.shape(), &shape));
        }
        let out = Tensor::from_parts(shape, xv.data().to_vec());
        Ok(self.push(out, Op::Reshape(x), self.needs(x)))
    }

    /// Swaps the two axes of a rank-2 tensor.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(DiffError::invalid(
                "transpose",
                format!("expects rank 2, got shape {:?}", xv.shape()),
            ));
        }
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let out = transpose2(xv.data(), r, c);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), self.needs(x)))
    }

    /// Gathers flat elements of `x` into a tensor of the given shape.
    pub fn take(&self, x: Var, indices: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != indices.len() {
            return Err(DiffError::shape("take", &[indices.len()], &shape));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= xv.len()) {
            return Err(DiffError::invalid(
                "take",
                format!("index {bad} out of range for {} elements", xv.len()),
            ));
        }
        let data = indices.iter().map(|&i| xv.data()[i]).collect();
        let node = Op::Take {
            x,
            indices: Rc::new(indices),
        };
        Ok(self.push(Tensor::from_parts(shape, data), node, self.needs(x)))
    }

    /// Picks rows (first-axis slices) of `x` in the given order.
    pub fn select_rows(&self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        if shape.is_empty() || rows.is_empty() {
            return Err(DiffError::invalid("select_rows", "needs a non-empty row list and rank >= 1"));
        }
        let width: usize = shape[1..].iter().product();
        if let Some(&bad) = rows.iter().find(|&&r| r >= shape[0]) {
            return Err(DiffError::invalid(
                "select_rows",
                format!("row {bad} out of range for {} rows", shape[0]),
            ));
        }
        let indices = rows
            .iter()
            .flat_map(|&r| r * width..(r + 1) * width)
            .collect();
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        self.take(x, indices, out_shape)
    }

    /// Stacks tensors along the first axis.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| DiffError::invalid("concat_rows", "no inputs"))?;
        let base = self.shape(*first);
        if base.is_empty() {
            return Err(DiffError::invalid("concat_rows", "inputs need rank >= 1"));
        }
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != base.len() || pv.shape()[1..] != base[1..] {
                return Err(DiffError::shape("concat_rows", &base, pv.shape()));
            }
            rows += pv.shape()[0];
            data.extend_from_slice(pv.data());
        }
        let mut shape = base;
        shape[0] = rows;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Strided spatial sampling of `x: [N, C, H, W]`:
    /// `out[.., i, j] = x[.., offset + i*stride, offset + j*stride]`.
    pub fn subsample2d(&self, x: Var, offset: usize, stride: usize, oh: usize, ow: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 || stride == 0 {
            return Err(DiffError::invalid("subsample2d", format!("bad input shape {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        if offset + (oh.max(1) - 1) * stride >= h || offset + (ow.max(1) - 1) * stride >= w {
            return Err(DiffError::invalid(
                "subsample2d",
                format!("{oh}x{ow} samples at offset {offset} stride {stride} exceed {h}x{w}"),
            ));
        }
        let mut idx = Vec::with_capacity(s[0] * s[1] * oh * ow);
        for plane in 0..s[0] * s[1] {
            for i in 0..oh {
                for j in 0..ow {
                    idx.push((plane * h + offset + i * stride) * w + offset + j * stride);
                }
            }
        }
        self.take(x, idx, vec![s[0], s[1], oh, ow])
    }
}

pub(crate) fn softplus<T: Real>(v: T) -> T {
    let zero = T::zero();
    let m = if v > zero { v } else { zero };
    m + (-v.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn transpose2<T: Real>(data: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = data[i * c + j];
        }
    }
    out
}

fn reduce_axis<T: Real>(x: &Tensor<T>, axis: usize, factor: T) -> Tensor<T> {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for l in 0..len {
            let src = &x.data()[(o * len + l) * inner..][..inner];
            for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= factor);
    Tensor::from_parts(without_axis(x.shape(), axis), out)
}

fn lse_forward<T: Real>(x: &Tensor<T>, axis: usize, mask: Option<&[bool]>) -> Tensor<T> {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let d = x.data();
    let on = |i: usize| mask.is_none_or(|m| m[i]);
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let mut m = T::neg_infinity();
            for l in 0..len {
                if on(at(l)) && d[at(l)] > m {
                    m = d[at(l)];
                }
            }
            let mut s = T::zero();
            for l in 0..len {
                if on(at(l)) {
                    s += (d[at(l)] - m).exp();
                }
            }
            out.push(m + s.ln());
        }
    }
    Tensor::from_parts(without_axis(x.shape(), axis), out)
}
