use crate::conv::{conv2d_grad_input, conv2d_grad_kernel};
use crate::error::{DiffError, Result};
use crate::graph::{sigmoid, split_axis, transpose2, Graph, Op, Var};
use crate::scalar::{gemm, Real};
use crate::tensor::Tensor;

/// Gradients of one scalar root with respect to every recorded node.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`; zero if `v` does not influence the root.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Whether any gradient reached `v`.
    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, shape: &[usize], g: Vec<T>) {
    match slot {
        Some(t) => t.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(Tensor::from_parts(shape.to_vec(), g)),
    }
}

impl<T: Real> Graph<T> {
    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.0].value.shape().to_vec();
        if nodes[root.0].value.len() != 1 {
            return Err(DiffError::NotScalar { shape: root_shape });
        }
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[root.0] = Some(Tensor::full(&root_shape, T::one()));

        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let gout = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let y = &node.value;
            let g = gout.data();
            let mut send = |v: Var, contrib: Vec<T>| {
                if nodes[v.0].needs_grad {
                    accumulate(&mut grads[v.0], &shapes[v.0], contrib);
                }
            };
            let val = |v: Var| nodes[v.0].value.clone();
            let needs = |v: Var| nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul { a, b, ta, tb } => {
                    let (av, bv) = (val(*a), val(*b));
                    let m = y.shape()[0];
                    let n = y.shape()[1];
                    let k = if *ta { av.shape()[0] } else { av.shape()[1] };
                    if needs(*a) {
                        let mut da = vec![T::zero(); m * k];
                        if *ta {
                            gemm(k, n, m, bv.data(), *tb, g, true, &mut da, false);
                        } else {
                            gemm(m, n, k, g, false, bv.data(), !*tb, &mut da, false);
                        }
                        send(*a, da);
                    }
                    if needs(*b) {
                        let mut db = vec![T::zero(); k * n];
                        if *tb {
                            gemm(n, m, k, g, true, av.data(), *ta, &mut db, false);
                        } else {
                            gemm(k, m, n, av.data(), !*ta, g, false, &mut db, false);
                        }
                        send(*b, db);
                    }
                }
                Op::Conv2d { x, k, geom } => {
                    if needs(*x) {
                        send(*x, conv2d_grad_input(geom, g, val(*k).data()));
                    }
                    if needs(*k) {
                        send(*k, conv2d_grad_kernel(geom, g, val(*x).data()));
                    }
                }
                Op::AddBias { x, b } => {
                    if needs(*b) {
                        let d = shapes[b.0][0];
                        let mut db = vec![T::zero(); d];
                        for row in g.chunks(d) {
                            db.iter_mut().zip(row).for_each(|(a, &r)| *a += r);
                        }
                        send(*b, db);
                    }
                    send(*x, g.to_vec());
                }
                Op::AddChannelBias { x, b } => {
                    if needs(*b) {
                        let (_, c, inner) = split_axis(y.shape(), 1);
                        let mut db = vec![T::zero(); c];
                        for (p, plane) in g.chunks(inner).enumerate() {
                            db[p % c] += plane.iter().copied().fold(T::zero(), |s, v| s + v);
                        }
                        send(*b, db);
                    }
                    send(*x, g.to_vec());
                }
                Op::Add(a, b) => {
                    send(*a, g.to_vec());
                    send(*b, g.to_vec());
                }
                Op::Sub(a, b) => {
                    send(*a, g.to_vec());
                    send(*b, g.iter().map(|&v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if needs(*a) {
                        send(*a, g.iter().zip(bv.data()).map(|(&u, &w)| u * w).collect());
                    }
                    if needs(*b) {
                        send(*b, g.iter().zip(av.data()).map(|(&u, &w)| u * w).collect());
                    }
                }
                Op::Scale(x, c) => send(*x, g.iter().map(|&v| v * *c).collect()),
                Op::AddScalar(x) | Op::Reshape(x) => send(*x, g.to_vec()),
                Op::Relu(x) => {
                    let xv = val(*x);
                    let d = g
                        .iter()
                        .zip(xv.data())
                        .map(|(&u, &v)| if v > T::zero() { u } else { T::zero() })
                        .collect();
                    send(*x, d);
                }
                Op::Tanh(x) => {
                    let d = g
                        .iter()
                        .zip(y.data())
                        .map(|(&u, &t)| u * (T::one() - t * t))
                        .collect();
                    send(*x, d);
                }
                Op::Softplus(x) => {
                    let xv = val(*x);
                    let d = g.iter().zip(xv.data()).map(|(&u, &v)| u * sigmoid(v)).collect();
                    send(*x, d);
                }
                Op::Exp(x) => send(*x, g.iter().zip(y.data()).map(|(&u, &e)| u * e).collect()),
                Op::Log(x) => {
                    let xv = val(*x);
                    send(*x, g.iter().zip(xv.data()).map(|(&u, &v)| u / v).collect());
                }
                Op::LogSumExp { x, axis, mask } => {
                    let xv = val(*x);
                    let (outer, len, inner) = split_axis(xv.shape(), *axis);
                    let mut d = vec![T::zero(); xv.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let r = o * inner + ii;
                            for l in 0..len {
                                let at = (o * len + l) * inner + ii;
                                if mask.as_ref().is_none_or(|m| m[at]) {
                                    d[at] = g[r] * (xv.data()[at] - y.data()[r]).exp();
                                }
                            }
                        }
                    }
                    send(*x, d);
                }
                Op::Sum { x, axis } | Op::Mean { x, axis } => {
                    let xs = &shapes[x.0];
                    let (outer, len, inner) = split_axis(xs, *axis);
                    let f = if matches!(node.op, Op::Mean { .. }) {
                        T::one() / T::from_usize(len).unwrap()
                    } else {
                        T::one()
                    };
                    let mut d = vec![T::zero(); outer * len * inner];
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut d[(o * len + l) * inner..][..inner];
                            dst.iter_mut()
                                .zip(&g[o * inner..(o + 1) * inner])
                                .for_each(|(a, &b)| *a = b * f);
                        }
                    }
                    send(*x, d);
                }
                Op::SumAll(x) => send(*x, vec![g[0]; val(*x).len()]),
                Op::MeanAll(x) => {
                    let n = val(*x).len();
                    send(*x, vec![g[0] / T::from_usize(n).unwrap(); n]);
                }
                Op::PNorm { x, p } => {
                    let xv = val(*x);
                    let width = *xv.shape().last().unwrap();
                    let mut d = Vec::with_capacity(xv.len());
                    for (r, row) in xv.data().chunks(width).enumerate() {
                        let norm = y.data()[r];
                        for &v in row {
                            d.push(if *p == 1 {
                                g[r] * sign(v)
                            } else if norm > T::zero() {
                                g[r] * v / norm
                            } else {
                                T::zero()
                            });
                        }
                    }
                    send(*x, d);
                }
                Op::SqNorm(x) => {
                    let xv = val(*x);
                    let width = *xv.shape().last().unwrap();
                    let two = T::one() + T::one();
                    let d = xv
                        .data()
                        .chunks(width)
                        .enumerate()
                        .flat_map(|(r, row)| row.iter().map(move |&v| two * v * g[r]))
                        .collect();
                    send(*x, d);
                }
                Op::Transpose(x) => {
                    let (r, c) = (y.shape()[0], y.shape()[1]);
                    send(*x, transpose2(g, r, c));
                }
                Op::Take { x, indices } => {
                    let mut d = vec![T::zero(); val(*x).len()];
                    for (&i, &u) in indices.iter().zip(g) {
                        d[i] += u;
                    }
                    send(*x, d);
                }
                Op::Concat { parts } => {
                    let mut at = 0;
                    for &p in parts {
                        let n = nodes[p.0].value.len();
                        send(p, g[at..at + n].to_vec());
                        at += n;
                    }
                }
            }
            grads[i] = Some(gout);
        }
        Ok(Gradients { grads, shapes })
    }
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}
