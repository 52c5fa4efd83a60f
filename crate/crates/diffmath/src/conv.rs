use crate::error::{DiffError, Result};
use crate::par;
use crate::scalar::{gemm, Real};

/// Stride and symmetric zero padding of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, pad: usize) -> Self {
        Conv2dSpec { stride, pad }
    }
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec { stride: 1, pad: 0 }
    }
}

/// Output extent of a convolution along one axis, or `None` if the kernel
/// does not fit.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Samples per gradient-accumulation chunk. Fixed so that the summation
/// order of weight gradients never depends on the thread count.
const WEIGHT_GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub spec: Conv2dSpec,
}

impl ConvGeometry {
    pub fn new(x: &[usize], k: &[usize], spec: Conv2dSpec) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 || x[1] != k[1] {
            return Err(DiffError::shape("conv2d", x, k));
        }
        let oh = conv_output_size(x[2], k[2], spec.stride, spec.pad);
        let ow = conv_output_size(x[3], k[3], spec.stride, spec.pad);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok(ConvGeometry {
                n: x[0],
                c: x[1],
                h: x[2],
                w: x[3],
                o: k[0],
                kh: k[2],
                kw: k[3],
                oh,
                ow,
                spec,
            }),
            _ => Err(DiffError::invalid(
                "conv2d",
                format!(
                    "kernel {}x{} with stride {} and pad {} does not fit input {}x{}",
                    k[2], k[3], spec.stride, spec.pad, x[2], x[3]
                ),
            )),
        }
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.oh, self.ow]
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.pad == 0
    }

    fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }
}

/// Unfolds one sample `[C, H, W]` into a `[C*kh*kw, OH*OW]` column matrix.
fn im2col<T: Real>(g: &ConvGeometry, x: &[T], col: &mut [T]) {
    let p = g.positions();
    let (s, pad) = (g.spec.stride as isize, g.spec.pad as isize);
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oi in 0..g.oh {
                    let yi = oi as isize * s + ki as isize - pad;
                    let line = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                    if yi < 0 || yi >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(ci * g.h + yi as usize) * g.w..][..g.w];
                    for (oj, v) in line.iter_mut().enumerate() {
                        let xj = oj as isize * s + kj as isize - pad;
                        *v = if xj < 0 || xj >= g.w as isize {
                            T::zero()
                        } else {
                            src[xj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto `dx`.
fn col2im<T: Real>(g: &ConvGeometry, col: &[T], dx: &mut [T]) {
    let p = g.positions();
    let (s, pad) = (g.spec.stride as isize, g.spec.pad as isize);
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oi in 0..g.oh {
                    let yi = oi as isize * s + ki as isize - pad;
                    if yi < 0 || yi >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(ci * g.h + yi as usize) * g.w..][..g.w];
                    for oj in 0..g.ow {
                        let xj = oj as isize * s + kj as isize - pad;
                        if xj >= 0 && xj < g.w as isize {
                            dst[xj as usize] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeometry, x: &[T], k: &[T]) -> Vec<T> {
    let (p, patch, o) = (g.positions(), g.patch(), g.o);
    let mut out = vec![T::zero(); g.n * o * p];
    par::for_each_chunk_mut(&mut out, o * p, |n, dst| {
        let xs = &x[n * g.sample_len()..(n + 1) * g.sample_len()];
        if g.is_pointwise() {
            gemm(o, patch, p, k, false, xs, false, dst, false);
        } else {
            let mut col = vec![T::zero(); patch * p];
            im2col(g, xs, &mut col);
            gemm(o, patch, p, k, false, &col, false, dst, false);
        }
    });
    out
}

/// Gradient with respect to the input.
pub(crate) fn conv2d_grad_input<T: Real>(g: &ConvGeometry, dy: &[T], k: &[T]) -> Vec<T> {
    let (p, patch, o) = (g.positions(), g.patch(), g.o);
    let mut dx = vec![T::zero(); g.n * g.sample_len()];
    par::for_each_chunk_mut(&mut dx, g.sample_len(), |n, dst| {
        let dys = &dy[n * o * p..(n + 1) * o * p];
        if g.is_pointwise() {
            gemm(patch, o, p, k, true, dys, false, dst, false);
        } else {
            let mut col = vec![T::zero(); patch * p];
            gemm(patch, o, p, k, true, dys, false, &mut col, false);
            col2im(g, &col, dst);
        }
    });
    dx
}

/// Gradient with respect to the kernel, summed over the batch in a fixed order.
pub(crate) fn conv2d_grad_kernel<T: Real>(g: &ConvGeometry, dy: &[T], x: &[T]) -> Vec<T> {
    let (p, patch, o) = (g.positions(), g.patch(), g.o);
    let chunks = g.n.div_ceil(WEIGHT_GRAD_CHUNK);
    let partials = par::map_range(chunks, |ci| {
        let mut acc = vec![T::zero(); o * patch];
        let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { patch * p }];
        let end = ((ci + 1) * WEIGHT_GRAD_CHUNK).min(g.n);
        for n in ci * WEIGHT_GRAD_CHUNK..end {
            let xs = &x[n * g.sample_len()..(n + 1) * g.sample_len()];
            let dys = &dy[n * o * p..(n + 1) * o * p];
            let cols: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(g, xs, &mut col);
                &col
            };
            gemm(o, p, patch, dys, false, cols, true, &mut acc, true);
        }
        acc
    });
    let mut total = vec![T::zero(); o * patch];
    for part in partials {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    total
}
