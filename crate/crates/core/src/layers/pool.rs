//! Pooling: windowed max/avg (valid windows only) and global variants.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max { kernel: usize, stride: usize },
    Avg { kernel: usize, stride: usize },
    GlobalMax,
    GlobalAvg,
}

/// Saved routing info for backward: for max kinds, the flat input index that
/// won each output position (ties go to the first index in row-major order).
#[derive(Debug, Clone)]
pub struct PoolCache {
    pub in_shape: Shape,
    pub argmax: Vec<usize>,
}

fn window_dims(kind: PoolKind, h: usize, w: usize) -> Result<(usize, usize, usize, usize)> {
    match kind {
        PoolKind::Max { kernel, stride } | PoolKind::Avg { kernel, stride } => {
            if kernel == 0 || stride == 0 {
                return invalid("pool kernel and stride must be positive");
            }
            if kernel > h || kernel > w {
                return shape_err(format!("pool kernel {kernel} exceeds input {h}x{w}"));
            }
            Ok((kernel, stride, (h - kernel) / stride + 1, (w - kernel) / stride + 1))
        }
        PoolKind::GlobalMax | PoolKind::GlobalAvg => Ok((0, 0, 1, 1)),
    }
}

pub fn pool_forward<T: Scalar>(kind: PoolKind, x: &Tensor<T>) -> Result<(Tensor<T>, PoolCache)> {
    let sh = x.shape();
    let (k, s, oh, ow) = window_dims(kind, sh.h, sh.w)?;
    let mut out = Tensor::zeros(Shape::new(sh.n, sh.c, oh, ow));
    let mut argmax = Vec::new();
    let is_max = matches!(kind, PoolKind::Max { .. } | PoolKind::GlobalMax);
    if is_max {
        argmax.resize(sh.n * sh.c * oh * ow, 0usize);
    }
    for n in 0..sh.n {
        for c in 0..sh.c {
            match kind {
                PoolKind::GlobalAvg => {
                    let base = x.offset(n, c, 0, 0);
                    let mut acc = T::zero();
                    for &v in &x.data()[base..base + sh.h * sh.w] {
                        acc += v;
                    }
                    out.set(n, c, 0, 0, acc / T::from_f64((sh.h * sh.w) as f64));
                }
                PoolKind::GlobalMax => {
                    let base = x.offset(n, c, 0, 0);
                    let mut best = x.data()[base];
                    let mut best_i = base;
                    for (i, &v) in x.data()[base..base + sh.h * sh.w].iter().enumerate() {
                        if v > best {
                            best = v;
                            best_i = base + i;
                        }
                    }
                    out.set(n, c, 0, 0, best);
                    argmax[out.offset(n, c, 0, 0)] = best_i;
                }
                PoolKind::Max { .. } => {
                    for y in 0..oh {
                        for xw in 0..ow {
                            let mut best = T::neg_infinity();
                            let mut best_i = 0usize;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let idx = x.offset(n, c, y * s + ky, xw * s + kx);
                                    let v = x.data()[idx];
                                    if v > best {
                                        best = v;
                                        best_i = idx;
                                    }
                                }
                            }
                            out.set(n, c, y, xw, best);
                            argmax[out.offset(n, c, y, xw)] = best_i;
                        }
                    }
                }
                PoolKind::Avg { .. } => {
                    let inv = T::one() / T::from_f64((k * k) as f64);
                    for y in 0..oh {
                        for xw in 0..ow {
                            let mut acc = T::zero();
                            for ky in 0..k {
                                for kx in 0..k {
                                    acc += x.at(n, c, y * s + ky, xw * s + kx);
                                }
                            }
                            out.set(n, c, y, xw, acc * inv);
                        }
                    }
                }
            }
        }
    }
    Ok((out, PoolCache { in_shape: sh, argmax }))
}

pub fn pool_backward<T: Scalar>(
    kind: PoolKind,
    cache: &PoolCache,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let sh = cache.in_shape;
    let (k, s, oh, ow) = window_dims(kind, sh.h, sh.w)?;
    let gsh = grad_out.shape();
    if gsh != Shape::new(sh.n, sh.c, oh, ow) {
        return shape_err(format!("pool_backward grad_out {gsh}"));
    }
    let mut grad_x = Tensor::zeros(sh);
    match kind {
        PoolKind::GlobalMax | PoolKind::Max { .. } => {
            for (oi, &g) in grad_out.data().iter().enumerate() {
                grad_x.data_mut()[cache.argmax[oi]] += g;
            }
        }
        PoolKind::GlobalAvg => {
            let inv = T::one() / T::from_f64((sh.h * sh.w) as f64);
            for n in 0..sh.n {
                for c in 0..sh.c {
                    let g = grad_out.at(n, c, 0, 0) * inv;
                    let base = grad_x.offset(n, c, 0, 0);
                    for v in &mut grad_x.data_mut()[base..base + sh.h * sh.w] {
                        *v += g;
                    }
                }
            }
        }
        PoolKind::Avg { .. } => {
            let inv = T::one() / T::from_f64((k * k) as f64);
            for n in 0..sh.n {
                for c in 0..sh.c {
                    for y in 0..oh {
                        for xw in 0..ow {
                            let g = grad_out.at(n, c, y, xw) * inv;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let idx = grad_x.offset(n, c, y * s + ky, xw * s + kx);
                                    grad_x.data_mut()[idx] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(grad_x)
}
