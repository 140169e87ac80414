//! Activations and the per-map spatial softmax.

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// relu'(0) is defined as 0.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != grad_out.shape() {
        return shape_err(format!("relu_backward {} vs {}", x.shape(), grad_out.shape()));
    }
    let mut out = grad_out.clone();
    for (g, &xv) in out.data_mut().iter_mut().zip(x.data().iter()) {
        if xv <= T::zero() {
            *g = T::zero();
        }
    }
    Ok(out)
}

#[inline]
fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    // Split by sign so exp never overflows.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Backward from the saved forward output y: dx = g * y * (1 - y).
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if y.shape() != grad_out.shape() {
        return shape_err(format!("sigmoid_backward {} vs {}", y.shape(), grad_out.shape()));
    }
    let mut out = grad_out.clone();
    for (g, &yv) in out.data_mut().iter_mut().zip(y.data().iter()) {
        *g = *g * yv * (T::one() - yv);
    }
    Ok(out)
}

/// Softmax over the h*w positions of every (n, c) map independently, with
/// max subtraction for stability. Each output map sums to 1.
pub fn spatial_softmax_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let sh = x.shape();
    let plane = sh.h * sh.w;
    let mut out = Tensor::zeros(sh);
    for map in 0..sh.n * sh.c {
        let src = &x.data()[map * plane..(map + 1) * plane];
        let dst = &mut out.data_mut()[map * plane..(map + 1) * plane];
        let mut maxv = src[0];
        for &v in src.iter().skip(1) {
            if v > maxv {
                maxv = v;
            }
        }
        let mut sum = T::zero();
        for (d, &v) in dst.iter_mut().zip(src.iter()) {
            let e = (v - maxv).exp();
            *d = e;
            sum += e;
        }
        let inv = T::one() / sum;
        for d in dst.iter_mut() {
            *d = *d * inv;
        }
    }
    debug_assert!(out.all_finite(), "spatial_softmax produced non-finite values");
    out
}

/// Backward from the saved forward output y:
/// dx = y * (g - sum(g * y)) per map.
pub fn spatial_softmax_backward<T: Scalar>(
    y: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if y.shape() != grad_out.shape() {
        return shape_err(format!(
            "spatial_softmax_backward {} vs {}",
            y.shape(),
            grad_out.shape()
        ));
    }
    let sh = y.shape();
    let plane = sh.h * sh.w;
    let mut out = Tensor::zeros(sh);
    for map in 0..sh.n * sh.c {
        let ys = &y.data()[map * plane..(map + 1) * plane];
        let gs = &grad_out.data()[map * plane..(map + 1) * plane];
        let mut dot = T::zero();
        for (&yv, &gv) in ys.iter().zip(gs.iter()) {
            dot += yv * gv;
        }
        let ds = &mut out.data_mut()[map * plane..(map + 1) * plane];
        for i in 0..plane {
            ds[i] = ys[i] * (gs[i] - dot);
        }
    }
    Ok(out)
}
