//! Nearest-neighbor upsampling with exact adjoint backward.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Repeat each input pixel into an fy x fx block.
pub fn upsample_nearest_forward<T: Scalar>(
    x: &Tensor<T>,
    fy: usize,
    fx: usize,
) -> Result<Tensor<T>> {
    if fy == 0 || fx == 0 {
        return invalid("upsample factors must be positive");
    }
    let sh = x.shape();
    let mut out = Tensor::zeros(Shape::new(sh.n, sh.c, sh.h * fy, sh.w * fx));
    for n in 0..sh.n {
        for c in 0..sh.c {
            for y in 0..sh.h {
                for xw in 0..sh.w {
                    let v = x.at(n, c, y, xw);
                    for dy in 0..fy {
                        let base = out.offset(n, c, y * fy + dy, xw * fx);
                        for dx in 0..fx {
                            out.data_mut()[base + dx] = v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of nearest-neighbor upsampling: sum each fy x fx block back into
/// its source pixel.
pub fn upsample_nearest_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    fy: usize,
    fx: usize,
) -> Result<Tensor<T>> {
    let sh = grad_out.shape();
    if fy == 0 || fx == 0 || sh.h % fy != 0 || sh.w % fx != 0 {
        return shape_err(format!(
            "upsample backward: {}x{} not divisible by {fy}x{fx}",
            sh.h, sh.w
        ));
    }
    let mut out = Tensor::zeros(Shape::new(sh.n, sh.c, sh.h / fy, sh.w / fx));
    for n in 0..sh.n {
        for c in 0..sh.c {
            for y in 0..sh.h {
                for xw in 0..sh.w {
                    let idx = out.offset(n, c, y / fy, xw / fx);
                    out.data_mut()[idx] += grad_out.at(n, c, y, xw);
                }
            }
        }
    }
    Ok(out)
}
