//! 2-D convolution (cross-correlation) and transposed convolution with
//! explicit backward passes. Forward uses im2col plus a small hand-rolled
//! matmul; backward reuses the same column buffers, so the arithmetic order
//! is fixed and results are reproducible across runs.

use super::{param_name, Gradients, HasParams};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::{InitScheme, Rng, Scalar, Shape, Tensor};

/// Convolution layer. Weight layout is (out_c, in_c/groups, kh, kw); bias is
/// (out_c, 1, 1, 1). Square kernels only.
#[derive(Debug, Clone)]
pub struct ConvLayer<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn new(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        rng: &mut Rng,
    ) -> Result<ConvLayer<T>> {
        if groups == 0 || in_c % groups != 0 || out_c % groups != 0 {
            return invalid(format!(
                "groups {groups} must divide in_c {in_c} and out_c {out_c}"
            ));
        }
        if stride == 0 || kernel == 0 {
            return invalid("kernel and stride must be positive");
        }
        let weight = Tensor::random_init(
            Shape::new(out_c, in_c / groups, kernel, kernel),
            InitScheme::UniformFanIn,
            rng,
        );
        let bias = Tensor::zeros(Shape::new(out_c, 1, 1, 1));
        Ok(ConvLayer { weight, bias, stride, padding, groups })
    }

    /// 1x1 stride-1 convolution passing channels through unchanged.
    pub fn identity_1x1(c: usize) -> ConvLayer<T> {
        let mut weight = Tensor::zeros(Shape::new(c, c, 1, 1));
        for i in 0..c {
            weight.set(i, i, 0, 0, T::one());
        }
        ConvLayer {
            weight,
            bias: Tensor::zeros(Shape::new(c, 1, 1, 1)),
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c * self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    pub fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        let padded_h = h + 2 * self.padding;
        let padded_w = w + 2 * self.padding;
        if padded_h < k || padded_w < k {
            return shape_err(format!(
                "spatial size {h}x{w} with padding {} is smaller than kernel {k}",
                self.padding
            ));
        }
        Ok(((padded_h - k) / self.stride + 1, (padded_w - k) / self.stride + 1))
    }
}

impl<T: Scalar> HasParams<T> for ConvLayer<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&param_name(prefix, "weight"), &self.weight);
        f(&param_name(prefix, "bias"), &self.bias);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&param_name(prefix, "weight"), &mut self.weight);
        f(&param_name(prefix, "bias"), &mut self.bias);
    }
}

/// Gradients of one convolution application.
#[derive(Debug, Clone)]
pub struct ConvGrads<T: Scalar> {
    pub x: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvGrads<T> {
    /// Store the weight/bias gradients under `prefix` and return grad_x.
    pub fn into_input_grad(
        self,
        prefix: &str,
        grads: &mut Gradients<T>,
    ) -> Result<Tensor<T>> {
        grads.accumulate(&param_name(prefix, "weight"), self.weight)?;
        grads.accumulate(&param_name(prefix, "bias"), self.bias)?;
        Ok(self.x)
    }
}

/// Column matrix for one sample: rows are (c, ky, kx) in that order, columns
/// are output positions y*ow + x. Zero padding is materialized here.
fn im2col<T: Scalar>(
    x: &Tensor<T>,
    n: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let sh = x.shape();
    let cols = oh * ow;
    let mut col = vec![T::zero(); sh.c * kernel * kernel * cols];
    for c in 0..sh.c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let out_base = row * cols;
                for y in 0..oh {
                    let iy = (y * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= sh.h as isize {
                        continue;
                    }
                    let src_base = x.offset(n, c, iy as usize, 0);
                    let dst_base = out_base + y * ow;
                    for xw in 0..ow {
                        let ix = (xw * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= sh.w as isize {
                            continue;
                        }
                        col[dst_base + xw] = x.data()[src_base + ix as usize];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add a column matrix back into an input-shaped tensor; exact
/// adjoint of `im2col`.
fn col2im_add<T: Scalar>(
    col: &[T],
    out: &mut Tensor<T>,
    n: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) {
    let sh = out.shape();
    let cols = oh * ow;
    for c in 0..sh.c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let col_base = row * cols;
                for y in 0..oh {
                    let iy = (y * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= sh.h as isize {
                        continue;
                    }
                    let dst_base = out.offset(n, c, iy as usize, 0);
                    for xw in 0..ow {
                        let ix = (xw * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= sh.w as isize {
                            continue;
                        }
                        out.data_mut()[dst_base + ix as usize] += col[col_base + y * ow + xw];
                    }
                }
            }
        }
    }
}

/// c[m,p] += a[m,k] * b[k,p]
fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * p..(i + 1) * p];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += aik * bv;
            }
        }
    }
}

/// c[m,q] += a[m,p] * b[q,p]^T  (dot products of contiguous rows)
fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, p: usize, q: usize) {
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        for j in 0..q {
            let brow = &b[j * p..(j + 1) * p];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            c[i * q + j] += acc;
        }
    }
}

/// c[k,p] += a[m,k]^T * b[m,p]
fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * p..(i + 1) * p];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let crow = &mut c[kk * p..(kk + 1) * p];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += aik * bv;
            }
        }
    }
}

fn check_conv_input<T: Scalar>(layer: &ConvLayer<T>, x: &Tensor<T>) -> Result<(usize, usize)> {
    if x.shape().c != layer.in_channels() {
        return shape_err(format!(
            "conv expects {} input channels, got {}",
            layer.in_channels(),
            x.shape().c
        ));
    }
    layer.out_size(x.shape().h, x.shape().w)
}

pub fn conv2d_forward<T: Scalar>(layer: &ConvLayer<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (oh, ow) = check_conv_input(layer, x)?;
    let sh = x.shape();
    let k = layer.kernel();
    let groups = layer.groups;
    let icg = sh.c / groups;
    let ocg = layer.out_channels() / groups;
    let cols = oh * ow;
    let krows = icg * k * k;
    let mut out = Tensor::zeros(Shape::new(sh.n, layer.out_channels(), oh, ow));
    for n in 0..sh.n {
        let col = im2col(x, n, k, layer.stride, layer.padding, oh, ow);
        for g in 0..groups {
            let wslice =
                &layer.weight.data()[g * ocg * krows..(g + 1) * ocg * krows];
            let cslice = &col[g * krows * cols..(g + 1) * krows * cols];
            let obase = out.offset(n, g * ocg, 0, 0);
            matmul_acc(
                wslice,
                cslice,
                &mut out.data_mut()[obase..obase + ocg * cols],
                ocg,
                krows,
                cols,
            );
        }
        for o in 0..layer.out_channels() {
            let b = layer.bias.data()[o];
            if b != T::zero() {
                let base = out.offset(n, o, 0, 0);
                for v in &mut out.data_mut()[base..base + cols] {
                    *v += b;
                }
            }
        }
    }
    debug_assert!(out.all_finite(), "conv2d_forward produced non-finite values");
    Ok(out)
}

/// Gradients of conv2d w.r.t. input, weight and bias given upstream
/// grad_out. Recomputes the column matrix instead of caching it.
pub fn conv2d_backward<T: Scalar>(
    layer: &ConvLayer<T>,
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (oh, ow) = check_conv_input(layer, x)?;
    let sh = x.shape();
    let gsh = grad_out.shape();
    if gsh != Shape::new(sh.n, layer.out_channels(), oh, ow) {
        return shape_err(format!(
            "conv2d_backward grad_out {gsh} does not match output shape ({}, {}, {oh}, {ow})",
            sh.n,
            layer.out_channels()
        ));
    }
    let k = layer.kernel();
    let groups = layer.groups;
    let icg = sh.c / groups;
    let ocg = layer.out_channels() / groups;
    let cols = oh * ow;
    let krows = icg * k * k;

    let mut grad_x = Tensor::zeros(sh);
    let mut grad_w = Tensor::zeros(layer.weight.shape());
    let mut grad_b = Tensor::zeros(layer.bias.shape());

    for o in 0..layer.out_channels() {
        let mut acc = T::zero();
        for n in 0..sh.n {
            let base = grad_out.offset(n, o, 0, 0);
            for &g in &grad_out.data()[base..base + cols] {
                acc += g;
            }
        }
        grad_b.data_mut()[o] = acc;
    }

    let mut colgrad = vec![T::zero(); sh.c * k * k * cols];
    for n in 0..sh.n {
        let col = im2col(x, n, k, layer.stride, layer.padding, oh, ow);
        for v in colgrad.iter_mut() {
            *v = T::zero();
        }
        for g in 0..groups {
            let gbase = grad_out.offset(n, g * ocg, 0, 0);
            let gslice = &grad_out.data()[gbase..gbase + ocg * cols];
            let cslice = &col[g * krows * cols..(g + 1) * krows * cols];
            // dW += G * col^T
            matmul_nt_acc(
                gslice,
                cslice,
                &mut grad_w.data_mut()[g * ocg * krows..(g + 1) * ocg * krows],
                ocg,
                cols,
                krows,
            );
            // dcol = W^T * G
            let wslice =
                &layer.weight.data()[g * ocg * krows..(g + 1) * ocg * krows];
            matmul_tn_acc(
                wslice,
                gslice,
                &mut colgrad[g * krows * cols..(g + 1) * krows * cols],
                ocg,
                krows,
                cols,
            );
        }
        col2im_add(&colgrad, &mut grad_x, n, k, layer.stride, layer.padding, oh, ow);
    }
    Ok(ConvGrads { x: grad_x, weight: grad_w, bias: grad_b })
}

/// Transposed convolution. Weight layout is (in_c, out_c, kh, kw); output
/// spatial size is (in-1)*stride - 2*padding + kernel.
#[derive(Debug, Clone)]
pub struct DeconvLayer<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> DeconvLayer<T> {
    pub fn new(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Result<DeconvLayer<T>> {
        if stride == 0 || kernel == 0 {
            return invalid("kernel and stride must be positive");
        }
        // Fan-in of the equivalent gather: out_c axis is axis 1 here, so
        // initialize from the (out_c, kh, kw) slice size seen by each input.
        let weight = Tensor::random_init(
            Shape::new(in_c, out_c, kernel, kernel),
            InitScheme::UniformFanIn,
            rng,
        );
        let bias = Tensor::zeros(Shape::new(out_c, 1, 1, 1));
        Ok(DeconvLayer { weight, bias, stride, padding })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    pub fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        let grow = |d: usize| -> Result<usize> {
            let full = (d - 1) * self.stride + k;
            if full < 2 * self.padding {
                return shape_err(format!("padding {} larger than deconv output", self.padding));
            }
            Ok(full - 2 * self.padding)
        };
        Ok((grow(h)?, grow(w)?))
    }
}

impl<T: Scalar> HasParams<T> for DeconvLayer<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&param_name(prefix, "weight"), &self.weight);
        f(&param_name(prefix, "bias"), &self.bias);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&param_name(prefix, "weight"), &mut self.weight);
        f(&param_name(prefix, "bias"), &mut self.bias);
    }
}

pub fn deconv2d_forward<T: Scalar>(layer: &DeconvLayer<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let sh = x.shape();
    if sh.c != layer.in_channels() {
        return shape_err(format!(
            "deconv expects {} input channels, got {}",
            layer.in_channels(),
            sh.c
        ));
    }
    let (oh, ow) = layer.out_size(sh.h, sh.w)?;
    let k = layer.kernel();
    let out_c = layer.out_channels();
    let mut out = Tensor::zeros(Shape::new(sh.n, out_c, oh, ow));
    for n in 0..sh.n {
        for i in 0..sh.c {
            for y in 0..sh.h {
                for xw in 0..sh.w {
                    let v = x.at(n, i, y, xw);
                    if v == T::zero() {
                        continue;
                    }
                    for o in 0..out_c {
                        let wbase = layer.weight.offset(i, o, 0, 0);
                        for ky in 0..k {
                            let oy = (y * layer.stride + ky) as isize - layer.padding as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            let obase = out.offset(n, o, oy as usize, 0);
                            for kx in 0..k {
                                let ox =
                                    (xw * layer.stride + kx) as isize - layer.padding as isize;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                out.data_mut()[obase + ox as usize] +=
                                    v * layer.weight.data()[wbase + ky * k + kx];
                            }
                        }
                    }
                }
            }
        }
        for o in 0..out_c {
            let b = layer.bias.data()[o];
            if b != T::zero() {
                let base = out.offset(n, o, 0, 0);
                for v in &mut out.data_mut()[base..base + oh * ow] {
                    *v += b;
                }
            }
        }
    }
    debug_assert!(out.all_finite(), "deconv2d_forward produced non-finite values");
    Ok(out)
}

pub fn deconv2d_backward<T: Scalar>(
    layer: &DeconvLayer<T>,
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let sh = x.shape();
    let (oh, ow) = layer.out_size(sh.h, sh.w)?;
    let gsh = grad_out.shape();
    if gsh != Shape::new(sh.n, layer.out_channels(), oh, ow) {
        return shape_err(format!("deconv2d_backward grad_out {gsh} mismatch"));
    }
    let k = layer.kernel();
    let out_c = layer.out_channels();
    let mut grad_x = Tensor::zeros(sh);
    let mut grad_w = Tensor::zeros(layer.weight.shape());
    let mut grad_b = Tensor::zeros(layer.bias.shape());
    for o in 0..out_c {
        let mut acc = T::zero();
        for n in 0..sh.n {
            let base = grad_out.offset(n, o, 0, 0);
            for &g in &grad_out.data()[base..base + oh * ow] {
                acc += g;
            }
        }
        grad_b.data_mut()[o] = acc;
    }
    for n in 0..sh.n {
        for i in 0..sh.c {
            for y in 0..sh.h {
                for xw in 0..sh.w {
                    let xv = x.at(n, i, y, xw);
                    let mut gx = T::zero();
                    for o in 0..out_c {
                        let wbase = layer.weight.offset(i, o, 0, 0);
                        for ky in 0..k {
                            let oy = (y * layer.stride + ky) as isize - layer.padding as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            let obase = grad_out.offset(n, o, oy as usize, 0);
                            for kx in 0..k {
                                let ox =
                                    (xw * layer.stride + kx) as isize - layer.padding as isize;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                let g = grad_out.data()[obase + ox as usize];
                                gx += g * layer.weight.data()[wbase + ky * k + kx];
                                grad_w.data_mut()[wbase + ky * k + kx] += g * xv;
                            }
                        }
                    }
                    let gi = grad_x.offset(n, i, y, xw);
                    grad_x.data_mut()[gi] += gx;
                }
            }
        }
    }
    Ok(ConvGrads { x: grad_x, weight: grad_w, bias: grad_b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{InitScheme, Rng};

    fn rand_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed);
        Tensor::random_init(shape, InitScheme::UniformFanIn, &mut rng)
    }

    /// Direct scalar-loop convolution used as an independent oracle.
    fn conv_reference(layer: &ConvLayer<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let sh = x.shape();
        let (oh, ow) = layer.out_size(sh.h, sh.w).unwrap();
        let k = layer.kernel();
        let icg = sh.c / layer.groups;
        let ocg = layer.out_channels() / layer.groups;
        let mut out = Tensor::zeros(Shape::new(sh.n, layer.out_channels(), oh, ow));
        for n in 0..sh.n {
            for o in 0..layer.out_channels() {
                let g = o / ocg;
                for y in 0..oh {
                    for xw in 0..ow {
                        let mut acc = layer.bias.data()[o];
                        for ci in 0..icg {
                            let c = g * icg + ci;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * layer.stride + ky) as isize
                                        - layer.padding as isize;
                                    let ix = (xw * layer.stride + kx) as isize
                                        - layer.padding as isize;
                                    if iy < 0
                                        || ix < 0
                                        || iy >= sh.h as isize
                                        || ix >= sh.w as isize
                                    {
                                        continue;
                                    }
                                    acc += layer.weight.at(o, ci, ky, kx)
                                        * x.at(n, c, iy as usize, ix as usize);
                                }
                            }
                        }
                        out.set(n, o, y, xw, acc);
                    }
                }
            }
        }
        out
    }

    fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64, what: &str) {
        assert_eq!(a.shape(), b.shape(), "{what}: shape");
        for (i, (&x, &y)) in a.data().iter().zip(b.data().iter()).enumerate() {
            assert!(
                (x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0),
                "{what}: element {i}: {x} vs {y}"
            );
        }
    }

    #[test]
    fn identity_1x1_preserves_input() {
        let layer: ConvLayer<f64> = ConvLayer::identity_1x1(3);
        let x = rand_tensor(Shape::new(2, 3, 4, 5), 1);
        let y = conv2d_forward(&layer, &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_input_yields_bias_everywhere() {
        let mut rng = Rng::new(2);
        let mut layer: ConvLayer<f64> = ConvLayer::new(2, 3, 3, 1, 1, 1, &mut rng).unwrap();
        layer.bias.data_mut()[0] = 0.5;
        layer.bias.data_mut()[1] = -1.0;
        layer.bias.data_mut()[2] = 2.0;
        let x = Tensor::zeros(Shape::new(1, 2, 4, 4));
        let y = conv2d_forward(&layer, &x).unwrap();
        for o in 0..3 {
            for h in 0..4 {
                for w in 0..4 {
                    assert_eq!(y.at(0, o, h, w), layer.bias.data()[o]);
                }
            }
        }
    }

    #[test]
    fn all_ones_kernel_sums_window() {
        // 3x3 all-ones kernel over a constant 1 input, stride 1, pad 1:
        // interior outputs are 9, edges smaller.
        let mut rng = Rng::new(3);
        let mut layer: ConvLayer<f64> = ConvLayer::new(1, 1, 3, 1, 1, 1, &mut rng).unwrap();
        layer.weight = Tensor::filled(Shape::new(1, 1, 3, 3), 1.0);
        layer.bias = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let x = Tensor::filled(Shape::new(1, 1, 5, 5), 1.0);
        let y = conv2d_forward(&layer, &x).unwrap();
        assert_eq!(y.at(0, 0, 2, 2), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
        assert_eq!(y.at(0, 0, 0, 2), 6.0);
    }

    #[test]
    fn forward_matches_scalar_reference() {
        let cases = [
            (1, 3, 4, 3, 1, 1, 1, 6, 7),
            (2, 4, 6, 3, 2, 1, 1, 8, 8),
            (1, 4, 4, 1, 1, 0, 1, 5, 5),
            (2, 6, 6, 3, 1, 1, 2, 6, 6),
            (1, 8, 8, 3, 2, 1, 4, 8, 6),
            (1, 2, 5, 5, 1, 2, 1, 7, 9),
        ];
        for (seed, (n, ic, oc, k, s, p, g, h, w)) in cases.into_iter().enumerate() {
            let mut rng = Rng::new(100 + seed as u64);
            let layer: ConvLayer<f64> = ConvLayer::new(ic, oc, k, s, p, g, &mut rng).unwrap();
            let x = rand_tensor(Shape::new(n, ic, h, w), 200 + seed as u64);
            let got = conv2d_forward(&layer, &x).unwrap();
            let want = conv_reference(&layer, &x);
            assert_close(&got, &want, 1e-12, &format!("case {seed}"));
        }
    }

    #[test]
    fn grouped_conv_equals_independent_slices() {
        let mut rng = Rng::new(7);
        let g = 2;
        let layer: ConvLayer<f64> = ConvLayer::new(6, 4, 3, 1, 1, g, &mut rng).unwrap();
        let x = rand_tensor(Shape::new(2, 6, 5, 5), 8);
        let got = conv2d_forward(&layer, &x).unwrap();

        // Build g separate convolutions from the slices and concatenate.
        let xs = crate::tensor::split_channels(&x, g).unwrap();
        let mut parts = Vec::new();
        for gi in 0..g {
            let mut sub: ConvLayer<f64> = ConvLayer {
                weight: Tensor::zeros(Shape::new(2, 3, 3, 3)),
                bias: Tensor::zeros(Shape::new(2, 1, 1, 1)),
                stride: 1,
                padding: 1,
                groups: 1,
            };
            for o in 0..2 {
                sub.bias.data_mut()[o] = layer.bias.data()[gi * 2 + o];
                for c in 0..3 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            sub.weight.set(o, c, ky, kx, layer.weight.at(gi * 2 + o, c, ky, kx));
                        }
                    }
                }
            }
            parts.push(conv2d_forward(&sub, &xs[gi]).unwrap());
        }
        let want = crate::tensor::concat_channels(&parts).unwrap();
        assert_eq!(got, want, "grouped conv must equal concatenated slice convs");
    }

    #[test]
    fn backward_bias_is_grad_sum() {
        let mut rng = Rng::new(11);
        let layer: ConvLayer<f64> = ConvLayer::new(2, 3, 3, 1, 1, 1, &mut rng).unwrap();
        let x = rand_tensor(Shape::new(2, 2, 4, 4), 12);
        let g = rand_tensor(Shape::new(2, 3, 4, 4), 13);
        let grads = conv2d_backward(&layer, &x, &g).unwrap();
        for o in 0..3 {
            let mut want = 0.0;
            for n in 0..2 {
                for h in 0..4 {
                    for w in 0..4 {
                        want += g.at(n, o, h, w);
                    }
                }
            }
            assert!((grads.bias.data()[o] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_zero_grad_out_gives_zero_grads() {
        let mut rng = Rng::new(14);
        let layer: ConvLayer<f64> = ConvLayer::new(2, 2, 3, 1, 1, 1, &mut rng).unwrap();
        let x = rand_tensor(Shape::new(1, 2, 4, 4), 15);
        let g = Tensor::zeros(Shape::new(1, 2, 4, 4));
        let grads = conv2d_backward(&layer, &x, &g).unwrap();
        assert!(grads.x.data().iter().all(|&v| v == 0.0));
        assert!(grads.weight.data().iter().all(|&v| v == 0.0));
        assert!(grads.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deconv_output_size_doubles_with_stride2_k4_p1() {
        let mut rng = Rng::new(20);
        let layer: DeconvLayer<f64> = DeconvLayer::new(3, 2, 4, 2, 1, &mut rng).unwrap();
        assert_eq!(layer.out_size(8, 6).unwrap(), (16, 12));
    }

    #[test]
    fn deconv_matches_gradient_of_conv_oracle() {
        // Transposed convolution must equal the input-gradient of a forward
        // convolution whose weight tensor is the same buffer reinterpreted
        // as (out_c_conv = deconv in_c, in_c_conv = deconv out_c, kh, kw).
        for (seed, (ic, oc, k, s, p, h, w)) in [
            (3usize, 2usize, 4usize, 2usize, 1usize, 5usize, 4usize),
            (2, 3, 3, 1, 1, 6, 6),
            (1, 1, 4, 2, 1, 3, 3),
            (4, 2, 2, 2, 0, 4, 5),
        ]
        .into_iter()
        .enumerate()
        {
            let mut rng = Rng::new(300 + seed as u64);
            let mut deconv: DeconvLayer<f64> = DeconvLayer::new(ic, oc, k, s, p, &mut rng).unwrap();
            // bias must be zero for the identity to hold exactly
            deconv.bias = Tensor::zeros(Shape::new(oc, 1, 1, 1));
            let x = rand_tensor(Shape::new(2, ic, h, w), 400 + seed as u64);
            let got = deconv2d_forward(&deconv, &x).unwrap();

            let conv: ConvLayer<f64> = ConvLayer {
                weight: deconv.weight.clone(),
                bias: Tensor::zeros(Shape::new(ic, 1, 1, 1)),
                stride: s,
                padding: p,
                groups: 1,
            };
            let (oh, ow) = deconv.out_size(h, w).unwrap();
            let dummy = Tensor::zeros(Shape::new(2, oc, oh, ow));
            let grads = conv2d_backward(&conv, &dummy, &x).unwrap();
            assert_close(&got, &grads.x, 1e-10, &format!("deconv oracle case {seed}"));
        }
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let mut rng = Rng::new(21);
        let layer: ConvLayer<f64> = ConvLayer::new(3, 2, 3, 1, 1, 1, &mut rng).unwrap();
        let x = rand_tensor(Shape::new(1, 2, 4, 4), 22);
        assert!(conv2d_forward(&layer, &x).is_err());
    }

    #[test]
    fn rejects_kernel_larger_than_padded_input() {
        let mut rng = Rng::new(23);
        let layer: ConvLayer<f64> = ConvLayer::new(1, 1, 5, 1, 0, 1, &mut rng).unwrap();
        let x = rand_tensor(Shape::new(1, 1, 3, 3), 24);
        assert!(conv2d_forward(&layer, &x).is_err());
    }
}
