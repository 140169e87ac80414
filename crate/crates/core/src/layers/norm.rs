//! Batch normalization with train/eval modes.

use super::{param_name, HasParams};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel batch normalization. `mode` selects whether forward/backward
/// use batch statistics (Train) or the running buffers (Eval); gradient
/// checks pin layers to Eval so the loss stays a pure function of inputs.
#[derive(Debug, Clone)]
pub struct BatchNormLayer<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
    pub mode: BnMode,
}

impl<T: Scalar> BatchNormLayer<T> {
    pub fn new(c: usize) -> BatchNormLayer<T> {
        BatchNormLayer {
            gamma: Tensor::filled(Shape::new(c, 1, 1, 1), T::one()),
            beta: Tensor::zeros(Shape::new(c, 1, 1, 1)),
            running_mean: Tensor::zeros(Shape::new(c, 1, 1, 1)),
            running_var: Tensor::filled(Shape::new(c, 1, 1, 1), T::one()),
            eps: 1e-5,
            momentum: 0.1,
            mode: BnMode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape().n
    }
}

impl<T: Scalar> HasParams<T> for BatchNormLayer<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&param_name(prefix, "gamma"), &self.gamma);
        f(&param_name(prefix, "beta"), &self.beta);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&param_name(prefix, "gamma"), &mut self.gamma);
        f(&param_name(prefix, "beta"), &mut self.beta);
    }
    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.visit_params(prefix, f);
        f(&param_name(prefix, "running_mean"), &self.running_mean);
        f(&param_name(prefix, "running_var"), &self.running_var);
    }
    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.visit_params_mut(prefix, f);
        f(&param_name(prefix, "running_mean"), &mut self.running_mean);
        f(&param_name(prefix, "running_var"), &mut self.running_var);
    }
}

/// Saved activations for backward. `std_inv` is 1/sqrt(var + eps) per
/// channel for whichever statistics normalized the batch.
#[derive(Debug, Clone)]
pub struct BnCache<T: Scalar> {
    pub xhat: Tensor<T>,
    pub std_inv: Vec<T>,
    pub mode: BnMode,
}

fn check_bn_input<T: Scalar>(layer: &BatchNormLayer<T>, x: &Tensor<T>) -> Result<()> {
    if x.shape().c != layer.channels() {
        return shape_err(format!(
            "batchnorm over {} channels got input {}",
            layer.channels(),
            x.shape()
        ));
    }
    Ok(())
}

/// Forward in the layer's mode. Train mode normalizes with batch statistics
/// and updates the running buffers in place (hence `&mut`); it requires a
/// batch of at least 2. Eval mode normalizes with the running buffers.
pub fn batchnorm_forward<T: Scalar>(
    layer: &mut BatchNormLayer<T>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, BnCache<T>)> {
    check_bn_input(layer, x)?;
    let sh = x.shape();
    match layer.mode {
        BnMode::Eval => {
            let (out, cache) = eval_normalize(layer, x);
            Ok((out, cache))
        }
        BnMode::Train => {
            // Variance needs more than one value per channel; a single image
            // is fine as long as it has more than one pixel.
            if sh.n * sh.h * sh.w < 2 {
                return invalid("batchnorm train mode requires more than one value per channel");
            }
            let m = (sh.n * sh.h * sh.w) as f64;
            let plane = sh.h * sh.w;
            let mut out = Tensor::zeros(sh);
            let mut xhat = Tensor::zeros(sh);
            let mut std_inv = vec![T::zero(); sh.c];
            for c in 0..sh.c {
                let mut sum = T::zero();
                for n in 0..sh.n {
                    let base = x.offset(n, c, 0, 0);
                    for &v in &x.data()[base..base + plane] {
                        sum += v;
                    }
                }
                let mean = sum / T::from_f64(m);
                let mut var_sum = T::zero();
                for n in 0..sh.n {
                    let base = x.offset(n, c, 0, 0);
                    for &v in &x.data()[base..base + plane] {
                        let d = v - mean;
                        var_sum += d * d;
                    }
                }
                let var = var_sum / T::from_f64(m);
                let sinv = T::one() / (var + T::from_f64(layer.eps)).sqrt();
                std_inv[c] = sinv;
                let (g, b) = (layer.gamma.data()[c], layer.beta.data()[c]);
                for n in 0..sh.n {
                    let base = x.offset(n, c, 0, 0);
                    for i in 0..plane {
                        let xh = (x.data()[base + i] - mean) * sinv;
                        xhat.data_mut()[base + i] = xh;
                        out.data_mut()[base + i] = g * xh + b;
                    }
                }
                // Running update uses the unbiased variance, momentum as the
                // weight of the new statistic.
                let mom = T::from_f64(layer.momentum);
                let unbiased = if m > 1.0 {
                    var * T::from_f64(m / (m - 1.0))
                } else {
                    var
                };
                let rm = layer.running_mean.data()[c];
                let rv = layer.running_var.data()[c];
                layer.running_mean.data_mut()[c] = (T::one() - mom) * rm + mom * mean;
                layer.running_var.data_mut()[c] = (T::one() - mom) * rv + mom * unbiased;
            }
            debug_assert!(out.all_finite(), "batchnorm produced non-finite values");
            Ok((out, BnCache { xhat, std_inv, mode: BnMode::Train }))
        }
    }
}

fn eval_normalize<T: Scalar>(
    layer: &BatchNormLayer<T>,
    x: &Tensor<T>,
) -> (Tensor<T>, BnCache<T>) {
    let sh = x.shape();
    let plane = sh.h * sh.w;
    let mut out = Tensor::zeros(sh);
    let mut xhat = Tensor::zeros(sh);
    let mut std_inv = vec![T::zero(); sh.c];
    for c in 0..sh.c {
        let mean = layer.running_mean.data()[c];
        let var = layer.running_var.data()[c];
        let sinv = T::one() / (var + T::from_f64(layer.eps)).sqrt();
        std_inv[c] = sinv;
        let (g, b) = (layer.gamma.data()[c], layer.beta.data()[c]);
        for n in 0..sh.n {
            let base = x.offset(n, c, 0, 0);
            for i in 0..plane {
                let xh = (x.data()[base + i] - mean) * sinv;
                xhat.data_mut()[base + i] = xh;
                out.data_mut()[base + i] = g * xh + b;
            }
        }
    }
    (out, BnCache { xhat, std_inv, mode: BnMode::Eval })
}

/// Inference-only normalization with running statistics, independent of the
/// layer's mode flag. Used by pure evaluation paths.
pub fn batchnorm_infer<T: Scalar>(layer: &BatchNormLayer<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    check_bn_input(layer, x)?;
    Ok(eval_normalize(layer, x).0)
}

/// Returns (grad_x, grad_gamma, grad_beta).
pub fn batchnorm_backward<T: Scalar>(
    layer: &BatchNormLayer<T>,
    cache: &BnCache<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let sh = grad_out.shape();
    if cache.xhat.shape() != sh {
        return shape_err(format!(
            "batchnorm_backward cache {} vs grad {}",
            cache.xhat.shape(),
            sh
        ));
    }
    let plane = sh.h * sh.w;
    let mut grad_x = Tensor::zeros(sh);
    let mut grad_gamma = Tensor::zeros(layer.gamma.shape());
    let mut grad_beta = Tensor::zeros(layer.beta.shape());
    for c in 0..sh.c {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for n in 0..sh.n {
            let base = grad_out.offset(n, c, 0, 0);
            for i in 0..plane {
                let g = grad_out.data()[base + i];
                sum_g += g;
                sum_gx += g * cache.xhat.data()[base + i];
            }
        }
        grad_beta.data_mut()[c] = sum_g;
        grad_gamma.data_mut()[c] = sum_gx;
        let scale = layer.gamma.data()[c] * cache.std_inv[c];
        match cache.mode {
            BnMode::Eval => {
                for n in 0..sh.n {
                    let base = grad_out.offset(n, c, 0, 0);
                    for i in 0..plane {
                        grad_x.data_mut()[base + i] = grad_out.data()[base + i] * scale;
                    }
                }
            }
            BnMode::Train => {
                let m = T::from_f64((sh.n * plane) as f64);
                let mean_g = sum_g / m;
                let mean_gx = sum_gx / m;
                for n in 0..sh.n {
                    let base = grad_out.offset(n, c, 0, 0);
                    for i in 0..plane {
                        let g = grad_out.data()[base + i];
                        let xh = cache.xhat.data()[base + i];
                        grad_x.data_mut()[base + i] = scale * (g - mean_g - xh * mean_gx);
                    }
                }
            }
        }
    }
    Ok((grad_x, grad_gamma, grad_beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{InitScheme, Rng};

    #[test]
    fn eval_with_default_stats_is_near_identity() {
        // gamma 1, beta 0, running mean 0, var 1: y = x / sqrt(1 + eps).
        let layer: BatchNormLayer<f64> = BatchNormLayer::new(3);
        let mut rng = Rng::new(1);
        let x = Tensor::random_init(Shape::new(2, 3, 4, 4), InitScheme::UniformFanIn, &mut rng);
        let y = batchnorm_infer(&layer, &x).unwrap();
        for (&yv, &xv) in y.data().iter().zip(x.data().iter()) {
            assert!((yv - xv).abs() < 1e-5 * xv.abs().max(1.0));
        }
    }

    #[test]
    fn train_output_mean_is_beta() {
        let mut layer: BatchNormLayer<f64> = BatchNormLayer::new(2);
        layer.beta.data_mut()[0] = 0.7;
        layer.beta.data_mut()[1] = -0.3;
        let mut rng = Rng::new(2);
        let x = Tensor::random_init(Shape::new(4, 2, 3, 3), InitScheme::UniformFanIn, &mut rng)
            .map(|v| v * 10.0 + 5.0);
        let (y, _) = batchnorm_forward(&mut layer, &x).unwrap();
        for c in 0..2 {
            let mut sum = 0.0;
            for n in 0..4 {
                for h in 0..3 {
                    for w in 0..3 {
                        sum += y.at(n, c, h, w);
                    }
                }
            }
            let mean = sum / 36.0;
            assert!(
                (mean - layer.beta.data()[c]).abs() < 1e-6,
                "channel {c} mean {mean}"
            );
        }
    }

    #[test]
    fn train_mode_needs_more_than_one_value_per_channel() {
        let mut layer: BatchNormLayer<f64> = BatchNormLayer::new(1);
        let single = Tensor::filled(Shape::new(1, 1, 1, 1), 1.0);
        assert!(batchnorm_forward(&mut layer, &single).is_err());
        // A batch of one still carries h*w samples per channel.
        let plane = Tensor::filled(Shape::new(1, 1, 2, 2), 1.0);
        assert!(batchnorm_forward(&mut layer, &plane).is_ok());
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let mut layer: BatchNormLayer<f64> = BatchNormLayer::new(1);
        let x = Tensor::filled(Shape::new(2, 1, 2, 2), 4.0);
        let (_, _) = batchnorm_forward(&mut layer, &x).unwrap();
        // mean moves 10% of the way from 0 to 4
        assert!((layer.running_mean.data()[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_never_mutates_running_stats() {
        let mut layer: BatchNormLayer<f64> = BatchNormLayer::new(1);
        layer.mode = BnMode::Eval;
        let before = layer.running_mean.clone();
        let x = Tensor::filled(Shape::new(2, 1, 2, 2), 4.0);
        let _ = batchnorm_forward(&mut layer, &x).unwrap();
        assert_eq!(layer.running_mean, before);
    }
}
