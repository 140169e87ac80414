//! Fully-connected layer over (n, c, 1, 1) feature vectors.

use super::{param_name, HasParams};
use crate::error::{shape_err, Result};
use crate::tensor::{InitScheme, Rng, Scalar, Shape, Tensor};

/// Dense layer; weight is (out, in, 1, 1), bias (out, 1, 1, 1). Inputs and
/// outputs are channel vectors shaped (n, c, 1, 1) so the whole parameter
/// universe stays rank-4.
#[derive(Debug, Clone)]
pub struct DenseLayer<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(in_f: usize, out_f: usize, rng: &mut Rng) -> DenseLayer<T> {
        DenseLayer {
            weight: Tensor::random_init(
                Shape::new(out_f, in_f, 1, 1),
                InitScheme::UniformFanIn,
                rng,
            ),
            bias: Tensor::zeros(Shape::new(out_f, 1, 1, 1)),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape().c
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape().n
    }
}

impl<T: Scalar> HasParams<T> for DenseLayer<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&param_name(prefix, "weight"), &self.weight);
        f(&param_name(prefix, "bias"), &self.bias);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&param_name(prefix, "weight"), &mut self.weight);
        f(&param_name(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct DenseGrads<T: Scalar> {
    pub x: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn check_dense_input<T: Scalar>(layer: &DenseLayer<T>, x: &Tensor<T>) -> Result<()> {
    let sh = x.shape();
    if sh.c != layer.in_features() || sh.h != 1 || sh.w != 1 {
        return shape_err(format!(
            "dense expects (n, {}, 1, 1), got {sh}",
            layer.in_features()
        ));
    }
    Ok(())
}

pub fn dense_forward<T: Scalar>(layer: &DenseLayer<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    check_dense_input(layer, x)?;
    let n = x.shape().n;
    let (inf, outf) = (layer.in_features(), layer.out_features());
    let mut out = Tensor::zeros(Shape::new(n, outf, 1, 1));
    for s in 0..n {
        let xrow = &x.data()[s * inf..(s + 1) * inf];
        for o in 0..outf {
            let wrow = &layer.weight.data()[o * inf..(o + 1) * inf];
            let mut acc = layer.bias.data()[o];
            for (&xv, &wv) in xrow.iter().zip(wrow.iter()) {
                acc += xv * wv;
            }
            out.data_mut()[s * outf + o] = acc;
        }
    }
    debug_assert!(out.all_finite(), "dense_forward produced non-finite values");
    Ok(out)
}

pub fn dense_backward<T: Scalar>(
    layer: &DenseLayer<T>,
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    check_dense_input(layer, x)?;
    let n = x.shape().n;
    let (inf, outf) = (layer.in_features(), layer.out_features());
    if grad_out.shape() != Shape::new(n, outf, 1, 1) {
        return shape_err(format!("dense_backward grad_out {}", grad_out.shape()));
    }
    let mut grad_x = Tensor::zeros(x.shape());
    let mut grad_w = Tensor::zeros(layer.weight.shape());
    let mut grad_b = Tensor::zeros(layer.bias.shape());
    for s in 0..n {
        let xrow = &x.data()[s * inf..(s + 1) * inf];
        let grow = &grad_out.data()[s * outf..(s + 1) * outf];
        for (o, &g) in grow.iter().enumerate() {
            grad_b.data_mut()[o] += g;
            let wrow = &layer.weight.data()[o * inf..(o + 1) * inf];
            let wgrow = &mut grad_w.data_mut()[o * inf..(o + 1) * inf];
            for i in 0..inf {
                wgrow[i] += g * xrow[i];
            }
            let xgrow = &mut grad_x.data_mut()[s * inf..(s + 1) * inf];
            for i in 0..inf {
                xgrow[i] += g * wrow[i];
            }
        }
    }
    Ok(DenseGrads { x: grad_x, weight: grad_w, bias: grad_b })
}
