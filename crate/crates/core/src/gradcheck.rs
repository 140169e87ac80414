//! Central finite-difference gradient verification.
//!
//! The checker perturbs one scalar at a time (parameter element or input
//! element), reevaluates a scalar loss twice, and compares the central
//! difference against the analytic gradient. Everything runs in f64; the
//! loss reduction uses compensated summation so that FD noise on linear ops
//! stays near machine precision instead of growing with tensor size.

use crate::error::{invalid, Result};
use crate::layers::{Gradients, HasParams};
use crate::tensor::Tensor;

/// Perturbation step shared by all checks.
pub const FD_EPS: f64 = 1e-5;

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Worst single comparison seen during a check.
#[derive(Debug, Clone)]
pub struct FdRecord {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel: f64,
}

/// Aggregate result of one gradient check run.
#[derive(Debug, Clone)]
pub struct FdSummary {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: Option<FdRecord>,
}

impl FdSummary {
    fn new() -> FdSummary {
        FdSummary { checked: 0, max_rel: 0.0, worst: None }
    }

    fn observe(&mut self, rec: FdRecord) {
        self.checked += 1;
        if rec.rel >= self.max_rel {
            self.max_rel = rec.rel;
            self.worst = Some(rec);
        }
    }

    /// Fold another summary in, keeping the overall worst record.
    pub fn merge(&mut self, other: FdSummary) {
        self.checked += other.checked;
        if other.max_rel >= self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst;
        }
    }
}

/// Projection loss `sum(y * p)`: a scalar that is linear in `y`, so its
/// gradient wrt `y` is exactly `p`. Compensated (Neumaier) summation keeps
/// the evaluation error at a couple of ulps regardless of element count.
pub fn projection_loss(y: &Tensor<f64>, p: &Tensor<f64>) -> Result<f64> {
    if y.shape() != p.shape() {
        return invalid(format!(
            "projection shape {} does not match output {}",
            p.shape(),
            y.shape()
        ));
    }
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for (&a, &b) in y.data().iter().zip(p.data().iter()) {
        let term = a * b;
        let t = sum + term;
        if sum.abs() >= term.abs() {
            comp += (sum - t) + term;
        } else {
            comp += (term - t) + sum;
        }
        sum = t;
    }
    Ok(sum + comp)
}

/// Deterministic element subsample: all indices when the tensor is small,
/// otherwise an even stride that always includes the first and last element.
fn sample_indices(len: usize, cap: usize) -> Vec<usize> {
    if cap == 0 || len <= cap {
        return (0..len).collect();
    }
    let stride = len.div_ceil(cap);
    let mut idx: Vec<usize> = (0..len).step_by(stride).collect();
    if *idx.last().unwrap() != len - 1 {
        idx.push(len - 1);
    }
    idx
}

fn set_param<M: HasParams<f64>>(
    model: &mut M,
    name: &str,
    index: usize,
    value: f64,
) -> Result<()> {
    let mut hit = false;
    model.visit_params_mut("", &mut |n, t| {
        if n == name {
            t.data_mut()[index] = value;
            hit = true;
        }
    });
    if hit {
        Ok(())
    } else {
        invalid(format!("parameter {name} not found during perturbation"))
    }
}

fn get_param<M: HasParams<f64>>(model: &M, name: &str, index: usize) -> Result<f64> {
    let mut found = None;
    model.visit_params("", &mut |n, t| {
        if n == name {
            found = Some(t.data()[index]);
        }
    });
    found.ok_or_else(|| crate::error::Error::Validation(format!("parameter {name} not found")))
}

/// Check every parameter tensor of `model` against `analytic` gradients.
///
/// `loss` must recompute the scalar objective from the model's current
/// parameters. `cap` limits how many elements are probed per tensor (0 means
/// all); the first and last element of each tensor are always included.
pub fn check_params<M, F>(
    model: &mut M,
    analytic: &Gradients<f64>,
    cap: usize,
    mut loss: F,
) -> Result<FdSummary>
where
    M: HasParams<f64>,
    F: FnMut(&mut M) -> Result<f64>,
{
    let mut names: Vec<(String, usize)> = Vec::new();
    model.visit_params("", &mut |n, t| names.push((n.to_string(), t.shape().count())));
    let mut summary = FdSummary::new();
    for (name, len) in names {
        let grad = analytic
            .get(&name)
            .ok_or_else(|| crate::error::Error::Validation(format!("no gradient for {name}")))?;
        if grad.shape().count() != len {
            return invalid(format!("gradient for {name} has wrong element count"));
        }
        for i in sample_indices(len, cap) {
            let base = get_param(model, &name, i)?;
            // Divide by the width the floats actually realised; the
            // subtraction of the two nearby perturbed values is exact, so
            // representation error of base ± eps drops out entirely.
            let (hi, lo) = (base + FD_EPS, base - FD_EPS);
            set_param(model, &name, i, hi)?;
            let up = loss(model)?;
            set_param(model, &name, i, lo)?;
            let down = loss(model)?;
            set_param(model, &name, i, base)?;
            let numeric = (up - down) / (hi - lo);
            let a = grad.data()[i];
            summary.observe(FdRecord {
                param: name.clone(),
                index: i,
                analytic: a,
                numeric,
                rel: rel_error(a, numeric),
            });
        }
    }
    Ok(summary)
}

/// Check an input-gradient tensor against finite differences of `loss`.
pub fn check_input<F>(
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    cap: usize,
    mut loss: F,
) -> Result<FdSummary>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if analytic.shape() != x.shape() {
        return invalid("input gradient shape does not match input");
    }
    let mut probe = x.clone();
    let mut summary = FdSummary::new();
    for i in sample_indices(x.shape().count(), cap) {
        let base = x.data()[i];
        let (hi, lo) = (base + FD_EPS, base - FD_EPS);
        probe.data_mut()[i] = hi;
        let up = loss(&probe)?;
        probe.data_mut()[i] = lo;
        let down = loss(&probe)?;
        probe.data_mut()[i] = base;
        let numeric = (up - down) / (hi - lo);
        let a = analytic.data()[i];
        summary.observe(FdRecord {
            param: "input".to_string(),
            index: i,
            analytic: a,
            numeric,
            rel: rel_error(a, numeric),
        });
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{
        batchnorm_backward, batchnorm_forward, batchnorm_infer, conv2d_backward, conv2d_forward,
        deconv2d_backward, deconv2d_forward, dense_backward, dense_forward, pool_backward,
        pool_forward, relu_backward, relu_forward, sigmoid_backward, sigmoid_forward,
        spatial_softmax_backward, spatial_softmax_forward, BatchNormLayer, BnMode, ConvLayer,
        DeconvLayer, DenseLayer, PoolKind,
    };
    use crate::tensor::{InitScheme, Rng, Shape, Tensor};

    fn projection(shape: Shape, rng: &mut Rng) -> Tensor<f64> {
        let mut p = Tensor::zeros(shape);
        for v in p.data_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        p
    }

    #[test]
    fn rel_error_floors_near_zero() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!((rel_error(1e-9, 0.0) - 1e-3).abs() < 1e-12);
        assert!((rel_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sample_indices_covers_ends() {
        assert_eq!(sample_indices(5, 0), vec![0, 1, 2, 3, 4]);
        assert_eq!(sample_indices(5, 10), vec![0, 1, 2, 3, 4]);
        let s = sample_indices(1000, 8);
        assert!(s.len() <= 9);
        assert_eq!(s[0], 0);
        assert_eq!(*s.last().unwrap(), 999);
    }

    #[test]
    fn dense_layer_matches_fd_to_linear_precision() {
        // A linear map differentiated by central differences should agree to
        // near machine precision, not just truncation order. Dyadic data
        // with every partial sum kept below 2 makes the perturbed forward
        // passes exact in f64, so the check isolates genuine backward bugs
        // from FD roundoff.
        let mut rng = Rng::new(11);
        let mut layer: DenseLayer<f64> = DenseLayer::new(3, 2, &mut rng);
        layer.weight.data_mut().copy_from_slice(&[
            1.25, 1.5, -1.0625, //
            -1.125, 0.75, 1.1875,
        ]);
        layer.bias.data_mut().copy_from_slice(&[-0.5, 0.25]);
        let x = Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![1.0, -1.0, 1.0]).unwrap();
        let p = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1.0, -1.0]).unwrap();
        let g = dense_backward(&layer, &x, &p).unwrap();
        let mut analytic = Gradients::new();
        analytic.accumulate("weight", g.weight).unwrap();
        analytic.accumulate("bias", g.bias).unwrap();
        let summary = check_params(&mut layer, &analytic, 0, |m| {
            projection_loss(&dense_forward(m, &x)?, &p)
        })
        .unwrap();
        assert!(summary.max_rel < 1e-10, "dense rel {:e}", summary.max_rel);
        let input = check_input(&x, &g.x, 0, |probe| {
            projection_loss(&dense_forward(&layer, probe)?, &p)
        })
        .unwrap();
        assert!(input.max_rel < 1e-10, "dense input rel {:e}", input.max_rel);
    }

    #[test]
    fn conv_layer_matches_fd() {
        let mut rng = Rng::new(12);
        let mut layer: ConvLayer<f64> = ConvLayer::new(3, 2, 3, 1, 1, 1, &mut rng).unwrap();
        let x = Tensor::random_init(Shape::new(2, 3, 5, 5), InitScheme::UniformFanIn, &mut rng);
        let y = conv2d_forward(&layer, &x).unwrap();
        let p = projection(y.shape(), &mut rng);
        let g = conv2d_backward(&layer, &x, &p).unwrap();
        let mut analytic = Gradients::new();
        analytic.accumulate("weight", g.weight).unwrap();
        analytic.accumulate("bias", g.bias).unwrap();
        let summary = check_params(&mut layer, &analytic, 0, |m| {
            projection_loss(&conv2d_forward(m, &x)?, &p)
        })
        .unwrap();
        assert!(summary.max_rel < 1e-6, "conv rel {:e}", summary.max_rel);
        let input = check_input(&x, &g.x, 0, |probe| {
            projection_loss(&conv2d_forward(&layer, probe)?, &p)
        })
        .unwrap();
        assert!(input.max_rel < 1e-6, "conv input rel {:e}", input.max_rel);
    }

    #[test]
    fn strided_grouped_conv_matches_fd() {
        let mut rng = Rng::new(13);
        let mut layer: ConvLayer<f64> = ConvLayer::new(4, 4, 3, 2, 1, 2, &mut rng).unwrap();
        let x = Tensor::random_init(Shape::new(1, 4, 6, 6), InitScheme::UniformFanIn, &mut rng);
        let y = conv2d_forward(&layer, &x).unwrap();
        let p = projection(y.shape(), &mut rng);
        let g = conv2d_backward(&layer, &x, &p).unwrap();
        let mut analytic = Gradients::new();
        analytic.accumulate("weight", g.weight).unwrap();
        analytic.accumulate("bias", g.bias).unwrap();
        let summary = check_params(&mut layer, &analytic, 0, |m| {
            projection_loss(&conv2d_forward(m, &x)?, &p)
        })
        .unwrap();
        assert!(summary.max_rel < 1e-6, "grouped rel {:e}", summary.max_rel);
    }

    #[test]
    fn deconv_layer_matches_fd() {
        let mut rng = Rng::new(14);
        let mut layer: DeconvLayer<f64> = DeconvLayer::new(3, 2, 4, 2, 1, &mut rng).unwrap();
        let x = Tensor::random_init(Shape::new(1, 3, 4, 3), InitScheme::UniformFanIn, &mut rng);
        let y = deconv2d_forward(&layer, &x).unwrap();
        let p = projection(y.shape(), &mut rng);
        let g = deconv2d_backward(&layer, &x, &p).unwrap();
        let mut analytic = Gradients::new();
        analytic.accumulate("weight", g.weight).unwrap();
        analytic.accumulate("bias", g.bias).unwrap();
        let summary = check_params(&mut layer, &analytic, 0, |m| {
            projection_loss(&deconv2d_forward(m, &x)?, &p)
        })
        .unwrap();
        assert!(summary.max_rel < 1e-6, "deconv rel {:e}", summary.max_rel);
        let input = check_input(&x, &g.x, 0, |probe| {
            projection_loss(&deconv2d_forward(&layer, probe)?, &p)
        })
        .unwrap();
        assert!(input.max_rel < 1e-6, "deconv input rel {:e}", input.max_rel);
    }

    #[test]
    fn batchnorm_train_mode_matches_fd() {
        let mut rng = Rng::new(15);
        let mut layer: BatchNormLayer<f64> = BatchNormLayer::new(3);
        // Non-trivial affine so gamma gradients are exercised away from 1.
        for v in layer.gamma.data_mut() {
            *v = rng.uniform(0.5, 1.5);
        }
        for v in layer.beta.data_mut() {
            *v = rng.uniform(-0.5, 0.5);
        }
        let x = Tensor::random_init(Shape::new(4, 3, 3, 3), InitScheme::UniformFanIn, &mut rng);
        let (y, cache) = batchnorm_forward(&mut layer, &x).unwrap();
        let p = projection(y.shape(), &mut rng);
        let (gx, gg, gb) = batchnorm_backward(&layer, &cache, &p).unwrap();
        let mut analytic = Gradients::new();
        analytic.accumulate("gamma", gg).unwrap();
        analytic.accumulate("beta", gb).unwrap();
        let summary = check_params(&mut layer, &analytic, 0, |m| {
            // Running-stat updates during reevaluation do not feed the
            // train-mode output, so the loss stays a pure function of x.
            let (y, _) = batchnorm_forward(m, &x)?;
            projection_loss(&y, &p)
        })
        .unwrap();
        assert!(summary.max_rel < 1e-6, "bn train rel {:e}", summary.max_rel);
        let input = check_input(&x, &gx, 0, |probe| {
            let mut scratch = layer.clone();
            let (y, _) = batchnorm_forward(&mut scratch, probe)?;
            projection_loss(&y, &p)
        })
        .unwrap();
        assert!(input.max_rel < 1e-6, "bn train input rel {:e}", input.max_rel);
    }

    #[test]
    fn batchnorm_eval_mode_matches_fd() {
        let mut rng = Rng::new(16);
        let mut layer: BatchNormLayer<f64> = BatchNormLayer::new(2);
        layer.mode = BnMode::Eval;
        for v in layer.running_mean.data_mut() {
            *v = rng.uniform(-0.3, 0.3);
        }
        for v in layer.running_var.data_mut() {
            *v = rng.uniform(0.5, 2.0);
        }
        let x = Tensor::random_init(Shape::new(2, 2, 3, 3), InitScheme::UniformFanIn, &mut rng);
        let (y, cache) = batchnorm_forward(&mut layer, &x).unwrap();
        let p = projection(y.shape(), &mut rng);
        let (gx, gg, gb) = batchnorm_backward(&layer, &cache, &p).unwrap();
        let mut analytic = Gradients::new();
        analytic.accumulate("gamma", gg).unwrap();
        analytic.accumulate("beta", gb).unwrap();
        let summary = check_params(&mut layer, &analytic, 0, |m| {
            projection_loss(&batchnorm_infer(m, &x)?, &p)
        })
        .unwrap();
        assert!(summary.max_rel < 1e-6, "bn eval rel {:e}", summary.max_rel);
        let input = check_input(&x, &gx, 0, |probe| {
            projection_loss(&batchnorm_infer(&layer, probe)?, &p)
        })
        .unwrap();
        assert!(input.max_rel < 1e-8, "bn eval input rel {:e}", input.max_rel);
    }

    #[test]
    fn activations_match_fd_on_inputs() {
        let mut rng = Rng::new(17);
        // Keep relu inputs away from the kink: |x| > 1e-2 >> eps.
        let mut x = Tensor::zeros(Shape::new(2, 2, 4, 4));
        for v in x.data_mut() {
            let mag = rng.uniform(0.01, 1.0);
            *v = if rng.coin(0.5) { mag } else { -mag };
        }
        let p = projection(x.shape(), &mut rng);

        let y = relu_forward(&x);
        let gx = relu_backward(&x, &p).unwrap();
        let _ = y;
        let s = check_input(&x, &gx, 0, |probe| projection_loss(&relu_forward(probe), &p))
            .unwrap();
        assert!(s.max_rel < 1e-10, "relu rel {:e}", s.max_rel);

        let y = sigmoid_forward(&x);
        let gx = sigmoid_backward(&y, &p).unwrap();
        let s = check_input(&x, &gx, 0, |probe| projection_loss(&sigmoid_forward(probe), &p))
            .unwrap();
        assert!(s.max_rel < 1e-6, "sigmoid rel {:e}", s.max_rel);

        let y = spatial_softmax_forward(&x);
        let gx = spatial_softmax_backward(&y, &p).unwrap();
        let s = check_input(&x, &gx, 0, |probe| {
            projection_loss(&spatial_softmax_forward(probe), &p)
        })
        .unwrap();
        assert!(s.max_rel < 1e-6, "softmax rel {:e}", s.max_rel);
    }

    #[test]
    fn pools_match_fd_on_inputs() {
        let mut rng = Rng::new(18);
        let x: Tensor<f64> =
            Tensor::random_init(Shape::new(2, 2, 4, 4), InitScheme::UniformFanIn, &mut rng);
        for kind in [
            PoolKind::Max { kernel: 2, stride: 2 },
            PoolKind::Avg { kernel: 2, stride: 2 },
            PoolKind::GlobalMax,
            PoolKind::GlobalAvg,
        ] {
            let (y, cache) = pool_forward(kind, &x).unwrap();
            let p = projection(y.shape(), &mut rng);
            let gx = pool_backward(kind, &cache, &p).unwrap();
            let s = check_input(&x, &gx, 0, |probe| {
                projection_loss(&pool_forward(kind, probe)?.0, &p)
            })
            .unwrap();
            assert!(s.max_rel < 1e-8, "pool {kind:?} rel {:e}", s.max_rel);
        }
    }

    #[test]
    fn missing_gradient_is_reported() {
        let mut rng = Rng::new(19);
        let mut layer: DenseLayer<f64> = DenseLayer::new(2, 2, &mut rng);
        let analytic = Gradients::new();
        let err = check_params(&mut layer, &analytic, 0, |_| Ok(0.0)).unwrap_err();
        assert!(err.to_string().contains("no gradient"));
    }
}
