//! Top-R hard-keypoint MSE ("online hard keypoint mining").
//!
//! Per-joint masked MSE over each heatmap, then the per-sample loss keeps
//! only the R largest joint losses. Backpropagation flows exclusively
//! through the selected joints; masked joints contribute exactly zero.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Floor below which a per-map normalizer is considered degenerate and the
/// map is compared raw instead of renormalized.
const NORM_FLOOR: f64 = 1e-12;

/// Which normalization to apply before comparing predictions to targets.
///
/// Targets are rendered peak-1 while a spatial-softmax head emits sum-1
/// maps, so the two live on different scales. `Peak` rescales each
/// predicted map by its max so both sides peak at 1; `Sum` instead rescales
/// each target map to sum 1 and compares predictions raw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CompareDomain {
    #[default]
    Peak,
    Sum,
}

impl CompareDomain {
    pub fn parse(s: &str) -> Result<CompareDomain> {
        match s {
            "peak" => Ok(CompareDomain::Peak),
            "sum" => Ok(CompareDomain::Sum),
            other => invalid(format!("unknown compare domain {other:?}, expected peak or sum")),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CompareDomain::Peak => "peak",
            CompareDomain::Sum => "sum",
        }
    }
}

/// Scalar loss, its gradient with respect to the raw predictions, and the
/// per-joint losses (flat n*K, zero at masked joints) that selection saw.
#[derive(Debug, Clone)]
pub struct LossOutput<T: Scalar> {
    pub value: f64,
    pub grad: Tensor<T>,
    pub per_joint: Vec<f64>,
}

/// Top-R masked MSE over per-joint heatmaps, comparing `pred` and `target`
/// exactly as given.
///
/// `mask` is flat n*K, row-major by sample; false entries are excluded from
/// both the loss and the gradient. Per sample, the `r` largest joint losses
/// (ties keep the lower joint index) are averaged; when fewer than `r`
/// joints are unmasked, all of them are averaged, and a sample with no
/// unmasked joints contributes zero. The total is the mean over samples.
pub fn ohkm_mse<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    mask: &[bool],
    r: usize,
) -> Result<LossOutput<T>> {
    let sh = pred.shape();
    if target.shape() != sh {
        return shape_err(format!(
            "prediction shape {:?} does not match target shape {:?}",
            sh.dims(),
            target.shape().dims()
        ));
    }
    let [n, k, h, w] = sh.dims();
    if mask.len() != n * k {
        return shape_err(format!("mask length {} does not match n*K = {}", mask.len(), n * k));
    }
    if r < 1 || r > k {
        return invalid(format!("R = {r} is outside the valid range 1..={k}"));
    }

    let plane = h * w;
    let mut per_joint = vec![0.0f64; n * k];
    for s in 0..n {
        for j in 0..k {
            if !mask[s * k + j] {
                continue;
            }
            let base = pred.offset(s, j, 0, 0);
            let p = &pred.data()[base..base + plane];
            let t = &target.data()[base..base + plane];
            let mut acc = 0.0f64;
            for i in 0..plane {
                let d = p[i].as_f64() - t[i].as_f64();
                acc += d * d;
            }
            per_joint[s * k + j] = acc / plane as f64;
        }
    }

    // Per-sample selection: stable sort by descending loss keeps ascending
    // joint order among ties, so truncation prefers lower indices.
    let mut value = 0.0f64;
    let mut weight = vec![0.0f64; n * k];
    for s in 0..n {
        let mut order: Vec<usize> = (0..k).filter(|&j| mask[s * k + j]).collect();
        order.sort_by(|&a, &b| {
            per_joint[s * k + b].partial_cmp(&per_joint[s * k + a]).expect("losses are finite")
        });
        let take = order.len().min(r);
        if take == 0 {
            continue;
        }
        let mut sample = 0.0f64;
        for &j in &order[..take] {
            sample += per_joint[s * k + j];
            weight[s * k + j] = 1.0 / (n as f64 * take as f64);
        }
        value += sample / take as f64;
    }
    value /= n as f64;

    let mut grad = Tensor::<T>::zeros(sh);
    for s in 0..n {
        for j in 0..k {
            let wsj = weight[s * k + j];
            if wsj == 0.0 {
                continue;
            }
            let base = pred.offset(s, j, 0, 0);
            let p = &pred.data()[base..base + plane];
            let t = &target.data()[base..base + plane];
            let g = &mut grad.data_mut()[base..base + plane];
            let scale = 2.0 * wsj / plane as f64;
            for i in 0..plane {
                g[i] = T::from_f64(scale * (p[i].as_f64() - t[i].as_f64()));
            }
        }
    }

    Ok(LossOutput { value, grad, per_joint })
}

/// Top-R masked MSE after rescaling one side into the chosen compare
/// domain; see [`CompareDomain`]. The returned gradient is with respect to
/// the raw (pre-rescale) predictions.
pub fn ohkm_mse_in_domain<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    mask: &[bool],
    r: usize,
    domain: CompareDomain,
) -> Result<LossOutput<T>> {
    let sh = pred.shape();
    let [n, k, h, w] = sh.dims();
    let plane = h * w;
    match domain {
        CompareDomain::Sum => {
            // Rescale each target map to sum 1; predictions stay raw, so
            // the gradient needs no chaining.
            let mut scaled = target.clone();
            for s in 0..n {
                for j in 0..k {
                    let base = target.offset(s, j, 0, 0);
                    let t = &mut scaled.data_mut()[base..base + plane];
                    let sum: f64 = t.iter().map(|v| v.as_f64()).sum();
                    if sum.abs() <= NORM_FLOOR {
                        continue;
                    }
                    for v in t.iter_mut() {
                        *v = T::from_f64(v.as_f64() / sum);
                    }
                }
            }
            ohkm_mse(pred, &scaled, mask, r)
        }
        CompareDomain::Peak => {
            // y = p / m with m = p[argmax]. The argmax entry itself maps to
            // the constant 1, so its direct term cancels and only the
            // normalizer dependence remains:
            //   dL/dp_i = g_i / m          (i != argmax)
            //   dL/dp_a = -sum_j g_j p_j / m^2
            // Maps whose max is below the degeneracy floor are compared raw
            // and skip the chain entirely.
            let mut scaled = pred.clone();
            let mut norms: Vec<Option<(f64, usize)>> = vec![None; n * k];
            for s in 0..n {
                for j in 0..k {
                    let base = pred.offset(s, j, 0, 0);
                    let p = &pred.data()[base..base + plane];
                    let (mut arg, mut m) = (0usize, p[0].as_f64());
                    for (i, &v) in p.iter().enumerate().skip(1) {
                        if v.as_f64() > m {
                            m = v.as_f64();
                            arg = i;
                        }
                    }
                    if m.abs() <= NORM_FLOOR {
                        continue;
                    }
                    norms[s * k + j] = Some((m, arg));
                    let out = &mut scaled.data_mut()[base..base + plane];
                    for v in out.iter_mut() {
                        *v = T::from_f64(v.as_f64() / m);
                    }
                }
            }
            let mut result = ohkm_mse(&scaled, target, mask, r)?;
            for s in 0..n {
                for j in 0..k {
                    let Some((m, arg)) = norms[s * k + j] else { continue };
                    let base = pred.offset(s, j, 0, 0);
                    let p = &pred.data()[base..base + plane];
                    let g = &mut result.grad.data_mut()[base..base + plane];
                    let mut dot = 0.0f64;
                    for i in 0..plane {
                        dot += g[i].as_f64() * p[i].as_f64();
                    }
                    for v in g.iter_mut() {
                        *v = T::from_f64(v.as_f64() / m);
                    }
                    g[arg] = T::from_f64(g[arg].as_f64() - dot / (m * m));
                }
            }
            Ok(result)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_input;
    use crate::tensor::{Rng, Shape};

    /// Builds 1x1-pixel maps whose per-joint raw MSE equals `losses`.
    fn stacks_with_losses(losses: &[f64]) -> (Tensor<f64>, Tensor<f64>) {
        let k = losses.len();
        let mut pred = Tensor::<f64>::zeros(Shape::new(1, k, 1, 1));
        let target = Tensor::<f64>::zeros(Shape::new(1, k, 1, 1));
        for (j, &l) in losses.iter().enumerate() {
            pred.data_mut()[j] = l.sqrt();
        }
        (pred, target)
    }

    #[test]
    fn top_two_of_four_joint_losses() {
        let (pred, target) = stacks_with_losses(&[0.5, 0.2, 0.9, 0.1]);
        let out = ohkm_mse(&pred, &target, &[true; 4], 2).unwrap();
        assert!((out.value - 0.7).abs() < 1e-12, "got {}", out.value);
        // Only joints 2 and 0 carry gradient.
        assert_ne!(out.grad.at(0, 0, 0, 0), 0.0);
        assert_eq!(out.grad.at(0, 1, 0, 0), 0.0);
        assert_ne!(out.grad.at(0, 2, 0, 0), 0.0);
        assert_eq!(out.grad.at(0, 3, 0, 0), 0.0);
    }

    #[test]
    fn r_equal_k_matches_plain_mean() {
        let mut rng = Rng::new(11);
        let sh = Shape::new(2, 5, 4, 3);
        let mut pred = Tensor::<f64>::zeros(sh);
        let mut target = Tensor::<f64>::zeros(sh);
        for v in pred.data_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        for v in target.data_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        let mut mask = vec![true; 10];
        mask[3] = false;
        mask[7] = false;

        let out = ohkm_mse(&pred, &target, &mask, 5).unwrap();
        let mut plain = 0.0;
        for s in 0..2 {
            let active: Vec<f64> = (0..5)
                .filter(|&j| mask[s * 5 + j])
                .map(|j| out.per_joint[s * 5 + j])
                .collect();
            plain += active.iter().sum::<f64>() / active.len() as f64;
        }
        plain /= 2.0;
        assert!((out.value - plain).abs() < 1e-12);
    }

    #[test]
    fn increasing_r_never_increases_the_loss() {
        let mut rng = Rng::new(5);
        for _ in 0..50 {
            let k = 2 + rng.below(6);
            let losses: Vec<f64> = (0..k).map(|_| rng.uniform(0.0, 2.0)).collect();
            let (pred, target) = stacks_with_losses(&losses);
            let mask = vec![true; k];
            let mut prev = f64::INFINITY;
            for r in 1..=k {
                let v = ohkm_mse(&pred, &target, &mask, r).unwrap().value;
                assert!(v <= prev + 1e-15, "r={r}: {v} > {prev}");
                prev = v;
            }
        }
    }

    #[test]
    fn ties_keep_the_lower_joint_index() {
        let (pred, target) = stacks_with_losses(&[0.4, 0.9, 0.4, 0.1]);
        let out = ohkm_mse(&pred, &target, &[true; 4], 2).unwrap();
        // Joints 1 and 0 are selected; the tied joint 2 is not.
        assert_ne!(out.grad.at(0, 0, 0, 0), 0.0);
        assert_ne!(out.grad.at(0, 1, 0, 0), 0.0);
        assert_eq!(out.grad.at(0, 2, 0, 0), 0.0);
    }

    #[test]
    fn r_out_of_range_is_rejected() {
        let (pred, target) = stacks_with_losses(&[0.5, 0.2]);
        assert!(ohkm_mse(&pred, &target, &[true; 2], 0).is_err());
        assert!(ohkm_mse(&pred, &target, &[true; 2], 3).is_err());
        assert!(ohkm_mse(&pred, &target, &[true; 2], 2).is_ok());
    }

    #[test]
    fn masked_joints_get_exactly_zero_gradient() {
        let mut rng = Rng::new(9);
        let sh = Shape::new(2, 4, 5, 6);
        let mut pred = Tensor::<f64>::zeros(sh);
        let mut target = Tensor::<f64>::zeros(sh);
        for v in pred.data_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        for v in target.data_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        let mask = [true, false, true, true, false, true, false, true];
        for domain in [CompareDomain::Peak, CompareDomain::Sum] {
            let out = ohkm_mse_in_domain(&pred, &target, &mask, 2, domain).unwrap();
            for s in 0..2 {
                for j in 0..4 {
                    if mask[s * 4 + j] {
                        continue;
                    }
                    let base = out.grad.offset(s, j, 0, 0);
                    let plane = &out.grad.data()[base..base + 30];
                    assert!(plane.iter().all(|&g| g == 0.0), "mask leak at ({s},{j})");
                }
            }
        }
    }

    #[test]
    fn raw_gradient_matches_finite_differences() {
        let mut rng = Rng::new(21);
        let sh = Shape::new(2, 3, 4, 4);
        let mut pred = Tensor::<f64>::zeros(sh);
        let mut target = Tensor::<f64>::zeros(sh);
        for v in pred.data_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        for v in target.data_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        let mask = [true, true, false, true, true, true];
        let out = ohkm_mse(&pred, &target, &mask, 2).unwrap();
        let summary = check_input(&pred, &out.grad, 40, |x| {
            Ok(ohkm_mse(x, &target, &mask, 2)?.value)
        })
        .unwrap();
        assert!(summary.max_rel < 1e-7, "max rel {}", summary.max_rel);
    }

    #[test]
    fn peak_domain_gradient_matches_finite_differences() {
        let mut rng = Rng::new(33);
        let sh = Shape::new(1, 3, 4, 5);
        let mut pred = Tensor::<f64>::zeros(sh);
        let mut target = Tensor::<f64>::zeros(sh);
        // Positive, well-separated values keep the per-map argmax stable
        // under the probe's finite-difference steps.
        for v in pred.data_mut() {
            *v = rng.uniform(0.2, 1.0);
        }
        for v in target.data_mut() {
            *v = rng.uniform(0.0, 1.0);
        }
        let mask = [true; 3];
        let out = ohkm_mse_in_domain(&pred, &target, &mask, 2, CompareDomain::Peak).unwrap();
        let summary = check_input(&pred, &out.grad, 60, |x| {
            Ok(ohkm_mse_in_domain(x, &target, &mask, 2, CompareDomain::Peak)?.value)
        })
        .unwrap();
        assert!(summary.max_rel < 1e-6, "max rel {}", summary.max_rel);
    }

    #[test]
    fn peak_domain_scores_proportional_maps_as_perfect() {
        // A sum-1 map that is an exact rescale of the peak-1 target should
        // incur zero loss once both sides are compared peak-to-peak.
        let mut target = Tensor::<f64>::zeros(Shape::new(1, 1, 3, 3));
        for (i, v) in [0.1, 0.5, 0.1, 0.5, 1.0, 0.5, 0.1, 0.5, 0.1].iter().enumerate() {
            target.data_mut()[i] = *v;
        }
        let total: f64 = target.data().iter().sum();
        let mut pred = target.clone();
        for v in pred.data_mut() {
            *v /= total;
        }
        let out = ohkm_mse_in_domain(&pred, &target, &[true], 1, CompareDomain::Peak).unwrap();
        assert!(out.value < 1e-28, "got {}", out.value);
    }

    #[test]
    fn sum_domain_rescales_targets() {
        let mut target = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 2));
        target.data_mut().copy_from_slice(&[3.0, 1.0]);
        let mut pred = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 2));
        pred.data_mut().copy_from_slice(&[0.75, 0.25]);
        let out = ohkm_mse_in_domain(&pred, &target, &[true], 1, CompareDomain::Sum).unwrap();
        assert!(out.value < 1e-30, "got {}", out.value);
    }

    #[test]
    fn empty_sample_contributes_zero() {
        let (pred, target) = stacks_with_losses(&[0.5, 0.2]);
        let out = ohkm_mse(&pred, &target, &[false, false], 1).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad.data().iter().all(|&g| g == 0.0));
    }
}
