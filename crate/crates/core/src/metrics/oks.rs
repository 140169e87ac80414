//! Object keypoint similarity.

use crate::codec::Pose;
use crate::error::{invalid, Result};

use super::OksParams;

/// OKS between a predicted and a ground-truth pose:
///
///   OKS = sum_{i: v_i > 0} exp(-d_i^2 / (2 * area * kappa_i^2)) / #labeled
///
/// where d_i is the Euclidean pixel distance and only ground-truth
/// visibility gates the terms. `area` is the instance scale s^2 used
/// directly, clamped to at least 1 px^2 so degenerate instances stay
/// finite. A ground truth with no labeled keypoints is rejected.
pub fn oks(pred: &Pose, gt: &Pose, area: f64, params: &OksParams) -> Result<f64> {
    let k = gt.k();
    if pred.k() != k {
        return invalid(format!("pred has {} keypoints, gt has {k}", pred.k()));
    }
    if params.k() != k {
        return invalid(format!("{} kappa entries for {k} joints", params.k()));
    }
    if !area.is_finite() || area < 0.0 {
        return invalid(format!("bad area {area}"));
    }
    let area = area.max(1.0);

    let mut sum = 0.0f64;
    let mut labeled = 0usize;
    for i in 0..k {
        let g = gt.keypoints[i];
        if !g.labeled() {
            continue;
        }
        labeled += 1;
        let p = pred.keypoints[i];
        let dx = p.x - g.x;
        let dy = p.y - g.y;
        let kappa = params.kappa[i];
        sum += (-(dx * dx + dy * dy) / (2.0 * area * kappa * kappa)).exp();
    }
    if labeled == 0 {
        return invalid("ground truth has no labeled keypoints");
    }
    Ok(sum / labeled as f64)
}
