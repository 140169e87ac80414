//! Head-normalized probability of correct keypoint (PCKh).

use crate::codec::Pose;
use crate::error::{invalid, Result};

use super::GtInstance;

/// Fraction of the head-box diagonal that defines the head size.
pub const HEAD_SIZE_FACTOR: f64 = 0.6;

#[derive(Debug, Clone, PartialEq)]
pub struct PckhResult {
    pub alpha: f64,
    /// Correct fraction per joint over instances where that joint is
    /// labeled; 0 when a joint is never labeled (see counts).
    pub per_joint: Vec<f64>,
    pub labeled_per_joint: Vec<usize>,
    /// Micro average: total correct / total labeled.
    pub total: f64,
}

/// PCKh over paired (prediction, ground truth) instances.
///
/// A joint counts as correct iff its Euclidean error d satisfies
/// d <= alpha * head_size, with head_size = [`HEAD_SIZE_FACTOR`] times the
/// head-box diagonal; the boundary case d == threshold is correct. Only
/// ground-truth-labeled joints (v > 0) are scored. Every ground truth must
/// carry a head_box.
pub fn pckh(preds: &[Pose], gts: &[GtInstance], alpha: f64) -> Result<PckhResult> {
    if preds.len() != gts.len() {
        return invalid(format!("{} predictions for {} ground truths", preds.len(), gts.len()));
    }
    if gts.is_empty() {
        return invalid("PCKh needs at least one instance");
    }
    if !(alpha > 0.0) {
        return invalid(format!("alpha must be positive, got {alpha}"));
    }
    let k = gts[0].pose.k();
    let mut correct = vec![0usize; k];
    let mut labeled = vec![0usize; k];

    for (i, (pred, gt)) in preds.iter().zip(gts).enumerate() {
        if pred.k() != k || gt.pose.k() != k {
            return invalid(format!("instance {i} has inconsistent keypoint count"));
        }
        let Some([x1, y1, x2, y2]) = gt.head_box else {
            return invalid(format!("instance {i} is missing head_box"));
        };
        let head_size = HEAD_SIZE_FACTOR * ((x2 - x1).powi(2) + (y2 - y1).powi(2)).sqrt();
        let thresh = alpha * head_size;
        for j in 0..k {
            let g = gt.pose.keypoints[j];
            if !g.labeled() {
                continue;
            }
            labeled[j] += 1;
            let p = pred.keypoints[j];
            let d = ((p.x - g.x).powi(2) + (p.y - g.y).powi(2)).sqrt();
            if d <= thresh {
                correct[j] += 1;
            }
        }
    }

    let per_joint: Vec<f64> = correct
        .iter()
        .zip(&labeled)
        .map(|(&c, &l)| if l == 0 { 0.0 } else { c as f64 / l as f64 })
        .collect();
    let total_labeled: usize = labeled.iter().sum();
    if total_labeled == 0 {
        return invalid("no labeled joints to score");
    }
    let total = correct.iter().sum::<usize>() as f64 / total_labeled as f64;
    Ok(PckhResult { alpha, per_joint, labeled_per_joint: labeled, total })
}
