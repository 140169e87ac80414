//! OKS-based average precision / average recall.

use crate::error::Result;

use super::{oks, ImageEval, OksParams};

/// Detections kept per image after score sorting.
pub const MAX_DETS: usize = 20;

/// AP/AR values per OKS threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ApSweep {
    pub thresholds: Vec<f64>,
    pub ap: Vec<f64>,
    pub ar: Vec<f64>,
}

impl ApSweep {
    pub fn mean_ap(&self) -> f64 {
        mean(&self.ap)
    }

    pub fn mean_ar(&self) -> f64 {
        mean(&self.ar)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// One pooled detection in the global ranking.
struct RankedDet {
    score: f64,
    image_pos: usize,
    local_pos: usize,
    /// Matched flag per threshold.
    tp: Vec<bool>,
}

/// Greedy OKS matching and 101-point interpolated AP over a threshold
/// sweep, plus detection recall (AR) at the same thresholds.
///
/// Per image, predictions are sorted by descending score (ties keep input
/// order) and truncated to [`MAX_DETS`]. At each threshold every prediction
/// in turn claims the still-unmatched ground truth with the highest OKS,
/// provided that OKS >= threshold; OKS ties keep the lowest gt index.
/// Ground truths without labeled keypoints are excluded entirely. The
/// precision-recall curve pools detections across images by descending
/// score (ties: earlier image, then earlier local rank).
pub fn oks_ap(images: &[ImageEval], params: &OksParams, thresholds: &[f64]) -> Result<ApSweep> {
    let nt = thresholds.len();
    let mut total_gt = 0usize;
    let mut ranked: Vec<RankedDet> = Vec::new();

    for (image_pos, img) in images.iter().enumerate() {
        let gts: Vec<&super::GtInstance> =
            img.gts.iter().filter(|g| g.pose.keypoints.iter().any(|kp| kp.labeled())).collect();
        total_gt += gts.len();

        let mut order: Vec<usize> = (0..img.preds.len()).collect();
        order.sort_by(|&a, &b| {
            img.preds[b].score.partial_cmp(&img.preds[a].score).expect("finite scores")
        });
        order.truncate(MAX_DETS);

        // OKS matrix for the retained detections.
        let mut sim = vec![vec![0.0f64; gts.len()]; order.len()];
        for (pi, &p) in order.iter().enumerate() {
            for (gi, gt) in gts.iter().enumerate() {
                sim[pi][gi] = oks(&img.preds[p].pose, &gt.pose, gt.area, params)?;
            }
        }

        let mut dets: Vec<RankedDet> = order
            .iter()
            .enumerate()
            .map(|(local_pos, &p)| RankedDet {
                score: img.preds[p].score,
                image_pos,
                local_pos,
                tp: vec![false; nt],
            })
            .collect();

        for (ti, &thr) in thresholds.iter().enumerate() {
            let mut taken = vec![false; gts.len()];
            for (pi, det) in dets.iter_mut().enumerate() {
                let mut best: Option<usize> = None;
                for gi in 0..gts.len() {
                    if taken[gi] {
                        continue;
                    }
                    if best.is_none_or(|b| sim[pi][gi] > sim[pi][b]) {
                        best = Some(gi);
                    }
                }
                if let Some(gi) = best {
                    if sim[pi][gi] >= thr {
                        taken[gi] = true;
                        det.tp[ti] = true;
                    }
                }
            }
        }
        ranked.extend(dets);
    }

    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("finite scores")
            .then(a.image_pos.cmp(&b.image_pos))
            .then(a.local_pos.cmp(&b.local_pos))
    });

    let mut ap = Vec::with_capacity(nt);
    let mut ar = Vec::with_capacity(nt);
    for ti in 0..nt {
        let mut tp = 0usize;
        let mut precision = Vec::with_capacity(ranked.len());
        let mut recall = Vec::with_capacity(ranked.len());
        for (i, det) in ranked.iter().enumerate() {
            if det.tp[ti] {
                tp += 1;
            }
            precision.push(tp as f64 / (i + 1) as f64);
            recall.push(if total_gt == 0 { 0.0 } else { tp as f64 / total_gt as f64 });
        }
        ap.push(interpolated_ap(&precision, &recall));
        ar.push(if total_gt == 0 { 0.0 } else { tp as f64 / total_gt as f64 });
    }

    Ok(ApSweep { thresholds: thresholds.to_vec(), ap, ar })
}

/// 101-point interpolated average precision: at each recall level r in
/// {0.00, 0.01, ..., 1.00}, take the maximum precision achieved at recall
/// >= r, then average the 101 values.
fn interpolated_ap(precision: &[f64], recall: &[f64]) -> f64 {
    if precision.is_empty() {
        return 0.0;
    }
    // Precision envelope from the right: env[i] = max precision at rank >= i.
    let mut env = precision.to_vec();
    for i in (0..env.len() - 1).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut total = 0.0f64;
    for j in 0..=100 {
        let r = j as f64 / 100.0;
        // First rank reaching recall r; recall is non-decreasing.
        let p = recall.iter().position(|&rc| rc >= r).map_or(0.0, |i| env[i]);
        total += p;
    }
    total / 101.0
}
