//! Evaluation metrics: object keypoint similarity (OKS), OKS-based AP/AR
//! sweeps with greedy matching, and head-normalized keypoint accuracy
//! (PCKh).

pub mod ap;
pub mod oks;
pub mod pckh;
pub mod report;

pub use ap::{oks_ap, ApSweep, MAX_DETS};
pub use oks::oks;
pub use pckh::{pckh, PckhResult};
pub use report::EvalReport;

use crate::codec::Pose;
use crate::error::{invalid, Result};

/// Per-joint similarity constants for OKS.
#[derive(Debug, Clone, PartialEq)]
pub struct OksParams {
    pub kappa: Vec<f64>,
}

impl OksParams {
    pub fn new(kappa: Vec<f64>) -> Result<OksParams> {
        if kappa.is_empty() {
            return invalid("kappa must have at least one entry");
        }
        if kappa.iter().any(|&k| !(k > 0.0)) {
            return invalid("kappa entries must be positive");
        }
        Ok(OksParams { kappa })
    }

    /// kappa_i = 1/sqrt(2) for all joints, so OKS = exp(-d^2/area): the
    /// convention shipped with synthetic datasets to keep oracles simple.
    pub fn synthetic(k: usize) -> OksParams {
        OksParams { kappa: vec![std::f64::consts::FRAC_1_SQRT_2; k] }
    }

    pub fn k(&self) -> usize {
        self.kappa.len()
    }
}

/// One ground-truth instance as the evaluator sees it.
#[derive(Debug, Clone)]
pub struct GtInstance {
    pub pose: Pose,
    /// Instance scale (s^2); clamped to >= 1 px^2 inside `oks`.
    pub area: f64,
    pub head_box: Option<[f64; 4]>,
}

/// One scored prediction.
#[derive(Debug, Clone)]
pub struct ScoredPose {
    pub pose: Pose,
    pub score: f64,
}

/// Everything the evaluator needs for one image. Build these in ascending
/// image-id order so reductions are deterministic.
#[derive(Debug, Clone)]
pub struct ImageEval {
    pub image_id: u64,
    pub gts: Vec<GtInstance>,
    pub preds: Vec<ScoredPose>,
}

/// The standard OKS threshold sweep 0.50:0.05:0.95.
pub fn standard_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}
