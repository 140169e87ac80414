//! Keypoint/heatmap conversions: Gaussian target rendering, the top-R
//! hard-keypoint MSE loss, argmax-with-offset decoding, flip-averaged
//! inference and geometric augmentation, plus the annotation JSON schema.

pub mod annot;
pub mod augment;
pub mod decode;
pub mod flip;
pub mod loss;
pub mod render;

pub use annot::{
    load_predictions, save_predictions, Annotation, Dataset, ImageEntry, Meta, PredictionEntry,
};
pub use augment::{apply_warp, augment, AugmentParams, WarpDraw};
pub use decode::{decode_heatmaps, DecodedJoint};
pub use flip::{flip_average, HeatmapModel};
pub use loss::{ohkm_mse, ohkm_mse_in_domain, CompareDomain, LossOutput};
pub use render::render_targets;

use crate::error::{invalid, Result};
use crate::tensor::{Scalar, Tensor};

/// One keypoint: pixel coordinates plus COCO-style visibility
/// (0 = unlabeled, 1 = labeled but invisible, 2 = labeled and visible).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub v: u8,
}

impl Keypoint {
    pub fn labeled(&self) -> bool {
        self.v > 0
    }
}

/// An ordered list of K keypoints for one person instance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Pose {
    pub keypoints: Vec<Keypoint>,
}

impl Pose {
    pub fn new(keypoints: Vec<Keypoint>) -> Pose {
        Pose { keypoints }
    }

    pub fn k(&self) -> usize {
        self.keypoints.len()
    }

    /// Flat [x, y, v, x, y, v, ...] form used by the JSON schema.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * self.k());
        for kp in &self.keypoints {
            out.extend_from_slice(&[kp.x, kp.y, f64::from(kp.v)]);
        }
        out
    }

    pub fn from_flat(flat: &[f64]) -> Result<Pose> {
        if flat.len() % 3 != 0 {
            return invalid(format!("keypoint list length {} is not a multiple of 3", flat.len()));
        }
        let keypoints = flat
            .chunks_exact(3)
            .map(|c| Keypoint { x: c[0], y: c[1], v: c[2] as u8 })
            .collect();
        Ok(Pose { keypoints })
    }

    /// Tight bounding-box area over labeled keypoints (zero if fewer than
    /// two distinct labeled points).
    pub fn bbox_area(&self) -> f64 {
        let labeled: Vec<&Keypoint> = self.keypoints.iter().filter(|k| k.labeled()).collect();
        if labeled.is_empty() {
            return 0.0;
        }
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for kp in labeled {
            x0 = x0.min(kp.x);
            y0 = y0.min(kp.y);
            x1 = x1.max(kp.x);
            y1 = y1.max(kp.y);
        }
        (x1 - x0).max(0.0) * (y1 - y0).max(0.0)
    }
}

/// How a stack of heatmaps is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// Max value of each rendered map is 1.
    PeakOne,
    /// Each map sums to 1 (the spatial-softmax convention).
    SumOne,
}

/// A batch of per-joint heatmaps, shape (n, K, h, w).
#[derive(Debug, Clone)]
pub struct HeatmapStack<T: Scalar> {
    pub maps: Tensor<T>,
    pub normalization: Normalization,
}

impl<T: Scalar> HeatmapStack<T> {
    pub fn joints(&self) -> usize {
        self.maps.shape().c
    }

    pub fn resolution(&self) -> (usize, usize) {
        let sh = self.maps.shape();
        (sh.h, sh.w)
    }
}

/// Left/right joint index pairs swapped under horizontal flip.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FlipPairs {
    pairs: Vec<(usize, usize)>,
}

impl FlipPairs {
    /// Validates that pairs are disjoint (no index appears twice) and all
    /// indices address one of the `k` joints.
    pub fn new(pairs: Vec<(usize, usize)>, k: usize) -> Result<FlipPairs> {
        let mut seen = vec![false; k];
        for &(a, b) in &pairs {
            if a >= k || b >= k {
                return invalid(format!("flip pair ({a},{b}) out of range for K={k}"));
            }
            if a == b || seen[a] || seen[b] {
                return invalid(format!("flip pair ({a},{b}) overlaps another pair"));
            }
            seen[a] = true;
            seen[b] = true;
        }
        Ok(FlipPairs { pairs })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// The joint index that joint `i` maps to under a horizontal flip
    /// (itself when unpaired).
    pub fn mirror_of(&self, i: usize) -> usize {
        for &(a, b) in &self.pairs {
            if a == i {
                return b;
            }
            if b == i {
                return a;
            }
        }
        i
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pose_flat_round_trip() {
        let pose = Pose::new(vec![
            Keypoint { x: 1.5, y: 2.0, v: 2 },
            Keypoint { x: 0.0, y: 0.0, v: 0 },
        ]);
        let back = Pose::from_flat(&pose.to_flat()).unwrap();
        assert_eq!(pose, back);
        assert!(Pose::from_flat(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn bbox_area_ignores_unlabeled() {
        let pose = Pose::new(vec![
            Keypoint { x: 0.0, y: 0.0, v: 2 },
            Keypoint { x: 4.0, y: 3.0, v: 1 },
            Keypoint { x: 100.0, y: 100.0, v: 0 },
        ]);
        assert_eq!(pose.bbox_area(), 12.0);
    }

    #[test]
    fn flip_pairs_validate() {
        assert!(FlipPairs::new(vec![(0, 1), (2, 3)], 4).is_ok());
        assert!(FlipPairs::new(vec![(0, 1), (1, 2)], 4).is_err());
        assert!(FlipPairs::new(vec![(0, 4)], 4).is_err());
        assert!(FlipPairs::new(vec![(2, 2)], 4).is_err());
        let p = FlipPairs::new(vec![(1, 2)], 4).unwrap();
        assert_eq!(p.mirror_of(1), 2);
        assert_eq!(p.mirror_of(2), 1);
        assert_eq!(p.mirror_of(0), 0);
        assert_eq!(p.mirror_of(3), 3);
    }
}
