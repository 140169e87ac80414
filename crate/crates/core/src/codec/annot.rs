//! Annotation and prediction JSON schemas.
//!
//! A dataset file looks like:
//!
//! ```json
//! {
//!   "images": [{"id": 0, "width": 48, "height": 64, "file": "img0.tns"}],
//!   "annotations": [{
//!     "image_id": 0,
//!     "keypoints": [x, y, v, ...],
//!     "head_box": [x1, y1, x2, y2],
//!     "area": 220.5
//!   }],
//!   "meta": {"K": 15, "flip_pairs": [[3, 4]], "kappa": [0.7071, ...]}
//! }
//! ```
//!
//! `head_box` and `area` are optional per annotation; metrics that need
//! them reject datasets where they are missing. Predictions are dumped as a
//! flat list of `{"image_id", "keypoints": [x, y, score, ...], "score"}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

use super::{FlipPairs, Pose};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: u64,
    /// Flat [x, y, v, ...] triples, length 3K.
    pub keypoints: Vec<f64>,
    /// [x1, y1, x2, y2]; required by the head-normalized accuracy metric.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_box: Option<[f64; 4]>,
    /// Instance scale for the similarity metric. Falls back to the labeled
    /// keypoint bounding-box area when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub area: Option<f64>,
}

impl Annotation {
    pub fn pose(&self) -> Result<Pose> {
        Pose::from_flat(&self.keypoints)
    }

    /// Area used for similarity scoring: the explicit field when present,
    /// otherwise the labeled-keypoint bounding box.
    pub fn effective_area(&self) -> Result<f64> {
        if let Some(a) = self.area {
            return Ok(a);
        }
        Ok(self.pose()?.bbox_area())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Meta {
    #[serde(rename = "K")]
    pub k: usize,
    pub flip_pairs: Vec<[usize; 2]>,
    /// Per-joint similarity constants.
    pub kappa: Vec<f64>,
}

impl Meta {
    pub fn flip_pairs(&self) -> Result<FlipPairs> {
        FlipPairs::new(self.flip_pairs.iter().map(|p| (p[0], p[1])).collect(), self.k)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<Annotation>,
    pub meta: Meta,
}

impl Dataset {
    pub fn from_json(text: &str) -> Result<Dataset> {
        let ds: Dataset = serde_json::from_str(text)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.meta.k;
        if k == 0 {
            return invalid("meta.K must be positive");
        }
        if self.meta.kappa.len() != k {
            return invalid(format!("meta.kappa has {} entries, expected K={k}", self.meta.kappa.len()));
        }
        if self.meta.kappa.iter().any(|&v| v <= 0.0) {
            return invalid("meta.kappa entries must be positive");
        }
        self.meta.flip_pairs()?;
        let mut ids = std::collections::BTreeSet::new();
        for img in &self.images {
            if !ids.insert(img.id) {
                return invalid(format!("duplicate image id {}", img.id));
            }
            if img.width == 0 || img.height == 0 {
                return invalid(format!("image {} has empty size", img.id));
            }
        }
        for (i, ann) in self.annotations.iter().enumerate() {
            if !ids.contains(&ann.image_id) {
                return invalid(format!("annotation {i} references unknown image {}", ann.image_id));
            }
            if ann.keypoints.len() != 3 * k {
                return invalid(format!(
                    "annotation {i} has {} keypoint values, expected 3*K = {}",
                    ann.keypoints.len(),
                    3 * k
                ));
            }
            if let Some([x1, y1, x2, y2]) = ann.head_box {
                if x2 <= x1 || y2 <= y1 {
                    return invalid(format!("annotation {i} has a degenerate head_box"));
                }
            }
            if let Some(a) = ann.area {
                if a <= 0.0 {
                    return invalid(format!("annotation {i} has non-positive area {a}"));
                }
            }
        }
        Ok(())
    }

    pub fn annotations_for(&self, image_id: u64) -> Vec<&Annotation> {
        self.annotations.iter().filter(|a| a.image_id == image_id).collect()
    }
}

/// One predicted instance in a prediction dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub image_id: u64,
    /// Flat [x, y, score, ...] triples, length 3K.
    pub keypoints: Vec<f64>,
    /// Instance-level score (mean joint confidence).
    pub score: f64,
}

impl PredictionEntry {
    pub fn keypoint(&self, j: usize) -> (f64, f64, f64) {
        (self.keypoints[3 * j], self.keypoints[3 * j + 1], self.keypoints[3 * j + 2])
    }

    pub fn k(&self) -> usize {
        self.keypoints.len() / 3
    }
}

pub fn save_predictions(path: &Path, preds: &[PredictionEntry]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(preds)?)?;
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionEntry>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
