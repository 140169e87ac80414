//! Heatmap to coordinate decoding.

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// One decoded keypoint: sub-pixel coordinates and the peak activation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedJoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

/// Decodes each per-joint heatmap to sub-pixel coordinates.
///
/// The peak is the argmax pixel (ties keep the first in row-major order).
/// The coordinate is then shifted a quarter pixel along each axis toward
/// the second-largest pixel, searched globally over the map. When the
/// second-largest value is attained by more than one pixel the evidence is
/// directionless and no shift is applied, which also covers completely flat
/// maps. Confidence is the raw peak value. Coordinates are clamped to
/// [0, w-1] x [0, h-1].
///
/// Returns one Vec per sample with one entry per joint.
pub fn decode_heatmaps<T: Scalar>(maps: &Tensor<T>) -> Result<Vec<Vec<DecodedJoint>>> {
    let [n, k, h, w] = maps.shape().dims();
    if h * w < 2 {
        return shape_err(format!("cannot decode {h}x{w} heatmaps, need at least 2 pixels"));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        let mut joints = Vec::with_capacity(k);
        for j in 0..k {
            let base = maps.offset(s, j, 0, 0);
            let m = &maps.data()[base..base + plane];

            let mut arg = 0usize;
            for (i, &v) in m.iter().enumerate().skip(1) {
                if v.as_f64() > m[arg].as_f64() {
                    arg = i;
                }
            }
            let peak = m[arg].as_f64();

            // Second-largest value over the rest of the map, plus whether
            // it is attained more than once.
            let mut second: Option<usize> = None;
            let mut tied = false;
            for (i, &v) in m.iter().enumerate() {
                if i == arg {
                    continue;
                }
                match second {
                    None => second = Some(i),
                    Some(b) => {
                        let vb = m[b].as_f64();
                        if v.as_f64() > vb {
                            second = Some(i);
                            tied = false;
                        } else if v.as_f64() == vb {
                            tied = true;
                        }
                    }
                }
            }

            let (ax, ay) = ((arg % w) as f64, (arg / w) as f64);
            let (mut x, mut y) = (ax, ay);
            if let Some(b) = second {
                if !tied {
                    let (bx, by) = ((b % w) as f64, (b / w) as f64);
                    x += 0.25 * (bx - ax).signum_or_zero();
                    y += 0.25 * (by - ay).signum_or_zero();
                }
            }
            x = x.clamp(0.0, (w - 1) as f64);
            y = y.clamp(0.0, (h - 1) as f64);
            joints.push(DecodedJoint { x, y, confidence: peak });
        }
        out.push(joints);
    }
    Ok(out)
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    /// Like signum but 0.0 at 0.0, so an aligned axis gets no shift.
    fn signum_or_zero(self) -> f64 {
        if self == 0.0 {
            0.0
        } else {
            self.signum()
        }
    }
}
