//! Gaussian training-target rendering.

use crate::error::{invalid, Result};
use crate::tensor::{Scalar, Shape, Tensor};

use super::{HeatmapStack, Normalization, Pose};

/// Renders one Gaussian heatmap per joint for each pose.
///
/// Each labeled keypoint produces an isotropic Gaussian with standard
/// deviation `sigma`, centered on the integer pixel nearest the keypoint so
/// the peak value is exactly 1. Unlabeled keypoints (v = 0), and keypoints
/// whose snapped center falls outside the `h` x `w` grid, produce an
/// all-zero map and a cleared mask flag.
///
/// Returns the (n, K, h, w) target stack plus a flat n*K mask, row-major by
/// sample, that is true exactly where the map carries a real target.
pub fn render_targets<T: Scalar>(
    poses: &[Pose],
    k: usize,
    h: usize,
    w: usize,
    sigma: f64,
) -> Result<(HeatmapStack<T>, Vec<bool>)> {
    if sigma <= 0.0 {
        return invalid(format!("sigma must be positive, got {sigma}"));
    }
    if h == 0 || w == 0 {
        return invalid(format!("target resolution {h}x{w} is empty"));
    }
    for (i, pose) in poses.iter().enumerate() {
        if pose.k() != k {
            return invalid(format!("pose {i} has {} keypoints, expected {k}", pose.k()));
        }
    }

    let n = poses.len();
    let mut maps = Tensor::<T>::zeros(Shape::new(n, k, h, w));
    let mut mask = vec![false; n * k];
    let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);

    for (s, pose) in poses.iter().enumerate() {
        for (j, kp) in pose.keypoints.iter().enumerate() {
            if !kp.labeled() {
                continue;
            }
            let cx = kp.x.round();
            let cy = kp.y.round();
            if cx < 0.0 || cy < 0.0 || cx >= w as f64 || cy >= h as f64 {
                continue;
            }
            mask[s * k + j] = true;
            let base = maps.offset(s, j, 0, 0);
            let plane = &mut maps.data_mut()[base..base + h * w];
            for py in 0..h {
                let dy = py as f64 - cy;
                for px in 0..w {
                    let dx = px as f64 - cx;
                    let val = (-(dx * dx + dy * dy) * inv_two_sigma_sq).exp();
                    plane[py * w + px] = T::from_f64(val);
                }
            }
        }
    }

    let stack = HeatmapStack { maps, normalization: Normalization::PeakOne };
    Ok((stack, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Keypoint;

    fn one_pose(k: usize, pts: &[(f64, f64, u8)]) -> Pose {
        assert_eq!(pts.len(), k);
        Pose::new(pts.iter().map(|&(x, y, v)| Keypoint { x, y, v }).collect())
    }

    #[test]
    fn peak_is_one_at_nearest_integer_pixel() {
        let pose = one_pose(1, &[(10.3, 5.6, 2)]);
        let (stack, mask) = render_targets::<f64>(&[pose], 1, 16, 16, 1.0).unwrap();
        assert_eq!(mask, vec![true]);
        // 10.3 snaps to 10, 5.6 snaps to 6.
        assert_eq!(stack.maps.at(0, 0, 6, 10), 1.0);
        let mut max = f64::MIN;
        for &v in stack.maps.data() {
            max = max.max(v);
        }
        assertapprox(max, 1.0, 0.0);
    }

    #[test]
    fn value_one_pixel_from_center_is_exp_minus_half() {
        let pose = one_pose(1, &[(8.0, 8.0, 2)]);
        let (stack, _) = render_targets::<f64>(&[pose], 1, 16, 16, 1.0).unwrap();
        let expected = (-0.5f64).exp();
        assertapprox(expected, 0.60653, 1e-5);
        for (py, px) in [(7, 8), (9, 8), (8, 7), (8, 9)] {
            assert_eq!(stack.maps.at(0, 0, py, px), expected);
        }
        // Diagonal neighbors sit at distance sqrt(2).
        assertapprox(stack.maps.at(0, 0, 7, 7), (-1.0f64).exp(), 1e-15);
    }

    #[test]
    fn unlabeled_and_out_of_bounds_joints_render_zero_and_unmask() {
        let pose = one_pose(3, &[(5.0, 5.0, 0), (-3.0, 2.0, 2), (4.0, 4.0, 2)]);
        let (stack, mask) = render_targets::<f64>(&[pose], 3, 8, 8, 1.0).unwrap();
        assert_eq!(mask, vec![false, false, true]);
        for j in 0..2 {
            let base = stack.maps.offset(0, j, 0, 0);
            assert!(stack.maps.data()[base..base + 64].iter().all(|&v| v == 0.0));
        }
        assert_eq!(stack.maps.at(0, 2, 4, 4), 1.0);
    }

    #[test]
    fn snap_keeps_borderline_keypoints_in_bounds() {
        // 7.4 snaps to 7 (the last valid column of an 8-wide grid) while
        // 7.6 snaps to 8 and falls outside.
        let inside = one_pose(1, &[(7.4, 3.0, 2)]);
        let outside = one_pose(1, &[(7.6, 3.0, 2)]);
        let (s1, m1) = render_targets::<f64>(&[inside], 1, 8, 8, 1.0).unwrap();
        let (s2, m2) = render_targets::<f64>(&[outside], 1, 8, 8, 1.0).unwrap();
        assert_eq!(m1, vec![true]);
        assert_eq!(s1.maps.at(0, 0, 3, 7), 1.0);
        assert_eq!(m2, vec![false]);
        assert!(s2.maps.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_layout_keeps_poses_separate() {
        let p1 = one_pose(2, &[(2.0, 2.0, 2), (0.0, 0.0, 0)]);
        let p2 = one_pose(2, &[(0.0, 0.0, 0), (5.0, 1.0, 2)]);
        let (stack, mask) = render_targets::<f32>(&[p1, p2], 2, 8, 8, 1.0).unwrap();
        assert_eq!(stack.maps.shape().dims(), [2, 2, 8, 8]);
        assert_eq!(mask, vec![true, false, false, true]);
        assert_eq!(stack.maps.at(0, 0, 2, 2), 1.0);
        assert_eq!(stack.maps.at(1, 1, 1, 5), 1.0);
    }

    #[test]
    fn rejects_bad_arguments() {
        let pose = one_pose(1, &[(1.0, 1.0, 2)]);
        assert!(render_targets::<f64>(&[pose.clone()], 1, 8, 8, 0.0).is_err());
        assert!(render_targets::<f64>(&[pose.clone()], 2, 8, 8, 1.0).is_err());
        assert!(render_targets::<f64>(&[pose], 1, 0, 8, 1.0).is_err());
    }

    fn assertapprox(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }
}
