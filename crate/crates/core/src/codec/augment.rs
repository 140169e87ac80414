//! Geometric training augmentation.
//!
//! Flip, rotation and scale are composed into one affine warp about the
//! image center, so pixels are resampled exactly once per example.

use crate::error::{invalid, Result};
use crate::tensor::{Rng, Scalar, Tensor};

use super::{FlipPairs, Pose};

/// Sampling ranges for the random warp.
#[derive(Debug, Clone, Copy)]
pub struct AugmentParams {
    /// Probability of a horizontal flip.
    pub flip_prob: f64,
    /// Rotation is drawn uniformly from [-rot_deg, rot_deg].
    pub rot_deg: f64,
    /// Scale is drawn uniformly from [scale_lo, scale_hi].
    pub scale_lo: f64,
    pub scale_hi: f64,
}

impl Default for AugmentParams {
    fn default() -> AugmentParams {
        AugmentParams { flip_prob: 0.5, rot_deg: 40.0, scale_lo: 0.7, scale_hi: 1.3 }
    }
}

/// One concrete draw from [`AugmentParams`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpDraw {
    pub flip: bool,
    pub rot_deg: f64,
    pub scale: f64,
}

impl WarpDraw {
    pub const IDENTITY: WarpDraw = WarpDraw { flip: false, rot_deg: 0.0, scale: 1.0 };

    pub fn sample(params: &AugmentParams, rng: &mut Rng) -> WarpDraw {
        WarpDraw {
            flip: rng.coin(params.flip_prob),
            rot_deg: rng.uniform(-params.rot_deg, params.rot_deg),
            scale: rng.uniform(params.scale_lo, params.scale_hi),
        }
    }

    /// The forward 2x2 linear part: rotate(theta) . scale(s) . flip,
    /// applied to center-relative coordinates.
    fn linear(&self) -> [f64; 4] {
        let t = self.rot_deg.to_radians();
        let (sin, cos) = t.sin_cos();
        let f = if self.flip { -1.0 } else { 1.0 };
        let s = self.scale;
        [s * cos * f, -s * sin, s * sin * f, s * cos]
    }
}

/// Randomly warps each sample of an (n, c, h, w) batch and its pose,
/// drawing an independent transform per sample.
pub fn augment<T: Scalar>(
    images: &Tensor<T>,
    poses: &[Pose],
    pairs: &FlipPairs,
    params: &AugmentParams,
    rng: &mut Rng,
) -> Result<(Tensor<T>, Vec<Pose>)> {
    let n = images.shape().n;
    if poses.len() != n {
        return invalid(format!("{} poses for a batch of {n} images", poses.len()));
    }
    if params.flip_prob < 0.0
        || params.flip_prob > 1.0
        || params.rot_deg < 0.0
        || params.scale_lo <= 0.0
        || params.scale_lo > params.scale_hi
    {
        return invalid(format!("invalid augmentation ranges {params:?}"));
    }
    let mut out_img = images.clone();
    let mut out_poses = Vec::with_capacity(n);
    for s in 0..n {
        let draw = WarpDraw::sample(params, rng);
        let (img, pose) = apply_warp_sample(images, s, &poses[s], pairs, &draw)?;
        let [_, c, h, w] = images.shape().dims();
        let base = out_img.offset(s, 0, 0, 0);
        out_img.data_mut()[base..base + c * h * w].copy_from_slice(img.data());
        out_poses.push(pose);
    }
    Ok((out_img, out_poses))
}

/// Applies one concrete warp to a single-sample image and pose. Exposed so
/// tests and tools can drive exact parameters.
pub fn apply_warp<T: Scalar>(
    image: &Tensor<T>,
    pose: &Pose,
    pairs: &FlipPairs,
    draw: &WarpDraw,
) -> Result<(Tensor<T>, Pose)> {
    if image.shape().n != 1 {
        return invalid(format!("apply_warp expects a single sample, got n={}", image.shape().n));
    }
    apply_warp_sample(image, 0, pose, pairs, draw)
}

fn apply_warp_sample<T: Scalar>(
    images: &Tensor<T>,
    s: usize,
    pose: &Pose,
    pairs: &FlipPairs,
    draw: &WarpDraw,
) -> Result<(Tensor<T>, Pose)> {
    let [_, c, h, w] = images.shape().dims();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let [a, b, cc, d] = draw.linear();
    let det = a * d - b * cc;
    if det.abs() < 1e-12 {
        return invalid(format!("degenerate warp {draw:?}"));
    }
    // Inverse linear part, for pull-style resampling.
    let (ia, ib, ic, id) = (d / det, -b / det, -cc / det, a / det);

    let mut out = Tensor::<T>::zeros(crate::tensor::Shape::new(1, c, h, w));
    for ch in 0..c {
        let src = images.offset(s, ch, 0, 0);
        let src_plane = &images.data()[src..src + h * w];
        let dst = out.offset(0, ch, 0, 0);
        for qy in 0..h {
            for qx in 0..w {
                let rx = qx as f64 - cx;
                let ry = qy as f64 - cy;
                let px = ia * rx + ib * ry + cx;
                let py = ic * rx + id * ry + cy;
                out.data_mut()[dst + qy * w + qx] = bilinear(src_plane, h, w, px, py);
            }
        }
    }

    // Keypoints ride the forward map; out-of-bounds ones lose their label.
    // Under a flip, joint identities swap as well: output joint j takes the
    // warped coordinates of its mirror.
    let k = pose.k();
    let mut kps = Vec::with_capacity(k);
    for j in 0..k {
        let src_j = if draw.flip { pairs.mirror_of(j) } else { j };
        let kp = pose.keypoints[src_j];
        let rx = kp.x - cx;
        let ry = kp.y - cy;
        let nx = a * rx + b * ry + cx;
        let ny = cc * rx + d * ry + cy;
        let mut v = kp.v;
        if nx < 0.0 || ny < 0.0 || nx > w as f64 - 1.0 || ny > h as f64 - 1.0 {
            v = 0;
        }
        kps.push(super::Keypoint { x: nx, y: ny, v });
    }
    Ok((out, Pose::new(kps)))
}

/// Bilinear sample with zero fill outside the grid.
fn bilinear<T: Scalar>(plane: &[T], h: usize, w: usize, x: f64, y: f64) -> T {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let fetch = |yy: f64, xx: f64| -> f64 {
        if xx < 0.0 || yy < 0.0 || xx >= w as f64 || yy >= h as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize].as_f64()
        }
    };
    let v00 = fetch(y0, x0);
    let v01 = fetch(y0, x0 + 1.0);
    let v10 = fetch(y0 + 1.0, x0);
    let v11 = fetch(y0 + 1.0, x0 + 1.0);
    let top = v00 * (1.0 - fx) + v01 * fx;
    let bot = v10 * (1.0 - fx) + v11 * fx;
    T::from_f64(top * (1.0 - fy) + bot * fy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Keypoint;
    use crate::tensor::{flip_horizontal, Shape};

    fn test_image(h: usize, w: usize) -> Tensor<f64> {
        let mut rng = Rng::new(17);
        let mut img = Tensor::<f64>::zeros(Shape::new(1, 1, h, w));
        for v in img.data_mut() {
            *v = rng.uniform(0.0, 1.0);
        }
        img
    }

    fn no_pairs(k: usize) -> FlipPairs {
        FlipPairs::new(vec![], k).unwrap()
    }

    #[test]
    fn identity_draw_is_a_bitwise_no_op() {
        let img = test_image(7, 9);
        let pose = Pose::new(vec![Keypoint { x: 3.0, y: 2.5, v: 2 }]);
        let (wimg, wpose) = apply_warp(&img, &pose, &no_pairs(1), &WarpDraw::IDENTITY).unwrap();
        assert_eq!(wimg.data(), img.data());
        assert_eq!(wpose, pose);
    }

    #[test]
    fn half_turn_maps_to_opposite_corner() {
        let img = test_image(6, 8);
        let pose = Pose::new(vec![
            Keypoint { x: 1.0, y: 2.0, v: 2 },
            Keypoint { x: 0.0, y: 0.0, v: 2 },
        ]);
        let draw = WarpDraw { flip: false, rot_deg: 180.0, scale: 1.0 };
        let (wimg, wpose) = apply_warp(&img, &pose, &no_pairs(2), &draw).unwrap();
        // (x, y) -> (W-1-x, H-1-y)
        let k0 = wpose.keypoints[0];
        assert!((k0.x - 6.0).abs() < 1e-9 && (k0.y - 3.0).abs() < 1e-9);
        let k1 = wpose.keypoints[1];
        assert!((k1.x - 7.0).abs() < 1e-9 && (k1.y - 5.0).abs() < 1e-9);
        for y in 0..6 {
            for x in 0..8 {
                let expect = img.at(0, 0, 5 - y, 7 - x);
                assert!((wimg.at(0, 0, y, x) - expect).abs() < 1e-12, "({y},{x})");
            }
        }
    }

    #[test]
    fn pure_flip_matches_horizontal_mirror_and_swaps_joints() {
        let img = test_image(5, 6);
        let pose = Pose::new(vec![
            Keypoint { x: 1.0, y: 1.0, v: 2 },
            Keypoint { x: 4.0, y: 3.0, v: 1 },
            Keypoint { x: 2.0, y: 2.0, v: 2 },
        ]);
        let pairs = FlipPairs::new(vec![(0, 1)], 3).unwrap();
        let draw = WarpDraw { flip: true, rot_deg: 0.0, scale: 1.0 };
        let (wimg, wpose) = apply_warp(&img, &pose, &pairs, &draw).unwrap();
        let mirror = flip_horizontal(&img);
        for (a, b) in wimg.data().iter().zip(mirror.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // Joint 0 now holds the mirrored coordinates of old joint 1.
        let k0 = wpose.keypoints[0];
        assert!((k0.x - (5.0 - 4.0)).abs() < 1e-9 && (k0.y - 3.0).abs() < 1e-9);
        assert_eq!(k0.v, 1);
        let k1 = wpose.keypoints[1];
        assert!((k1.x - (5.0 - 1.0)).abs() < 1e-9);
        assert_eq!(k1.v, 2);
        // Unpaired joint keeps its identity, mirrored in place.
        let k2 = wpose.keypoints[2];
        assert!((k2.x - 3.0).abs() < 1e-9 && (k2.y - 2.0).abs() < 1e-9);
    }

    #[test]
    fn keypoints_pushed_outside_lose_their_label() {
        let img = test_image(8, 8);
        let pose = Pose::new(vec![
            Keypoint { x: 7.0, y: 7.0, v: 2 },
            Keypoint { x: 3.5, y: 3.5, v: 2 },
        ]);
        let draw = WarpDraw { flip: false, rot_deg: 0.0, scale: 1.3 };
        let (_, wpose) = apply_warp(&img, &pose, &no_pairs(2), &draw).unwrap();
        // The corner point moves to 3.5 + 1.3*3.5 = 8.05 > 7, off the grid.
        assert_eq!(wpose.keypoints[0].v, 0);
        // The center point does not move at all.
        assert_eq!(wpose.keypoints[1].v, 2);
        assert!((wpose.keypoints[1].x - 3.5).abs() < 1e-12);
    }

    #[test]
    fn warped_pixel_mass_tracks_the_keypoint_map() {
        // A delta at the keypoint, pushed through the image path, should
        // land (by centroid) where the coordinate path says within 0.5 px.
        for (rot, scale, flip) in [(25.0, 1.1, false), (-37.0, 0.8, true), (40.0, 1.3, false)] {
            let mut img = Tensor::<f64>::zeros(Shape::new(1, 1, 21, 21));
            let kp = Keypoint { x: 13.0, y: 7.0, v: 2 };
            img.set(0, 0, kp.y as usize, kp.x as usize, 1.0);
            let pose = Pose::new(vec![kp]);
            let draw = WarpDraw { flip, rot_deg: rot, scale };
            let (wimg, wpose) = apply_warp(&img, &pose, &no_pairs(1), &draw).unwrap();
            let (mut mx, mut my, mut mass) = (0.0, 0.0, 0.0);
            for y in 0..21 {
                for x in 0..21 {
                    let v = wimg.at(0, 0, y, x);
                    mx += v * x as f64;
                    my += v * y as f64;
                    mass += v;
                }
            }
            assert!(mass > 0.1, "mass lost for rot={rot}");
            mx /= mass;
            my /= mass;
            let wk = wpose.keypoints[0];
            let err = ((mx - wk.x).powi(2) + (my - wk.y).powi(2)).sqrt();
            assert!(err < 0.5, "rot={rot} scale={scale}: centroid off by {err}");
        }
    }

    #[test]
    fn batch_augment_is_seed_deterministic_and_in_range() {
        let mut imgs = Tensor::<f64>::zeros(Shape::new(4, 1, 10, 10));
        let mut rng = Rng::new(2);
        for v in imgs.data_mut() {
            *v = rng.uniform(0.0, 1.0);
        }
        let poses: Vec<Pose> =
            (0..4).map(|i| Pose::new(vec![Keypoint { x: 4.0 + i as f64, y: 5.0, v: 2 }])).collect();
        let params = AugmentParams::default();
        let pairs = no_pairs(1);

        let (a_img, a_pose) =
            augment(&imgs, &poses, &pairs, &params, &mut Rng::new(123)).unwrap();
        let (b_img, b_pose) =
            augment(&imgs, &poses, &pairs, &params, &mut Rng::new(123)).unwrap();
        assert_eq!(a_img.data(), b_img.data());
        assert_eq!(a_pose, b_pose);

        let mut draw_rng = Rng::new(55);
        for _ in 0..200 {
            let d = WarpDraw::sample(&params, &mut draw_rng);
            assert!(d.rot_deg >= -40.0 && d.rot_deg <= 40.0);
            assert!(d.scale >= 0.7 && d.scale <= 1.3);
        }
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        let imgs = Tensor::<f64>::zeros(Shape::new(1, 1, 4, 4));
        let poses = vec![Pose::new(vec![Keypoint { x: 1.0, y: 1.0, v: 2 }])];
        let bad = AugmentParams { flip_prob: 1.5, ..AugmentParams::default() };
        assert!(augment(&imgs, &poses, &no_pairs(1), &bad, &mut Rng::new(0)).is_err());
        let bad = AugmentParams { scale_lo: 1.4, ..AugmentParams::default() };
        assert!(augment(&imgs, &poses, &no_pairs(1), &bad, &mut Rng::new(0)).is_err());
        // Pose count must match the batch.
        let params = AugmentParams::default();
        assert!(augment(&imgs, &[], &no_pairs(1), &params, &mut Rng::new(0)).is_err());
    }
}
