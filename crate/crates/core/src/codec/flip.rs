//! Flip-averaged inference.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{flip_horizontal, Scalar, Tensor};

use super::FlipPairs;

/// Anything that maps an input batch to per-joint heatmaps. Implemented by
/// the network; tests substitute closures.
pub trait HeatmapModel<T: Scalar> {
    fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Scalar, F> HeatmapModel<T> for F
where
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self(x)
    }
}

/// Predicts heatmaps as the average of the straight pass and a horizontally
/// flipped pass.
///
/// The flipped pass mirrors the input, mirrors the predicted maps back, and
/// swaps left/right joint channels via `pairs`. With `shift` set, the
/// un-mirrored maps are additionally shifted one pixel to the right (the
/// first column is replicated) before averaging, compensating the half-pixel
/// misalignment that mirroring introduces on even-width strided backbones.
pub fn flip_average<T: Scalar, M: HeatmapModel<T>>(
    model: &M,
    x: &Tensor<T>,
    pairs: &FlipPairs,
    shift: bool,
) -> Result<Tensor<T>> {
    let straight = model.predict(x)?;
    let mirrored = model.predict(&flip_horizontal(x))?;
    if mirrored.shape() != straight.shape() {
        return shape_err(format!(
            "flipped pass produced {:?}, straight pass {:?}",
            mirrored.shape().dims(),
            straight.shape().dims()
        ));
    }
    let mut back = swap_joint_channels(&flip_horizontal(&mirrored), pairs)?;
    if shift {
        back = shift_right_one(&back);
    }

    let mut avg = straight;
    let b = back.data();
    for (o, &v) in avg.data_mut().iter_mut().zip(b.iter()) {
        *o = T::from_f64(0.5 * (o.as_f64() + v.as_f64()));
    }
    Ok(avg)
}

/// Reorders joint channels so each joint's map sits at its mirror index.
pub fn swap_joint_channels<T: Scalar>(maps: &Tensor<T>, pairs: &FlipPairs) -> Result<Tensor<T>> {
    let [n, k, h, w] = maps.shape().dims();
    for &(a, b) in pairs.pairs() {
        if a >= k || b >= k {
            return invalid(format!("flip pair ({a},{b}) out of range for {k} channels"));
        }
    }
    let plane = h * w;
    let mut out = maps.clone();
    for s in 0..n {
        for j in 0..k {
            let m = pairs.mirror_of(j);
            if m == j {
                continue;
            }
            let src = maps.offset(s, m, 0, 0);
            let dst = out.offset(s, j, 0, 0);
            let src_plane: Vec<T> = maps.data()[src..src + plane].to_vec();
            out.data_mut()[dst..dst + plane].copy_from_slice(&src_plane);
        }
    }
    Ok(out)
}

/// Shifts every map one pixel to the right, replicating the first column.
fn shift_right_one<T: Scalar>(maps: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = maps.shape().dims();
    let mut out = maps.clone();
    for s in 0..n {
        for j in 0..c {
            for y in 0..h {
                let row = maps.offset(s, j, y, 0);
                let src: Vec<T> = maps.data()[row..row + w].to_vec();
                let dst = &mut out.data_mut()[row..row + w];
                for x in (1..w).rev() {
                    dst[x] = src[x - 1];
                }
                dst[0] = src[0];
            }
        }
    }
    out
}
