//! Inference driver behind the `predict` subcommand: run the network over a
//! dataset, decode heatmaps to coordinates, and dump prediction JSON.

use std::path::Path;

use crate::codec::{
    decode_heatmaps, flip_average, save_predictions, Dataset, DecodedJoint, FlipPairs,
    PredictionEntry,
};
use crate::error::{invalid, Result};
use crate::layers::BnMode;
use crate::net::{load_checkpoint, load_into, Network, NetworkConfig};
use crate::tensor::{Rng, Scalar, Shape, Tensor};

use super::synth::load_images;
use super::util::{par_map_ordered, worker_threads};

fn one_image<T: Scalar>(images: &Tensor<T>, i: usize) -> Tensor<T> {
    let [_, c, h, w] = images.shape().dims();
    let plane = c * h * w;
    let mut out = Tensor::zeros(Shape::new(1, c, h, w));
    out.data_mut().copy_from_slice(&images.data()[i * plane..(i + 1) * plane]);
    out
}

/// Decode every image's pose at input resolution. Images are processed
/// independently across `workers` threads; results stay in input order.
/// With `flip` set, heatmaps are averaged with a mirrored second pass.
pub fn predict_poses<T: Scalar>(
    net: &Network<T>,
    images: &Tensor<T>,
    pairs: &FlipPairs,
    flip: bool,
    workers: usize,
) -> Result<Vec<Vec<DecodedJoint>>> {
    let [n, _, h, w] = images.shape().dims();
    let slices: Vec<Tensor<T>> = (0..n).map(|i| one_image(images, i)).collect();
    par_map_ordered(&slices, workers, |_, img| {
        let maps = if flip {
            flip_average(&|x: &Tensor<T>| Ok(net.forward_eval(x)?.heatmaps), img, pairs, false)?
        } else {
            net.forward_eval(img)?.heatmaps
        };
        let [_, _, mh, mw] = maps.shape().dims();
        // Decoded coordinates live in heatmap pixels; training scaled
        // annotations by (heatmap / input), so inference inverts that.
        let (rx, ry) = (w as f64 / mw as f64, h as f64 / mh as f64);
        let mut joints = decode_heatmaps(&maps)?.remove(0);
        for j in &mut joints {
            j.x = (j.x * rx).min(w as f64 - 1.0);
            j.y = (j.y * ry).min(h as f64 - 1.0);
        }
        Ok(joints)
    })
}

/// Pack decoded joints into the prediction dump schema. The instance score
/// is the mean joint confidence.
pub fn to_prediction_entries(
    image_ids: &[u64],
    decoded: &[Vec<DecodedJoint>],
) -> Result<Vec<PredictionEntry>> {
    if image_ids.len() != decoded.len() {
        return invalid(format!(
            "{} image ids for {} decoded poses",
            image_ids.len(),
            decoded.len()
        ));
    }
    let mut out = Vec::with_capacity(decoded.len());
    for (&id, joints) in image_ids.iter().zip(decoded) {
        if joints.is_empty() {
            return invalid(format!("image {id} decoded to zero joints"));
        }
        let mut keypoints = Vec::with_capacity(3 * joints.len());
        let mut score = 0.0;
        for j in joints {
            keypoints.extend_from_slice(&[j.x, j.y, j.confidence]);
            score += j.confidence;
        }
        out.push(PredictionEntry { image_id: id, keypoints, score: score / joints.len() as f64 });
    }
    Ok(out)
}

/// Load a checkpoint, run it over `data_dir`'s dataset, and optionally
/// write the prediction JSON to `out`.
///
/// With an explicit `config`, the network is built from it and the
/// checkpoint tensors are loaded into that structure, so any disagreement
/// surfaces as a shape diff. Without one, the checkpoint's embedded config
/// defines the structure.
pub fn run_predict<T: Scalar>(
    checkpoint: &Path,
    config: Option<&NetworkConfig>,
    data_dir: &Path,
    out: Option<&Path>,
    flip: bool,
) -> Result<Vec<PredictionEntry>> {
    let mut net: Network<T> = match config {
        Some(cfg) => {
            let mut net = Network::new(cfg.clone(), &mut Rng::new(0))?;
            load_into(checkpoint, &mut net)?;
            net
        }
        None => load_checkpoint(checkpoint)?,
    };
    net.set_bn_mode(BnMode::Eval);
    let ds = Dataset::load(&data_dir.join("dataset.json"))?;
    if ds.meta.k != net.config.k {
        return invalid(format!(
            "dataset has K = {} joints but the checkpoint predicts {}",
            ds.meta.k, net.config.k
        ));
    }
    let images = load_images::<T>(data_dir, &ds)?;
    let pairs = ds.meta.flip_pairs()?;
    let workers = worker_threads()?;
    let decoded = predict_poses(&net, &images, &pairs, flip, workers)?;
    let ids: Vec<u64> = ds.images.iter().map(|im| im.id).collect();
    let entries = to_prediction_entries(&ids, &decoded)?;
    if let Some(path) = out {
        save_predictions(path, &entries)?;
    }
    Ok(entries)
}
