//! The training loop: augment, forward, hard-keypoint loss, backward, Adam.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{
    augment, ohkm_mse, ohkm_mse_in_domain, render_targets, AugmentParams, CompareDomain, Dataset,
    FlipPairs, Keypoint, Pose,
};
use crate::error::{invalid, Error, Result};
use crate::layers::{BnMode, Gradients};
use crate::net::config::{parse_bool, parse_f64, parse_usize};
use crate::net::{checkpoint, Network};
use crate::optim::{Adam, LrSchedule};
use crate::tensor::{Rng, Scalar, Shape, Tensor};

use super::synth::{load_images, training_poses};
use super::ExperimentConfig;

/// Run hyperparameters. Model structure lives in
/// [`crate::net::NetworkConfig`]; this is everything else a run needs to be
/// reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Epochs at which the learning rate drops by 10x. Strictly increasing
    /// and all below `epochs`.
    pub milestones: Vec<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    /// How many hardest joints the mining loss keeps per sample.
    pub r_ohkm: usize,
    pub seed: u64,
    pub input_h: usize,
    pub input_w: usize,
    /// Target blob sigma, heatmap px.
    pub sigma: f64,
    /// Random flip/rotation/scale on every batch.
    pub augment: bool,
    /// Domain in which predicted and target maps are compared.
    pub domain: CompareDomain,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let epochs = 20;
        TrainConfig {
            base_lr: 5e-4,
            milestones: LrSchedule::scaled(5e-4, epochs).milestones,
            batch_size: 8,
            epochs,
            r_ohkm: 8,
            seed: 0,
            input_h: 64,
            input_w: 48,
            sigma: 1.0,
            augment: true,
            domain: CompareDomain::Peak,
        }
    }
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| Error::Validation(format!("{key}: bad seed {v:?}")))
}

fn parse_milestones(v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(vec![]);
    }
    crate::net::config::parse_list("milestones", v)
}

impl TrainConfig {
    /// Apply one `key = value` pair; `None` when the key is not a run key.
    pub fn apply_key(&mut self, key: &str, value: &str) -> Option<Result<()>> {
        let r = match key {
            "base_lr" => parse_f64(key, value).map(|v| self.base_lr = v),
            "milestones" => parse_milestones(value).map(|v| self.milestones = v),
            "batch_size" => parse_usize(key, value).map(|v| self.batch_size = v),
            "epochs" => parse_usize(key, value).map(|v| self.epochs = v),
            "R" | "r_ohkm" => parse_usize(key, value).map(|v| self.r_ohkm = v),
            "seed" => parse_u64(key, value).map(|v| self.seed = v),
            "input_h" => parse_usize(key, value).map(|v| self.input_h = v),
            "input_w" => parse_usize(key, value).map(|v| self.input_w = v),
            "sigma" => parse_f64(key, value).map(|v| self.sigma = v),
            "augment" => parse_bool(key, value).map(|v| self.augment = v),
            "compare_domain" => CompareDomain::parse(value).map(|v| self.domain = v),
            _ => return None,
        };
        Some(r)
    }

    /// Inverse of the key parser: emits every run key.
    pub fn serialize(&self) -> String {
        let ms: Vec<String> = self.milestones.iter().map(|m| m.to_string()).collect();
        let mut out = String::new();
        out.push_str(&format!("base_lr = {}\n", self.base_lr));
        out.push_str(&format!("milestones = {}\n", ms.join(",")));
        out.push_str(&format!("batch_size = {}\n", self.batch_size));
        out.push_str(&format!("epochs = {}\n", self.epochs));
        out.push_str(&format!("R = {}\n", self.r_ohkm));
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!("input_h = {}\n", self.input_h));
        out.push_str(&format!("input_w = {}\n", self.input_w));
        out.push_str(&format!("sigma = {}\n", self.sigma));
        out.push_str(&format!("augment = {}\n", self.augment));
        out.push_str(&format!("compare_domain = {}\n", self.domain.name()));
        out
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule { base_lr: self.base_lr, milestones: self.milestones.clone(), factor: 0.1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return invalid("batch_size and epochs must be positive");
        }
        if self.r_ohkm == 0 {
            return invalid("R must be at least 1");
        }
        if self.input_h == 0 || self.input_w == 0 {
            return invalid("input size must be positive");
        }
        if !(self.sigma > 0.0) {
            return invalid(format!("sigma must be positive, got {}", self.sigma));
        }
        self.schedule().validate(self.epochs)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub heat_loss: f64,
    pub aux_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub steps: u64,
    pub final_loss: f64,
}

fn batch_slice<T: Scalar>(
    images: &Tensor<T>,
    poses: &[Pose],
    start: usize,
    len: usize,
) -> (Tensor<T>, Vec<Pose>) {
    let [_, c, h, w] = images.shape().dims();
    let plane = c * h * w;
    let mut out = Tensor::zeros(Shape::new(len, c, h, w));
    out.data_mut().copy_from_slice(&images.data()[start * plane..(start + len) * plane]);
    (out, poses[start..start + len].to_vec())
}

/// Map annotation coordinates into heatmap pixels when the head's output
/// resolution differs from the input's.
fn scale_poses(poses: &[Pose], rx: f64, ry: f64) -> Vec<Pose> {
    if rx == 1.0 && ry == 1.0 {
        return poses.to_vec();
    }
    poses
        .iter()
        .map(|p| {
            Pose::new(
                p.keypoints
                    .iter()
                    .map(|kp| Keypoint { x: kp.x * rx, y: kp.y * ry, v: kp.v })
                    .collect(),
            )
        })
        .collect()
}

/// Run the loop on an in-memory dataset. `sink` receives each epoch's log
/// line as it completes, so callers can stream JSON lines to disk. Batches
/// walk the dataset in manifest order; all randomness (augmentation draws)
/// comes from the config seed. Aborts with a numerical error naming the
/// step as soon as the loss stops being finite.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    cfg: &TrainConfig,
    images: &Tensor<T>,
    poses: &[Pose],
    pairs: &FlipPairs,
    mut sink: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let [n, _, h, w] = images.shape().dims();
    if n == 0 {
        return invalid("training needs a non-empty dataset");
    }
    if poses.len() != n {
        return invalid(format!("{} poses for {n} images", poses.len()));
    }
    if (h, w) != (cfg.input_h, cfg.input_w) {
        return invalid(format!(
            "images are {h}x{w} but the config says {}x{}",
            cfg.input_h, cfg.input_w
        ));
    }
    let k = net.config.k;
    if poses.iter().any(|p| p.k() != k) {
        return invalid(format!("pose keypoint count does not match the model's K = {k}"));
    }

    let schedule = cfg.schedule();
    let mut adam = Adam::new();
    let mut rng = Rng::new(cfg.seed);
    let aug = AugmentParams::default();
    let lambda = net.config.aux_weight;
    net.set_bn_mode(BnMode::Train);

    let mut logs: Vec<EpochLog> = Vec::with_capacity(cfg.epochs);
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at(epoch);
        let (mut tot, mut th, mut ta) = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        let mut start = 0usize;
        while start < n {
            let len = cfg.batch_size.min(n - start);
            let (bx, bp) = batch_slice(images, poses, start, len);
            let (bx, bp) =
                if cfg.augment { augment(&bx, &bp, pairs, &aug, &mut rng)? } else { (bx, bp) };
            let (art, tape) = net.forward_train(&bx)?;
            let [_, _, hh, hw] = art.heatmaps.shape().dims();
            let scaled = scale_poses(&bp, hw as f64 / w as f64, hh as f64 / h as f64);
            let (targets, mask) = render_targets::<T>(&scaled, k, hh, hw, cfg.sigma)?;
            let heat =
                ohkm_mse_in_domain(&art.heatmaps, &targets.maps, &mask, cfg.r_ohkm, cfg.domain)?;
            let (aux_val, aux_grad) = match &art.aux_heatmaps {
                // Plain masked MSE on the auxiliary maps: keeping every
                // joint (R = K) is exactly the unmined mean.
                Some(am) => {
                    let l = ohkm_mse(am, &targets.maps, &mask, k)?;
                    (l.value, Some(l.grad.scale(T::from_f64(lambda))))
                }
                None => (0.0, None),
            };
            let total = heat.value + lambda * aux_val;
            step += 1;
            if !total.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss became non-finite at step {step} (epoch {epoch})"
                )));
            }
            let mut grads = Gradients::new();
            net.backward(&tape, &heat.grad, aux_grad.as_ref(), &mut grads)?;
            adam.step(net, &grads, lr)?;
            tot += total;
            th += heat.value;
            ta += aux_val;
            batches += 1;
            start += len;
        }
        let b = batches as f64;
        let line = EpochLog { epoch, lr, loss: tot / b, heat_loss: th / b, aux_loss: ta / b };
        sink(&line)?;
        logs.push(line);
    }
    net.set_bn_mode(BnMode::Eval);
    let final_loss = logs.last().map(|l| l.loss).unwrap_or(f64::NAN);
    Ok(TrainReport { epochs: logs, steps: step, final_loss })
}

/// Train from a data directory and leave a complete experiment behind:
/// `config.txt`, `log.jsonl`, and a `checkpoint/` directory under `out`.
pub fn run_train<T: Scalar>(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    out_dir: &Path,
) -> Result<(Network<T>, TrainReport)> {
    let ds = Dataset::load(&data_dir.join("dataset.json"))?;
    if ds.meta.k != cfg.net.k {
        return invalid(format!(
            "dataset has K = {} keypoints but the model config says {}",
            ds.meta.k, cfg.net.k
        ));
    }
    let images = load_images::<T>(data_dir, &ds)?;
    let poses = training_poses(&ds)?;
    let pairs = ds.meta.flip_pairs()?;
    let mut rng = Rng::new(cfg.train.seed);
    let mut net: Network<T> = Network::new(cfg.net.clone(), &mut rng)?;

    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.txt"), cfg.serialize())?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(out_dir.join("log.jsonl"))?);
    let report = train(&mut net, &cfg.train, &images, &poses, &pairs, |line| {
        serde_json::to_writer(&mut log, line)?;
        log.write_all(b"\n")?;
        Ok(())
    })?;
    log.flush()?;
    checkpoint::save_checkpoint(&out_dir.join("checkpoint"), &net)?;
    Ok((net, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::HasParams;
    use crate::net::{HeadKind, NetworkConfig};

    fn tiny_net_config(k: usize, head: HeadKind) -> NetworkConfig {
        let mut cfg = NetworkConfig::tiny();
        cfg.stage_widths = vec![4, 8];
        cfg.k = k;
        cfg.head = head;
        cfg.sbn_filters = 8;
        cfg
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            milestones: vec![],
            batch_size: 2,
            input_h: 16,
            input_w: 12,
            r_ohkm: 2,
            augment: false,
            ..TrainConfig::default()
        }
    }

    /// Random interior poses plus matching random images.
    fn fixture(n: usize, k: usize, seed: u64) -> (Tensor<f64>, Vec<Pose>, FlipPairs) {
        let mut rng = Rng::new(seed);
        let mut images = Tensor::zeros(Shape::new(n, 1, 16, 12));
        for v in images.data_mut() {
            *v = rng.uniform(0.0, 1.0);
        }
        let poses = (0..n)
            .map(|_| {
                Pose::new(
                    (0..k)
                        .map(|_| Keypoint {
                            x: rng.uniform(2.0, 9.0),
                            y: rng.uniform(2.0, 13.0),
                            v: 2,
                        })
                        .collect(),
                )
            })
            .collect();
        (images, poses, FlipPairs::new(vec![(1, 2)], k).unwrap())
    }

    #[test]
    fn one_step_descends_on_a_single_sample() {
        let (images, poses, pairs) = fixture(1, 3, 5);
        let mut rng = Rng::new(7);
        let mut net: Network<f64> =
            Network::new(tiny_net_config(3, HeadKind::Duc), &mut rng).unwrap();
        let mut cfg = tiny_train_config();
        cfg.batch_size = 1;
        cfg.base_lr = 1e-4;
        // Epoch 0 logs the pre-step loss of the only batch; epoch 1 sees the
        // same batch after one Adam step.
        let report = train(&mut net, &cfg, &images, &poses, &pairs, |_| Ok(())).unwrap();
        assert_eq!(report.steps, 2);
        assert!(
            report.epochs[1].loss < report.epochs[0].loss,
            "loss went {} -> {}",
            report.epochs[0].loss,
            report.epochs[1].loss
        );
    }

    #[test]
    fn same_seed_reproduces_the_loss_curve_exactly() {
        let (images, poses, pairs) = fixture(4, 3, 11);
        let mut cfg = tiny_train_config();
        cfg.augment = true;
        let run = || {
            let mut rng = Rng::new(3);
            let mut net: Network<f64> =
                Network::new(tiny_net_config(3, HeadKind::Duc), &mut rng).unwrap();
            train(&mut net, &cfg, &images, &poses, &pairs, |_| Ok(())).unwrap().epochs
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn learning_rate_drops_tenfold_from_each_milestone() {
        let (images, poses, pairs) = fixture(1, 3, 2);
        let mut rng = Rng::new(1);
        let mut net: Network<f64> =
            Network::new(tiny_net_config(3, HeadKind::Duc), &mut rng).unwrap();
        let mut cfg = tiny_train_config();
        cfg.batch_size = 1;
        cfg.epochs = 5;
        cfg.milestones = vec![2, 4];
        let report = train(&mut net, &cfg, &images, &poses, &pairs, |_| Ok(())).unwrap();
        let lrs: Vec<f64> = report.epochs.iter().map(|l| l.lr).collect();
        let base = cfg.base_lr;
        for (epoch, want) in
            [(0, base), (1, base), (2, base * 0.1), (3, base * 0.1), (4, base * 0.01)]
        {
            let got = lrs[epoch];
            assert!(
                (got - want).abs() <= want * 1e-12,
                "epoch {epoch}: lr {got} instead of {want}"
            );
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_the_step_index() {
        let (images, poses, pairs) = fixture(1, 3, 9);
        let mut rng = Rng::new(4);
        let netcfg = tiny_net_config(3, HeadKind::SbnDeconv);
        let mut net: Network<f64> = Network::new(netcfg, &mut rng).unwrap();
        // The main loss compares normalized maps, so scale cannot blow it
        // up. The auxiliary loss squares raw residuals: a 1e180 projection
        // keeps every activation finite but overflows the loss to infinity.
        net.visit_params_mut("", &mut |name, t| {
            if name == "aux.weight" {
                for v in t.data_mut() {
                    *v = 1e180;
                }
            }
        });
        let mut cfg = tiny_train_config();
        cfg.batch_size = 1;
        let err = train(&mut net, &cfg, &images, &poses, &pairs, |_| Ok(()))
            .expect_err("divergence should abort");
        assert!(matches!(err, Error::Numerical(_)), "got {err:?}");
        assert!(err.to_string().contains("step 1"), "message was {err}");
    }

    #[test]
    fn shape_and_count_mismatches_are_rejected() {
        let (images, poses, pairs) = fixture(2, 3, 6);
        let mut rng = Rng::new(2);
        let mut net: Network<f64> =
            Network::new(tiny_net_config(3, HeadKind::Duc), &mut rng).unwrap();
        let cfg = tiny_train_config();
        assert!(train(&mut net, &cfg, &images, &poses[..1], &pairs, |_| Ok(())).is_err());
        let mut wrong = cfg.clone();
        wrong.input_h = 32;
        assert!(train(&mut net, &wrong, &images, &poses, &pairs, |_| Ok(())).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_milestones_and_r() {
        let mut cfg = TrainConfig::default();
        cfg.milestones = vec![5, 5];
        cfg.epochs = 10;
        assert!(cfg.validate().is_err(), "milestones must increase strictly");
        cfg.milestones = vec![10];
        assert!(cfg.validate().is_err(), "milestones must stay below epochs");
        cfg = TrainConfig::default();
        cfg.r_ohkm = 0;
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
