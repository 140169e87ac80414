//! Experiment plumbing: synthetic data, the training loop, and the
//! gradient-check / prediction / evaluation / ablation drivers behind the
//! CLI subcommands.

pub mod gradrun;
pub mod predict;
pub mod synth;
pub mod train;
pub mod util;

pub use gradrun::{conditioned_net, run_gradcheck, GradReport, GradScope};
pub use predict::{predict_poses, run_predict, to_prediction_entries};
pub use synth::{load_images, synth_generate, training_poses, FigureTemplate, SyntheticSpec};
pub use train::{run_train, train, EpochLog, TrainConfig, TrainReport};
pub use util::{par_map_ordered, worker_threads};

use crate::error::{invalid, Result};
use crate::net::NetworkConfig;

/// One flat config file drives a whole experiment: structure keys belong to
/// [`NetworkConfig`], run keys to [`TrainConfig`]. The two key sets are
/// disjoint, so lines can appear in any order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub net: NetworkConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// Parse the `key = value` format shared with [`NetworkConfig::parse`].
    /// Unless the file sets `milestones` itself, the schedule re-derives
    /// them from the final epoch count, so shortening a run keeps the decay
    /// shape instead of silently losing it.
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        let mut milestones_set = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                crate::error::Error::Validation(format!(
                    "config line {}: expected key = value, got {raw:?}",
                    lineno + 1
                ))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key == "milestones" {
                milestones_set = true;
            }
            match cfg.net.apply_key(key, value).or_else(|| cfg.train.apply_key(key, value)) {
                Some(r) => r?,
                None => return invalid(format!("unknown config key {key:?}")),
            }
        }
        if !milestones_set {
            cfg.train.milestones =
                crate::optim::LrSchedule::scaled(cfg.train.base_lr, cfg.train.epochs).milestones;
        }
        cfg.net.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(&std::fs::read_to_string(path)?)
    }

    /// Emits every key of both sections; `parse` round-trips it.
    pub fn serialize(&self) -> String {
        format!("{}{}", self.net.serialize(), self.train.serialize())
    }
}
