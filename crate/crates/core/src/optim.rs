//! Adam optimizer and the milestone learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{invalid, Result};
use crate::layers::{Gradients, HasParams};
use crate::tensor::{Scalar, Tensor};

/// Adam with bias correction. Moment buffers are created lazily per
/// parameter name on the first step that carries a gradient for it, and
/// updates iterate in sorted name order, so stepping is deterministic.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps taken so far (the bias-correction exponent).
    t: u64,
    m: BTreeMap<String, Tensor<f64>>,
    v: BTreeMap<String, Tensor<f64>>,
}

impl Adam {
    pub fn new() -> Adam {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update over every parameter that has a gradient. Parameters
    /// without a gradient entry are left untouched (their moments do not
    /// advance either). Gradient names with no matching parameter are an
    /// error: they indicate a wiring bug.
    pub fn step<T: Scalar>(
        &mut self,
        model: &mut impl HasParams<T>,
        grads: &Gradients<T>,
        lr: f64,
    ) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return invalid(format!("bad learning rate {lr}"));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);

        let mut seen = 0usize;
        let (beta1, beta2, eps) = (self.beta1, self.beta2, self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut fail: Option<String> = None;
        model.visit_params_mut("", &mut |name, p| {
            let Some(g) = grads.get(name) else { return };
            seen += 1;
            if g.shape() != p.shape() {
                fail = Some(format!(
                    "gradient {name} has shape {:?}, parameter {:?}",
                    g.shape().dims(),
                    p.shape().dims()
                ));
                return;
            }
            let mslot =
                m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
            let vslot =
                v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
            let gd = g.data();
            let pd = p.data_mut();
            for i in 0..gd.len() {
                let gi = gd[i].as_f64();
                let mi = beta1 * mslot.data()[i] + (1.0 - beta1) * gi;
                let vi = beta2 * vslot.data()[i] + (1.0 - beta2) * gi * gi;
                mslot.data_mut()[i] = mi;
                vslot.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                pd[i] = T::from_f64(pd[i].as_f64() - lr * mhat / (vhat.sqrt() + eps));
            }
        });
        if let Some(msg) = fail {
            return crate::error::shape_err(msg);
        }
        if seen != grads.len() {
            return invalid(format!(
                "{} gradient entries but only {seen} matched a parameter",
                grads.len()
            ));
        }
        Ok(())
    }
}

impl Default for Adam {
    fn default() -> Adam {
        Adam::new()
    }
}

/// Step-decay schedule: `base_lr` multiplied by 0.1 for every milestone
/// epoch at or below the current epoch.
#[derive(Debug, Clone)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    /// Milestones at 60% and 80% of the run, the same proportions as a
    /// 90/120-of-150 plan.
    pub fn scaled(base_lr: f64, epochs: usize) -> LrSchedule {
        let m1 = epochs * 60 / 100;
        let m2 = epochs * 80 / 100;
        let mut milestones = vec![];
        if m1 > 0 {
            milestones.push(m1);
        }
        if m2 > m1 {
            milestones.push(m2);
        }
        LrSchedule { base_lr, milestones, factor: 0.1 }
    }

    pub fn validate(&self, epochs: usize) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return invalid(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !self.milestones.windows(2).all(|w| w[0] < w[1]) {
            return invalid("milestones must be strictly increasing");
        }
        if let Some(&last) = self.milestones.last() {
            if last >= epochs {
                return invalid(format!("milestone {last} is not below epochs {epochs}"));
            }
        }
        Ok(())
    }

    /// Learning rate for a zero-based epoch index. The drop applies from
    /// the milestone epoch onward.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base_lr * self.factor.powi(drops as i32)
    }
}
