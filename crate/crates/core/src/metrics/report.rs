//! Evaluation report assembly and formatting.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

use super::{ApSweep, PckhResult, MAX_DETS};

/// Full evaluation summary: the AP/AR sweep plus PCKh, emitted as JSON and
/// as an aligned text table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub ap: Vec<f64>,
    pub ap50: f64,
    pub ap75: f64,
    pub mean_ap: f64,
    /// Detection recall at the same thresholds, maxDets = 20.
    pub ar: Vec<f64>,
    pub mean_ar: f64,
    pub pckh_alpha: f64,
    pub pckh_per_joint: Vec<f64>,
    pub pckh_total: f64,
}

impl EvalReport {
    pub fn from_parts(sweep: &ApSweep, pckh: &PckhResult) -> Result<EvalReport> {
        let i50 = index_of(&sweep.thresholds, 0.50)?;
        let i75 = index_of(&sweep.thresholds, 0.75)?;
        let report = EvalReport {
            thresholds: sweep.thresholds.clone(),
            ap: sweep.ap.clone(),
            ap50: sweep.ap[i50],
            ap75: sweep.ap[i75],
            mean_ap: sweep.mean_ap(),
            ar: sweep.ar.clone(),
            mean_ar: sweep.mean_ar(),
            pckh_alpha: pckh.alpha,
            pckh_per_joint: pckh.per_joint.clone(),
            pckh_total: pckh.total,
        };
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.len() != self.ap.len() || self.thresholds.len() != self.ar.len() {
            return invalid("threshold/AP/AR lengths disagree");
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !self.ap.iter().chain(&self.ar).chain(&self.pckh_per_joint).all(|&v| unit(v))
            || !unit(self.mean_ap)
            || !unit(self.mean_ar)
            || !unit(self.ap50)
            || !unit(self.ap75)
            || !unit(self.pckh_total)
        {
            return invalid("report values must lie in [0, 1]");
        }
        let mean: f64 = self.ap.iter().sum::<f64>() / self.ap.len() as f64;
        if (mean - self.mean_ap).abs() > 1e-12 {
            return invalid("mean AP is not the mean of the per-threshold APs");
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<EvalReport> {
        let r: EvalReport = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }

    /// Aligned plain-text table. AR here is detection recall averaged over
    /// the same OKS thresholds as AP, at maxDets detections per image; the
    /// header states that convention explicitly.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "OKS sweep {:.2}:{:.2}:{:.2}, maxDets = {MAX_DETS}; \
             AR = mean detection recall over the same thresholds.\n",
            self.thresholds.first().copied().unwrap_or(0.0),
            self.thresholds.get(1).map_or(0.0, |t| t - self.thresholds[0]),
            self.thresholds.last().copied().unwrap_or(0.0),
        ));
        let mut row = |name: &str, value: f64| {
            out.push_str(&format!("{name:<14} {value:>8.4}\n"));
        };
        row("AP", self.mean_ap);
        row("AP@0.50", self.ap50);
        row("AP@0.75", self.ap75);
        row("AR", self.mean_ar);
        row(&format!("PCKh@{}", self.pckh_alpha), self.pckh_total);
        for (j, v) in self.pckh_per_joint.iter().enumerate() {
            row(&format!("  joint {j:02}"), *v);
        }
        out
    }
}

fn index_of(thresholds: &[f64], wanted: f64) -> Result<usize> {
    thresholds
        .iter()
        .position(|&t| (t - wanted).abs() < 1e-9)
        .ok_or_else(|| crate::error::Error::Validation(format!("sweep lacks threshold {wanted}")))
}
