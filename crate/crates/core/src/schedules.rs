//! Per-step consistency-weight and learning-rate schedules.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RampShape {
    /// `exp(-5 (1 - τ)²)`
    #[default]
    Sigmoid,
    /// `τ`
    Linear,
}

impl RampShape {
    fn eval(self, tau: f64) -> f64 {
        let tau = tau.clamp(0.0, 1.0);
        match self {
            RampShape::Sigmoid => (-5.0 * (1.0 - tau) * (1.0 - tau)).exp(),
            RampShape::Linear => tau,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub consistency_max: f64,
    pub consistency_rampup_epochs: usize,
    pub lr_max: f64,
    pub lr_rampup_epochs: usize,
    pub total_epochs: usize,
    /// Filled in from the data pipeline when training starts.
    #[serde(skip)]
    pub steps_per_epoch: usize,
    pub ramp: RampShape,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.total_epochs == 0 {
            problems.push("total_epochs must be positive".to_string());
        }
        if self.consistency_rampup_epochs == 0 {
            problems.push("consistency_rampup_epochs must be positive".to_string());
        }
        if self.lr_rampup_epochs == 0 || self.lr_rampup_epochs > self.total_epochs {
            problems.push("lr_rampup_epochs must be in 1..=total_epochs".to_string());
        }
        if !(self.consistency_max >= 0.0) {
            problems.push("consistency_max must be non-negative".to_string());
        }
        if !(self.lr_max > 0.0) {
            problems.push("lr_max must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!("schedule: {}", problems.join("; "))))
        }
    }

    fn spe(&self) -> f64 {
        self.steps_per_epoch.max(1) as f64
    }

    pub fn total_steps(&self) -> u64 {
        (self.total_epochs * self.steps_per_epoch.max(1)) as u64
    }
}

/// Consistency weight w(t): ramps from `max·e⁻⁵` up to exactly `max`, then stays.
pub fn consistency_weight(t: u64, cfg: &ScheduleConfig) -> f64 {
    let ramp = cfg.consistency_rampup_epochs as f64 * cfg.spe();
    cfg.consistency_max * cfg.ramp.eval(t as f64 / ramp)
}

/// Learning rate: ramp-up to `lr_max` over `lr_rampup_epochs`, then cosine
/// annealing that reaches exactly zero at the last step `T − 1`.
pub fn learning_rate(t: u64, cfg: &ScheduleConfig) -> f64 {
    let t = t as f64;
    let t_ramp = cfg.lr_rampup_epochs as f64 * cfg.spe();
    let t_last = cfg.total_epochs as f64 * cfg.spe() - 1.0;
    if t < t_ramp {
        return cfg.lr_max * cfg.ramp.eval(t / t_ramp);
    }
    if t >= t_last {
        return 0.0;
    }
    let phase = (t - t_ramp) / (t_last - t_ramp);
    cfg.lr_max * 0.5 * (1.0 + (PI * phase).cos())
}
