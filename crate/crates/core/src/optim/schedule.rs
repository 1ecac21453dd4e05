use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScheduleKind {
    Constant,
    WarmupCosine,
    LinearDecay,
}

/// Learning-rate schedule evaluated per optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub peak_lr: f64,
    #[serde(default)]
    pub warmup_frac: f64,
    #[serde(default)]
    pub total_steps: u64,
    #[serde(default)]
    pub end_lr: f64,
}

impl Schedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            peak_lr: lr,
            warmup_frac: 0.0,
            total_steps: 0,
            end_lr: 0.0,
        }
    }

    pub fn warmup_cosine(peak_lr: f64, warmup_frac: f64, total_steps: u64) -> Self {
        Self {
            kind: ScheduleKind::WarmupCosine,
            peak_lr,
            warmup_frac,
            total_steps,
            end_lr: 0.0,
        }
    }

    pub fn linear_decay(peak_lr: f64, total_steps: u64) -> Self {
        Self {
            kind: ScheduleKind::LinearDecay,
            peak_lr,
            warmup_frac: 0.0,
            total_steps,
            end_lr: 0.0,
        }
    }

    /// Same shape with a different peak.
    pub fn with_peak(&self, peak_lr: f64) -> Self {
        Self {
            peak_lr,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!("warmup_frac {} not in [0, 1)", self.warmup_frac)));
        }
        if !(self.peak_lr >= 0.0 && self.end_lr >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if self.kind != ScheduleKind::Constant && self.total_steps == 0 {
            return Err(Error::Config("decaying schedules need total_steps > 0".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_frac * self.total_steps as f64).floor() as u64
    }

    /// Learning rate at step `t`. Steps past `total_steps` hold the final value.
    pub fn value(&self, t: u64) -> f64 {
        match self.kind {
            ScheduleKind::Constant => self.peak_lr,
            ScheduleKind::LinearDecay => {
                let total = self.total_steps.max(1);
                let frac = (t.min(total) as f64) / total as f64;
                self.peak_lr + (self.end_lr - self.peak_lr) * frac
            }
            ScheduleKind::WarmupCosine => {
                let warm = self.warmup_steps();
                if t < warm {
                    return self.peak_lr * t as f64 / warm as f64;
                }
                let span = self.total_steps.saturating_sub(warm).max(1);
                let frac = ((t - warm).min(span)) as f64 / span as f64;
                let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
                self.end_lr + (self.peak_lr - self.end_lr) * cos
            }
        }
    }
}
