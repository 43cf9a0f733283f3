//! Temperature and penalty-weight schedules for the training loop.
//!
//! Annealed mode ramps lambda linearly from 0 over a warmup prefix and
//! decays tau geometrically over the whole run. Fixed mode applies
//! lambda_target from step 0 and never hardens (tau stays at tau_start).

use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    Annealed,
    Fixed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schedule {
    pub mode: ScheduleMode,
    pub total_steps: usize,
    /// Fraction of total_steps spent ramping lambda (annealed mode only).
    pub warmup_frac: f64,
    pub lambda_target: f64,
    pub tau_start: f64,
    pub tau_end: f64,
}

impl Schedule {
    pub fn new(
        mode: ScheduleMode,
        total_steps: usize,
        warmup_frac: f64,
        lambda_target: f64,
        tau_start: f64,
        tau_end: f64,
    ) -> Result<Self> {
        if total_steps == 0 {
            return Err(CoreError::InvalidArg(
                "schedule needs total_steps >= 1".into(),
            ));
        }
        if !(warmup_frac > 0.0 && warmup_frac < 1.0) {
            return Err(CoreError::InvalidArg(format!(
                "warmup_frac {warmup_frac} must lie in (0, 1)"
            )));
        }
        if lambda_target < 0.0 {
            return Err(CoreError::InvalidArg(format!(
                "lambda_target {lambda_target} must be >= 0"
            )));
        }
        if !(tau_end > 0.0) || tau_start < tau_end {
            return Err(CoreError::InvalidArg(format!(
                "tau schedule needs tau_start >= tau_end > 0, got {tau_start} -> {tau_end}"
            )));
        }
        Ok(Schedule {
            mode,
            total_steps,
            warmup_frac,
            lambda_target,
            tau_start,
            tau_end,
        })
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.total_steps {
            return Err(CoreError::InvalidArg(format!(
                "step {t} beyond schedule horizon {}",
                self.total_steps
            )));
        }
        Ok(())
    }

    /// Penalty weight at step t. Annealed: linear 0 -> lambda_target over
    /// the warmup prefix, flat after. Fixed: lambda_target throughout.
    pub fn lambda_at(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        match self.mode {
            ScheduleMode::Fixed => Ok(self.lambda_target),
            ScheduleMode::Annealed => {
                let warmup = self.warmup_frac * self.total_steps as f64;
                let t = t as f64;
                if t < warmup {
                    Ok(self.lambda_target * t / warmup)
                } else {
                    Ok(self.lambda_target)
                }
            }
        }
    }

    /// Temperature at step t. Annealed: geometric interpolation with exact
    /// endpoints. Fixed: tau_start throughout.
    pub fn tau_at(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        match self.mode {
            ScheduleMode::Fixed => Ok(self.tau_start),
            ScheduleMode::Annealed => {
                if t == 0 {
                    return Ok(self.tau_start);
                }
                if t == self.total_steps {
                    return Ok(self.tau_end);
                }
                let frac = t as f64 / self.total_steps as f64;
                Ok(self.tau_start * (self.tau_end / self.tau_start).powf(frac))
            }
        }
    }
}
