//! Step-indexed schedules for learning rate, contrastive temperature and
//! contrastive loss weight. All three are pure functions of `(spec, step)`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Fraction of steps during which lambda is held at its start value.
const LAMBDA_HOLD_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LambdaShape {
    /// Hold, linear ramp to the end value, hold.
    #[default]
    Ramp,
    /// Hold, rise to the end value at the ramp fraction, fall back to the
    /// start value by 90% of training, hold.
    Triangular,
}

impl fmt::Display for LambdaShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LambdaShape::Ramp => "ramp",
            LambdaShape::Triangular => "triangular",
        })
    }
}

impl FromStr for LambdaShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ramp" => Ok(LambdaShape::Ramp),
            "triangular" => Ok(LambdaShape::Triangular),
            other => Err(Error::config(format!("unknown lambda shape '{other}' (ramp|triangular)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleSpec {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub lr_base: f64,
    pub lr_final: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub lambda_start: f64,
    pub lambda_end: f64,
    /// Fraction of training at which lambda reaches `lambda_end`.
    pub lambda_warmup_fraction: f64,
    pub lambda_shape: LambdaShape,
}

impl ScheduleSpec {
    pub fn new(total_steps: usize, warmup_steps: usize) -> Self {
        Self {
            total_steps,
            warmup_steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.lr_base >= self.lr_final && self.lr_final >= 0.0) {
            return Err(Error::config("need lr_base >= lr_final >= 0"));
        }
        if !(self.tau_start >= self.tau_end && self.tau_end > 0.0) {
            return Err(Error::config("need tau_start >= tau_end > 0"));
        }
        if !(self.lambda_start >= 0.0 && self.lambda_end >= 0.0) {
            return Err(Error::config("lambda values must be non-negative"));
        }
        if !(self.lambda_warmup_fraction > 0.0 && self.lambda_warmup_fraction <= 1.0) {
            return Err(Error::config("lambda_warmup_fraction must be in (0, 1]"));
        }
        Ok(())
    }

    fn check_step(&self, step: usize) -> Result<()> {
        if step > self.total_steps {
            return Err(Error::config(format!(
                "step {step} outside schedule range [0, {}]",
                self.total_steps
            )));
        }
        Ok(())
    }
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            total_steps: 100,
            warmup_steps: 10,
            lr_base: 1e-3,
            lr_final: 1e-6,
            tau_start: 0.2,
            tau_end: 0.07,
            lambda_start: 0.05,
            lambda_end: 0.3,
            lambda_warmup_fraction: 0.5,
            lambda_shape: LambdaShape::Ramp,
        }
    }
}

/// Cosine interpolation from `start` (progress 0) to `end` (progress 1),
/// returning the endpoints exactly.
fn cosine(start: f64, end: f64, progress: f64) -> f64 {
    if progress <= 0.0 {
        start
    } else if progress >= 1.0 {
        end
    } else {
        end + 0.5 * (start - end) * (1.0 + (PI * progress).cos())
    }
}

/// Linear warmup from 0 to `lr_base`, then cosine decay to `lr_final`.
pub fn lr_at(spec: &ScheduleSpec, step: usize) -> Result<f64> {
    spec.check_step(step)?;
    let w = spec.warmup_steps;
    if w > 0 && step <= w {
        return Ok(spec.lr_base * (step as f64 / w as f64));
    }
    let progress = (step - w) as f64 / (spec.total_steps - w) as f64;
    Ok(cosine(spec.lr_base, spec.lr_final, progress))
}

/// Cosine decay from `tau_start` to `tau_end` over the whole run.
pub fn tau_at(spec: &ScheduleSpec, step: usize) -> Result<f64> {
    spec.check_step(step)?;
    Ok(cosine(spec.tau_start, spec.tau_end, step as f64 / spec.total_steps as f64))
}

fn ramp(from: f64, to: f64, x: f64, x0: f64, x1: f64) -> f64 {
    if x <= x0 {
        from
    } else if x >= x1 {
        to
    } else {
        from + (to - from) * (x - x0) / (x1 - x0)
    }
}

pub fn lambda_at(spec: &ScheduleSpec, step: usize) -> Result<f64> {
    spec.check_step(step)?;
    let total = spec.total_steps as f64;
    let x = step as f64;
    let hold = LAMBDA_HOLD_FRACTION * total;
    let peak = (spec.lambda_warmup_fraction * total).max(hold);
    Ok(match spec.lambda_shape {
        LambdaShape::Ramp => ramp(spec.lambda_start, spec.lambda_end, x, hold, peak),
        LambdaShape::Triangular => {
            if x <= peak {
                ramp(spec.lambda_start, spec.lambda_end, x, hold, peak)
            } else {
                let fall_end = (0.9 * total).max(peak);
                ramp(spec.lambda_end, spec.lambda_start, x, peak, fall_end)
            }
        }
    })
}
