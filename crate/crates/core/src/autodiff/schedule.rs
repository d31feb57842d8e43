use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Triangular cyclical learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CyclicalLrSchedule {
    pub lr_min: f64,
    pub lr_max: f64,
    pub cycle_steps: usize,
}

impl Default for CyclicalLrSchedule {
    fn default() -> Self {
        Self {
            lr_min: 1e-4,
            lr_max: 1e-1,
            cycle_steps: 2000,
        }
    }
}

impl CyclicalLrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max) {
            return Err(Error::Argument(format!(
                "need 0 < lr_min < lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.cycle_steps < 2 {
            return Err(Error::Argument("cycle_steps must be at least 2".into()));
        }
        Ok(())
    }

    /// Rises linearly from `lr_min` to `lr_max` over the first half of each
    /// cycle and falls back over the second half.
    pub fn lr_at(&self, step: usize) -> f64 {
        let cycle = self.cycle_steps as f64;
        let half = cycle / 2.0;
        let pos = (step % self.cycle_steps) as f64;
        let frac = if pos <= half { pos / half } else { (cycle - pos) / half };
        (self.lr_min + (self.lr_max - self.lr_min) * frac).clamp(self.lr_min, self.lr_max)
    }
}
