//! Linear warmup / linear decay learning-rate schedule.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub total_steps: u64,
    /// Fraction of `total_steps` spent ramping linearly from 0 to `peak_lr`.
    pub warmup_fraction: f64,
}

impl LrSchedule {
    pub fn new(peak_lr: f64, total_steps: u64, warmup_fraction: f64) -> Self {
        LrSchedule {
            peak_lr,
            total_steps,
            warmup_fraction,
        }
    }

    /// Learning rate at `step`. Ramps 0 -> peak over the warmup span, then
    /// decays linearly to exactly 0 at `total_steps`. Steps past the end
    /// clamp to 0 (with a stderr warning: the trainer never does this).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return 0.0;
        }
        if step > self.total_steps {
            eprintln!(
                "warning: lr_at called with step {step} > total_steps {}; clamping to 0",
                self.total_steps
            );
            return 0.0;
        }
        let warmup_steps = (self.total_steps as f64 * self.warmup_fraction).round() as u64;
        if step < warmup_steps {
            return self.peak_lr * step as f64 / warmup_steps as f64;
        }
        if self.total_steps == warmup_steps {
            return self.peak_lr;
        }
        self.peak_lr * (self.total_steps - step) as f64 / (self.total_steps - warmup_steps) as f64
    }
}
