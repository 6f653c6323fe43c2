use serde::{Deserialize, Serialize};

use super::DistillError;

/// Argument order of the softened KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(student ‖ teacher)`.
    #[default]
    StudentTeacher,
    /// `KL(teacher ‖ student)`, the classic distillation order.
    TeacherStudent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Weight on cross-entropy; the KL term gets `1 − alpha`.
    pub alpha: f64,
    pub temperature: f64,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub accumulation_steps: usize,
    pub sequence_length: usize,
    pub eval_every: usize,
    /// Cap on validation windows per evaluation; `None` uses them all.
    pub eval_windows: Option<usize>,
    pub kl_direction: KlDirection,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self::with_total_steps(2000)
    }
}

impl DistillConfig {
    /// Defaults with warmup at 5% of `total_steps`.
    pub fn with_total_steps(total_steps: usize) -> Self {
        let peak_lr = 3e-4;
        Self {
            alpha: 0.5,
            temperature: 2.0,
            peak_lr,
            warmup_steps: total_steps / 20,
            total_steps,
            min_lr: peak_lr / 10.0,
            weight_decay: 0.01,
            accumulation_steps: 16,
            sequence_length: 128,
            eval_every: 500,
            eval_windows: None,
            kl_direction: KlDirection::StudentTeacher,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), DistillError> {
        let bad = |m: String| Err(DistillError::Config(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must be in [0, 1], got {}", self.alpha));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.peak_lr >= 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.peak_lr) {
            return bad(format!("need 0 <= min_lr <= peak_lr, got {} and {}", self.min_lr, self.peak_lr));
        }
        if self.weight_decay < 0.0 {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!("warmup_steps {} exceeds total_steps {}", self.warmup_steps, self.total_steps));
        }
        if self.accumulation_steps == 0 {
            return bad("accumulation_steps must be at least 1".into());
        }
        if self.sequence_length == 0 {
            return bad("sequence_length must be positive".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        if self.eval_windows == Some(0) {
            return bad("eval_windows must be positive when set".into());
        }
        Ok(())
    }
}
