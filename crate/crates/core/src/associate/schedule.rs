use std::f64::consts::PI;

use super::{AssociateError, TrainConfig};

/// Linear warmup from 0 to `peak_lr` over `warmup_steps`, then cosine decay
/// to 0 at `total_steps`.
pub fn lr_at_step(step: usize, config: &TrainConfig, total_steps: usize) -> Result<f64, AssociateError> {
    let warmup = config.warmup_steps;
    if total_steps <= warmup {
        return Err(AssociateError::Schedule(format!(
            "total steps {total_steps} must exceed warmup steps {warmup}"
        )));
    }
    if step > total_steps {
        return Err(AssociateError::Schedule(format!("step {step} is past total steps {total_steps}")));
    }
    let peak = config.peak_lr;
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(peak * 0.5 * (1.0 + (PI * progress).cos()))
}
