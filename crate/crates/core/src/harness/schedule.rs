use crate::error::{MattingError, Result};

/// Linear warm-up from 0 to `base_lr` over `warmup_steps`, then cosine
/// decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, base_lr: f64, warmup_steps: usize) -> Result<f64> {
    if step > total_steps {
        return Err(MattingError::Domain(format!(
            "step {step} past the end of a {total_steps}-step schedule"
        )));
    }
    if warmup_steps > total_steps {
        return Err(MattingError::Domain(format!(
            "warm-up of {warmup_steps} steps exceeds the {total_steps}-step schedule"
        )));
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    let decay = total_steps - warmup_steps;
    if decay == 0 {
        return Ok(base_lr);
    }
    let t = (step - warmup_steps) as f64 / decay as f64;
    Ok(0.5 * base_lr * (1.0 + (std::f64::consts::PI * t).cos()))
}
