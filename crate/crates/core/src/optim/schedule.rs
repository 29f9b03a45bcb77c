/// Warmup-stable-decay learning-rate schedule, in optimizer steps.
///
/// Linear warmup from 0 to the peak over `warmup_steps`, constant for
/// `stable_steps`, then `peak · (1 − √u)` with `u` running from 0 to 1 over
/// `decay_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ScheduleSpec {
    pub warmup_steps: u64,
    pub stable_steps: u64,
    pub decay_steps: u64,
}

impl ScheduleSpec {
    /// Warmup followed by a constant rate that never decays.
    pub fn constant(warmup_steps: u64) -> Self {
        Self {
            warmup_steps,
            stable_steps: u64::MAX - warmup_steps,
            decay_steps: 0,
        }
    }

    pub fn decay_start(&self) -> u64 {
        self.warmup_steps.saturating_add(self.stable_steps)
    }

    pub fn end(&self) -> u64 {
        self.decay_start().saturating_add(self.decay_steps)
    }
}

pub fn lr_at(schedule: &ScheduleSpec, peak: f64, step: u64) -> f64 {
    if step < schedule.warmup_steps {
        return peak * step as f64 / schedule.warmup_steps as f64;
    }
    let start = schedule.decay_start();
    if step < start {
        return peak;
    }
    if schedule.decay_steps == 0 {
        return peak;
    }
    let u = ((step - start) as f64 / schedule.decay_steps as f64).min(1.0);
    peak * (1.0 - u.sqrt())
}
