use serde::{Deserialize, Serialize};

/// Piecewise-constant learning-rate schedules, with breakpoints rescaled to
/// the configured step count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// 1e-4, halved at 0.4M, 0.6M, 0.8M and 1M of 1.2M iterations.
    SLong,
    /// 1e-5 from 1.2M, halved at 1.4M, 1.5M and 1.6M of a span ending at
    /// 1.7M.
    SFine,
    Constant,
}

impl Schedule {
    pub fn base_lr(self) -> f64 {
        match self {
            Schedule::SLong | Schedule::Constant => 1e-4,
            Schedule::SFine => 1e-5,
        }
    }

    /// Breakpoints as exact fractions (numerator, denominator) of the run.
    fn breakpoints(self) -> &'static [(usize, usize)] {
        match self {
            Schedule::SLong => &[(4, 12), (6, 12), (8, 12), (10, 12)],
            Schedule::SFine => &[(2, 5), (3, 5), (4, 5)],
            Schedule::Constant => &[],
        }
    }

    /// Number of halvings in effect at `step`.
    pub fn halvings(self, step: usize, total_steps: usize) -> usize {
        self.breakpoints()
            .iter()
            .filter(|&&(num, den)| step * den >= num * total_steps)
            .count()
    }
}

/// Rate at `step` of a `total_steps` run starting from the schedule's own
/// base rate.
pub fn lr_at(schedule: Schedule, step: usize, total_steps: usize) -> f64 {
    lr_from(schedule, schedule.base_lr(), step, total_steps)
}

/// Same profile from a custom starting rate.
pub fn lr_from(schedule: Schedule, base: f64, step: usize, total_steps: usize) -> f64 {
    base * 0.5f64.powi(schedule.halvings(step, total_steps) as i32)
}
