//! Cyclic cosine learning-rate schedule: linear warmup from `lr_min` to
//! `lr_max` over the warmup epochs, cosine decay back to `lr_min` over the
//! decay epochs, repeated each cycle. Step-indexed, so partial final batches
//! do not distort the curve.

use crate::config::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub step: u64,
    pub steps_per_epoch: u64,
    pub cycle_length_epochs: u64,
}

impl ScheduleState {
    pub fn new(step: u64, steps_per_epoch: u64, config: &TrainConfig) -> Self {
        Self {
            step,
            steps_per_epoch,
            cycle_length_epochs: config.cycle_epochs() as u64,
        }
    }
}

/// Learning rate at a given schedule state.
///
/// Step 0 returns exactly `lr_min`; the first step after warmup returns
/// exactly `lr_max`; the last decay step sits one interpolation increment
/// above `lr_min`.
pub fn lr_at(state: &ScheduleState, config: &TrainConfig) -> f64 {
    let warmup_steps = config.warmup_epochs as u64 * state.steps_per_epoch;
    let decay_steps = config.decay_epochs as u64 * state.steps_per_epoch;
    let cycle_steps = state.cycle_length_epochs * state.steps_per_epoch;
    debug_assert!(cycle_steps > 0);
    let pos = state.step % cycle_steps;

    if pos < warmup_steps {
        config.lr_min + (config.lr_max - config.lr_min) * (pos as f64 / warmup_steps as f64)
    } else {
        let q = (pos - warmup_steps) as f64 / decay_steps as f64;
        // Written so q = 0 yields exactly lr_max.
        config.lr_max + (config.lr_min - config.lr_max) * 0.5 * (1.0 - (std::f64::consts::PI * q).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(step: u64, spe: u64, c: &TrainConfig) -> ScheduleState {
        ScheduleState::new(step, spe, c)
    }

    #[test]
    fn warmup_endpoints_are_exact() {
        let c = TrainConfig::default();
        let spe = 37;
        assert_eq!(lr_at(&state(0, spe, &c), &c), 1e-5);
        assert_eq!(lr_at(&state(spe, spe, &c), &c), 3e-4);
    }

    #[test]
    fn decay_approaches_lr_min() {
        let c = TrainConfig::default();
        let spe = 50;
        let last_decay_step = (c.warmup_epochs + c.decay_epochs) as u64 * spe - 1;
        let lr = lr_at(&state(last_decay_step, spe, &c), &c);
        let step_increment = (c.lr_max - c.lr_min) / (c.decay_epochs as u64 * spe) as f64
            * std::f64::consts::PI;
        assert!(lr > c.lr_min && lr < c.lr_min + step_increment);
    }

    #[test]
    fn cycles_repeat_exactly() {
        let c = TrainConfig::default();
        let spe = 13;
        let cycle = c.cycle_epochs() as u64 * spe;
        for s in 0..cycle {
            assert_eq!(
                lr_at(&state(s, spe, &c), &c),
                lr_at(&state(s + cycle, spe, &c), &c)
            );
        }
    }

    #[test]
    fn warmup_is_monotone_and_decay_is_monotone() {
        let c = TrainConfig::default();
        let spe = 20;
        let warmup = c.warmup_epochs as u64 * spe;
        let cycle = c.cycle_epochs() as u64 * spe;
        for s in 1..warmup {
            assert!(lr_at(&state(s, spe, &c), &c) > lr_at(&state(s - 1, spe, &c), &c));
        }
        for s in (warmup + 1)..cycle {
            assert!(lr_at(&state(s, spe, &c), &c) < lr_at(&state(s - 1, spe, &c), &c));
        }
    }

    #[test]
    fn bounded_by_min_and_max() {
        let c = TrainConfig::default();
        let spe = 7;
        for s in 0..(2 * c.cycle_epochs() as u64 * spe) {
            let lr = lr_at(&state(s, spe, &c), &c);
            assert!(lr >= c.lr_min && lr <= c.lr_max);
        }
    }
}
