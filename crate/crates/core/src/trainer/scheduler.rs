use serde::{Deserialize, Serialize};

/// Minimum absolute gain in the monitored metric that counts as progress.
pub const DEFAULT_THRESHOLD: f64 = 1e-4;

/// Reduce-on-plateau bookkeeping for a maximized metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub best_metric: f64,
    pub epochs_since_improvement: u32,
    pub current_lr: f64,
}

impl SchedulerState {
    pub fn new(lr: f64) -> Self {
        Self {
            best_metric: f64::NEG_INFINITY,
            epochs_since_improvement: 0,
            current_lr: lr,
        }
    }
}

/// One observation with the default threshold.
pub fn scheduler_step(state: SchedulerState, val_metric: f64, patience: u32, factor: f64) -> SchedulerState {
    scheduler_step_with(state, val_metric, patience, factor, DEFAULT_THRESHOLD)
}

/// A metric improves when it beats the best so far by more than
/// `threshold`. After more than `patience` observations without
/// improvement the rate is multiplied by `factor` and the counter restarts.
pub fn scheduler_step_with(
    state: SchedulerState,
    val_metric: f64,
    patience: u32,
    factor: f64,
    threshold: f64,
) -> SchedulerState {
    let mut next = state;
    if val_metric > state.best_metric + threshold {
        next.best_metric = val_metric;
        next.epochs_since_improvement = 0;
    } else {
        next.epochs_since_improvement += 1;
    }
    if next.epochs_since_improvement > patience {
        next.current_lr *= factor;
        next.epochs_since_improvement = 0;
    }
    next
}
