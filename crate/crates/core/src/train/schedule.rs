//! Epoch-level learning-rate schedule: linear warmup, reduce-on-plateau,
//! staged unfreezing when the rate falls below its floor, and stopping.

use serde::{Deserialize, Serialize};

/// The schedule-relevant subset of the training configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub warmup_epochs: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub unfreeze_stages: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
    LrExhausted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ScheduleEvent {
    PlateauDecay { from: f64, to: f64 },
    Unfreeze { stage: String },
    Stop(StopReason),
}

/// Scheduler state between epochs. `epoch` counts finished epochs and
/// `current_lr` is the rate for the next one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub current_lr: f64,
    pub epoch: usize,
    pub plateau_counter: usize,
    pub unfreeze_stage_index: usize,
    pub best_val_ccc: f64,
    /// Epoch whose weights are the current best.
    pub best_checkpoint_ref: Option<usize>,
    pub early_stop_counter: usize,
    pub stopped: Option<StopReason>,
}

/// Rate for 1-based epoch `epoch` inside the warmup.
pub fn warmup_lr(cfg: &ScheduleConfig, epoch: usize) -> f64 {
    cfg.lr * (epoch as f64 / cfg.warmup_epochs as f64)
}

impl SchedulerState {
    pub fn new(cfg: &ScheduleConfig) -> Self {
        SchedulerState {
            current_lr: if cfg.warmup_epochs > 0 { warmup_lr(cfg, 1) } else { cfg.lr },
            epoch: 0,
            plateau_counter: 0,
            unfreeze_stage_index: 0,
            best_val_ccc: f64::NEG_INFINITY,
            best_checkpoint_ref: None,
            early_stop_counter: 0,
            stopped: None,
        }
    }

    /// Records the validation score of the epoch just finished and returns
    /// whether it improved on the best by at least `threshold`.
    pub fn record_score(&mut self, val_ccc: f64, threshold: f64) -> bool {
        let improved = self.best_checkpoint_ref.is_none() || val_ccc - self.best_val_ccc >= threshold;
        if improved {
            self.best_val_ccc = val_ccc;
            self.best_checkpoint_ref = Some(self.epoch + 1);
        }
        improved
    }
}

/// Advances the state by one finished epoch.
///
/// Non-improving epochs inside the warmup count toward neither the plateau
/// nor the early-stop counter. The warmup ends on the configured rate.
pub fn scheduler_step(
    cfg: &ScheduleConfig,
    state: &SchedulerState,
    improved: bool,
) -> (SchedulerState, Vec<ScheduleEvent>) {
    let mut s = state.clone();
    let mut events = Vec::new();
    s.epoch += 1;
    let e = s.epoch;
    if improved {
        s.plateau_counter = 0;
        s.early_stop_counter = 0;
    } else if e > cfg.warmup_epochs {
        s.plateau_counter += 1;
        s.early_stop_counter += 1;
    }

    if e < cfg.warmup_epochs {
        s.current_lr = warmup_lr(cfg, e + 1);
    } else {
        let mut lr = if e == cfg.warmup_epochs { cfg.lr } else { s.current_lr };
        if s.plateau_counter >= cfg.plateau_patience {
            let to = lr * cfg.plateau_factor;
            events.push(ScheduleEvent::PlateauDecay { from: lr, to });
            lr = to;
            s.plateau_counter = 0;
        }
        if lr < cfg.min_lr {
            if let Some(stage) = cfg.unfreeze_stages.get(s.unfreeze_stage_index) {
                events.push(ScheduleEvent::Unfreeze { stage: stage.clone() });
                s.unfreeze_stage_index += 1;
                lr = cfg.lr;
                s.plateau_counter = 0;
                s.early_stop_counter = 0;
            } else {
                events.push(ScheduleEvent::Stop(StopReason::LrExhausted));
            }
        }
        s.current_lr = lr;
    }

    if s.early_stop_counter >= cfg.early_stop_patience {
        events.push(ScheduleEvent::Stop(StopReason::EarlyStop));
    }
    if e >= cfg.max_epochs {
        events.push(ScheduleEvent::Stop(StopReason::MaxEpochs));
    }
    s.stopped = events.iter().find_map(|ev| match ev {
        ScheduleEvent::Stop(r) => Some(*r),
        _ => None,
    });
    (s, events)
}

/// Learning rate used in each epoch for a given sequence of improvement
/// flags, stopping early if the schedule does.
pub fn lr_trace(cfg: &ScheduleConfig, improved: &[bool]) -> Vec<f64> {
    let mut state = SchedulerState::new(cfg);
    let mut trace = Vec::with_capacity(improved.len());
    for &flag in improved {
        trace.push(state.current_lr);
        state = scheduler_step(cfg, &state, flag).0;
        if state.stopped.is_some() {
            break;
        }
    }
    trace
}

#[cfg(test)]
mod tests {
    use super::*;

    fn defaults() -> ScheduleConfig {
        ScheduleConfig {
            lr: 1e-5,
            min_lr: 1e-7,
            plateau_patience: 5,
            plateau_factor: 0.1,
            warmup_epochs: 10,
            max_epochs: 100,
            early_stop_patience: 10,
            unfreeze_stages: vec!["backbone.stage3".into(), "backbone.stage2".into()],
        }
    }

    #[test]
    fn warmup_is_linear() {
        let cfg = defaults();
        let trace = lr_trace(&cfg, &[true; 12]);
        assert_eq!(trace[4], 5e-6);
        for (i, lr) in trace[..10].iter().enumerate() {
            assert!((lr - (i + 1) as f64 * 1e-6).abs() < 1e-18);
        }
        assert_eq!(trace[10], 1e-5);
        assert_eq!(trace[11], 1e-5);
    }

    #[test]
    fn plateau_decays_after_patience() {
        let cfg = defaults();
        let mut flags = vec![true; 10];
        flags.extend([false; 6]);
        let trace = lr_trace(&cfg, &flags);
        assert_eq!(&trace[10..15], &[1e-5; 5]);
        assert!((trace[15] - 1e-6).abs() < 1e-20);
    }

    #[test]
    fn unfreezes_below_floor() {
        let cfg = defaults();
        let mut state = SchedulerState::new(&cfg);
        state.epoch = 20;
        state.current_lr = 1e-7;
        state.plateau_counter = 4;
        let (next, events) = scheduler_step(&cfg, &state, false);
        assert_eq!(
            events,
            vec![
                ScheduleEvent::PlateauDecay { from: 1e-7, to: 1e-7 * 0.1 },
                ScheduleEvent::Unfreeze { stage: "backbone.stage3".into() }
            ]
        );
        assert_eq!(next.current_lr, 1e-5);
        assert_eq!((next.unfreeze_stage_index, next.plateau_counter, next.early_stop_counter), (1, 0, 0));

        state.unfreeze_stage_index = 2;
        let (next, events) = scheduler_step(&cfg, &state, false);
        assert_eq!(events.last(), Some(&ScheduleEvent::Stop(StopReason::LrExhausted)));
        assert_eq!(next.stopped, Some(StopReason::LrExhausted));
    }

    #[test]
    fn early_stop_after_patience() {
        let cfg = ScheduleConfig {
            plateau_patience: 50,
            ..defaults()
        };
        let mut flags = vec![true; 10];
        flags.extend([false; 20]);
        let trace = lr_trace(&cfg, &flags);
        assert_eq!(trace.len(), 20);
    }
}
