//! Learning-rate schedules and early stopping.
//!
//! Both schedules are pure functions of (config, epoch progress): replaying
//! from scratch gives the same rates as stepping incrementally, which keeps
//! resumed runs exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multiply the rate by `factor` every `period` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDecaySchedule {
    pub lr0: f64,
    pub factor: f64,
    pub period: usize,
}

impl StepDecaySchedule {
    pub fn new(lr0: f64) -> Self {
        Self {
            lr0,
            factor: 0.5,
            period: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::InvalidConfig(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "step factor must be in (0,1), got {}",
                self.factor
            )));
        }
        if self.period == 0 {
            return Err(Error::InvalidConfig("step period must be >= 1".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch_progress: f64) -> f64 {
        let steps = (epoch_progress / self.period as f64).floor();
        self.lr0 * self.factor.powf(steps)
    }
}

/// Cosine decay from `lr0` to `eta_min` over a cycle, restarting at full rate
/// when the cycle ends; each cycle is `t_mult` times longer than the last.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineWarmRestartSchedule {
    pub lr0: f64,
    pub eta_min: f64,
    pub t0: f64,
    pub t_mult: f64,
}

impl CosineWarmRestartSchedule {
    /// Conventional defaults: first cycle 2 epochs, doubling cycles,
    /// floor at lr0/100.
    pub fn new(lr0: f64) -> Self {
        Self {
            lr0,
            eta_min: lr0 / 100.0,
            t0: 2.0,
            t_mult: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::InvalidConfig(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if !(self.eta_min >= 0.0 && self.eta_min < self.lr0) {
            return Err(Error::InvalidConfig(format!(
                "eta_min must satisfy 0 <= eta_min < lr0, got {}",
                self.eta_min
            )));
        }
        if !(self.t0 >= 1.0) {
            return Err(Error::InvalidConfig(format!("T0 must be >= 1, got {}", self.t0)));
        }
        if !(self.t_mult >= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "Tmult must be >= 1, got {}",
                self.t_mult
            )));
        }
        Ok(())
    }

    /// Position within the current cycle: (elapsed in cycle, cycle length).
    ///
    /// A cycle boundary belongs to the start of the next cycle, so the rate
    /// restarts to `lr0` there.
    pub fn cycle_position(&self, epoch_progress: f64) -> (f64, f64) {
        let mut t = epoch_progress;
        let mut cycle_len = self.t0;
        while t >= cycle_len {
            t -= cycle_len;
            cycle_len *= self.t_mult;
        }
        (t, cycle_len)
    }

    /// The closed form within one cycle of length `cycle_len`:
    /// eta_min + (lr0 - eta_min) * (1 + cos(pi * t / T_i)) / 2.
    pub fn cycle_lr(&self, t_in_cycle: f64, cycle_len: f64) -> f64 {
        let cos = (std::f64::consts::PI * t_in_cycle / cycle_len).cos();
        self.eta_min + 0.5 * (self.lr0 - self.eta_min) * (1.0 + cos)
    }

    pub fn lr_at(&self, epoch_progress: f64) -> f64 {
        let (t, cycle_len) = self.cycle_position(epoch_progress);
        self.cycle_lr(t, cycle_len)
    }
}

/// The two schedules the trainer knows about.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    StepDecay(StepDecaySchedule),
    CosineWarmRestart(CosineWarmRestartSchedule),
}

impl Schedule {
    pub fn lr0(&self) -> f64 {
        match self {
            Schedule::StepDecay(s) => s.lr0,
            Schedule::CosineWarmRestart(s) => s.lr0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Schedule::StepDecay(s) => s.validate(),
            Schedule::CosineWarmRestart(s) => s.validate(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Schedule::StepDecay(_) => "step",
            Schedule::CosineWarmRestart(_) => "cosine",
        }
    }
}

pub fn lr_at(schedule: &Schedule, epoch_progress: f64) -> f64 {
    debug_assert!(epoch_progress >= 0.0);
    match schedule {
        Schedule::StepDecay(s) => s.lr_at(epoch_progress),
        Schedule::CosineWarmRestart(s) => s.lr_at(epoch_progress),
    }
}

/// Whether a higher or lower validation metric counts as improvement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMode {
    Maximize,
    Minimize,
}

/// Early-stopping bookkeeping. The first observation always counts as an
/// improvement; afterwards only strict improvement resets the counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub patience: usize,
    pub best_metric: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_since_improvement: usize,
    last_epoch: Option<usize>,
}

impl EarlyStopState {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_metric: None,
            best_epoch: None,
            epochs_since_improvement: 0,
            last_epoch: None,
        }
    }
}

/// Feed one epoch's validation metric; returns the updated state and whether
/// the counter just reached `patience`.
pub fn early_stop_update(
    mut state: EarlyStopState,
    epoch: usize,
    val_metric: f64,
    mode: StopMode,
) -> Result<(EarlyStopState, bool)> {
    if val_metric.is_nan() {
        return Err(Error::NanMetric(epoch));
    }
    if let Some(last) = state.last_epoch {
        if epoch <= last {
            return Err(Error::EpochOrder { got: epoch, last });
        }
    }
    state.last_epoch = Some(epoch);

    let improved = match state.best_metric {
        None => true,
        Some(best) => match mode {
            StopMode::Maximize => val_metric > best,
            StopMode::Minimize => val_metric < best,
        },
    };

    if improved {
        state.best_metric = Some(val_metric);
        state.best_epoch = Some(epoch);
        state.epochs_since_improvement = 0;
        Ok((state, false))
    } else {
        state.epochs_since_improvement += 1;
        let stop = state.epochs_since_improvement >= state.patience;
        Ok((state, stop))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(lr0: f64) -> Schedule {
        Schedule::StepDecay(StepDecaySchedule::new(lr0))
    }

    #[test]
    fn step_decay_halves_every_two_epochs() {
        let s = step(1e-3);
        assert_eq!(lr_at(&s, 0.0), 1e-3);
        assert_eq!(lr_at(&s, 1.0), 1e-3);
        assert!((lr_at(&s, 4.0) - 2.5e-4).abs() < 1e-18);
        assert!((lr_at(&s, 5.9) - 2.5e-4).abs() < 1e-18);
    }

    #[test]
    fn step_decay_non_increasing() {
        let s = step(1e-2);
        let mut prev = f64::INFINITY;
        for e in 0..60 {
            let lr = lr_at(&s, e as f64 * 0.5);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn cosine_endpoints() {
        let c = CosineWarmRestartSchedule::new(1e-4);
        // t = 0 of any cycle restarts at lr0.
        assert_eq!(c.lr_at(0.0), 1e-4);
        assert_eq!(c.lr_at(2.0), 1e-4); // first boundary: cycle 2 starts
        assert_eq!(c.lr_at(6.0), 1e-4); // 2 + 4
        // Within-cycle closed form hits eta_min at t = T_i exactly.
        let at_end = c.cycle_lr(2.0, 2.0);
        assert!((at_end - c.eta_min).abs() < 1e-18);
    }

    #[test]
    fn cosine_midpoint_value() {
        let c = CosineWarmRestartSchedule {
            lr0: 1e-4,
            eta_min: 1e-6,
            t0: 2.0,
            t_mult: 2.0,
        };
        // midpoint of the first cycle: (lr0 + eta_min) / 2
        let lr = c.lr_at(1.0);
        assert!((lr - 5.05e-5).abs() < 1e-12, "got {lr}");
    }

    #[test]
    fn cosine_bounded() {
        let c = CosineWarmRestartSchedule::new(3e-3);
        for i in 0..400 {
            let lr = c.lr_at(i as f64 * 0.13);
            assert!(lr <= c.lr0 + 1e-15 && lr >= c.eta_min - 1e-15);
        }
    }

    #[test]
    fn early_stop_plateau_trace() {
        // metrics [0.6, 0.7, 0.7, 0.7, 0.7, 0.7, 0.7], patience 5:
        // stop fires at epoch 6, best at epoch 1.
        let metrics = [0.6, 0.7, 0.7, 0.7, 0.7, 0.7, 0.7];
        let mut state = EarlyStopState::new(5);
        let mut stopped_at = None;
        for (epoch, &m) in metrics.iter().enumerate() {
            let (next, stop) = early_stop_update(state, epoch, m, StopMode::Maximize).unwrap();
            state = next;
            if stop {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(6));
        assert_eq!(state.best_epoch, Some(1));
        assert_eq!(state.best_metric, Some(0.7));
    }

    #[test]
    fn early_stop_never_fires_on_increasing_metrics() {
        let mut state = EarlyStopState::new(5);
        for epoch in 0..200 {
            let (next, stop) =
                early_stop_update(state, epoch, epoch as f64, StopMode::Maximize).unwrap();
            state = next;
            assert!(!stop);
        }
    }

    #[test]
    fn early_stop_patience_one() {
        let mut state = EarlyStopState::new(1);
        let (s1, stop1) = early_stop_update(state, 0, 0.5, StopMode::Maximize).unwrap();
        assert!(!stop1);
        state = s1;
        let (_, stop2) = early_stop_update(state, 1, 0.5, StopMode::Maximize).unwrap();
        assert!(stop2);
    }

    #[test]
    fn early_stop_rejects_nan_and_reordered_epochs() {
        let state = EarlyStopState::new(3);
        assert!(matches!(
            early_stop_update(state.clone(), 0, f64::NAN, StopMode::Maximize),
            Err(Error::NanMetric(0))
        ));
        let (state, _) = early_stop_update(state, 5, 0.1, StopMode::Maximize).unwrap();
        assert!(matches!(
            early_stop_update(state, 5, 0.2, StopMode::Maximize),
            Err(Error::EpochOrder { .. })
        ));
    }

    #[test]
    fn early_stop_minimize_mode() {
        let mut state = EarlyStopState::new(2);
        for (epoch, m) in [1.0, 0.9, 0.9, 0.9].iter().enumerate() {
            let (next, stop) = early_stop_update(state, epoch, *m, StopMode::Minimize).unwrap();
            state = next;
            if stop {
                assert_eq!(epoch, 3);
                assert_eq!(state.best_epoch, Some(1));
                return;
            }
        }
        panic!("expected stop at epoch 3");
    }
}
