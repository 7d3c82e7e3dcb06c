//! Validation-performance annealing for the two learning rates. On an epoch
//! whose relative improvement falls short of the threshold, both rates are
//! multiplied by a factor that interpolates linearly between `anneal_factor`
//! (no improvement or worse) and 1 (exactly at threshold).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub encoder_lr: f64,
    pub downstream_lr: f64,
    /// Lower bound on the per-epoch anneal factor, in (0, 1].
    pub anneal_factor: f64,
    /// Epochs without threshold improvement before callers should stop.
    pub patience: usize,
    /// Relative improvement needed to count as progress.
    pub improvement_threshold: f64,
    pub best_metric: Option<f64>,
    pub epochs_since_improvement: usize,
    pub history: Vec<f64>,
}

impl ScheduleState {
    pub fn new(encoder_lr: f64, downstream_lr: f64) -> Self {
        ScheduleState {
            encoder_lr,
            downstream_lr,
            anneal_factor: 0.5,
            patience: 10,
            improvement_threshold: 0.0025,
            best_metric: None,
            epochs_since_improvement: 0,
            history: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_lr < 0.0 || self.downstream_lr < 0.0 {
            return Err(Error::InvalidConfig("negative learning rate".into()));
        }
        if !(0.0 < self.anneal_factor && self.anneal_factor <= 1.0) {
            return Err(Error::InvalidConfig("anneal_factor outside (0,1]".into()));
        }
        if self.improvement_threshold < 0.0 {
            return Err(Error::InvalidConfig("negative improvement threshold".into()));
        }
        Ok(())
    }

    pub fn exhausted(&self) -> bool {
        self.epochs_since_improvement >= self.patience
    }
}

/// One scheduler update from a validation metric. Deterministic; NaN metrics
/// halt the run.
pub fn scheduler_step(
    state: &ScheduleState,
    new_val_metric: f64,
    higher_is_better: bool,
) -> Result<ScheduleState> {
    state.validate()?;
    if new_val_metric.is_nan() {
        return Err(Error::Metric("validation metric is NaN".into()));
    }
    let mut next = state.clone();
    next.history.push(new_val_metric);
    let improvement = match state.best_metric {
        None => {
            // first observation becomes the baseline, no annealing
            next.best_metric = Some(new_val_metric);
            next.epochs_since_improvement = 0;
            return Ok(next);
        }
        Some(best) => {
            let delta = if higher_is_better {
                new_val_metric - best
            } else {
                best - new_val_metric
            };
            delta / best.abs().max(1e-12)
        }
    };
    if improvement >= state.improvement_threshold {
        next.best_metric = Some(new_val_metric);
        next.epochs_since_improvement = 0;
    } else {
        let progress = (improvement / state.improvement_threshold).clamp(0.0, 1.0);
        let factor = state.anneal_factor + (1.0 - state.anneal_factor) * progress;
        next.encoder_lr = state.encoder_lr * factor;
        next.downstream_lr = state.downstream_lr * factor;
        next.epochs_since_improvement = state.epochs_since_improvement + 1;
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded(encoder_lr: f64, downstream_lr: f64, baseline: f64) -> ScheduleState {
        let mut s = ScheduleState::new(encoder_lr, downstream_lr);
        s.best_metric = Some(baseline);
        s
    }

    #[test]
    fn improvement_leaves_rates_unchanged() {
        let s = seeded(1e-5, 1e-4, 60.0);
        let next = scheduler_step(&s, 65.0, true).unwrap();
        assert_eq!(next.encoder_lr, 1e-5);
        assert_eq!(next.downstream_lr, 1e-4);
        assert_eq!(next.best_metric, Some(65.0));
        assert_eq!(next.epochs_since_improvement, 0);
    }

    #[test]
    fn regression_hits_the_anneal_floor() {
        let s = seeded(1e-5, 1e-4, 60.0);
        // clearly worse -> worst-case anneal = 0.5
        let next = scheduler_step(&s, 30.0, true).unwrap();
        assert!((next.encoder_lr - 5e-6).abs() < 1e-18);
        assert!((next.downstream_lr - 5e-5).abs() < 1e-17);
        assert_eq!(next.best_metric, Some(60.0));
        assert_eq!(next.epochs_since_improvement, 1);
    }

    /// Three non-improving epochs from (1e-5, 1e-4) with factor 0.5 land on
    /// (1.25e-6, 1.25e-5): iterate the update rule.
    #[test]
    fn three_regressions_iterate_the_rule() {
        let mut s = seeded(1e-5, 1e-4, 60.0);
        for _ in 0..3 {
            s = scheduler_step(&s, 50.0, true).unwrap();
        }
        assert!((s.encoder_lr - 1.25e-6).abs() < 1e-18, "{}", s.encoder_lr);
        assert!((s.downstream_lr - 1.25e-5).abs() < 1e-17, "{}", s.downstream_lr);
        assert_eq!(s.epochs_since_improvement, 3);
        assert!(s.history.len() == 3);
    }

    #[test]
    fn partial_improvement_anneals_proportionally() {
        let mut s = seeded(1e-5, 1e-4, 100.0);
        s.improvement_threshold = 0.01;
        // +0.5% relative = halfway to the 1% threshold
        let next = scheduler_step(&s, 100.5, true).unwrap();
        let expect = 0.5 + 0.5 * 0.5;
        assert!((next.encoder_lr - 1e-5 * expect).abs() < 1e-18);
        // best is not updated below threshold
        assert_eq!(next.best_metric, Some(100.0));
    }

    #[test]
    fn lower_is_better_direction() {
        let s = {
            let mut s = seeded(1e-5, 1e-4, 10.0);
            s.improvement_threshold = 0.0025;
            s
        };
        // EER dropping from 10 to 8 is an improvement
        let next = scheduler_step(&s, 8.0, false).unwrap();
        assert_eq!(next.encoder_lr, 1e-5);
        assert_eq!(next.best_metric, Some(8.0));
        // EER rising is a regression
        let worse = scheduler_step(&next, 12.0, false).unwrap();
        assert!(worse.encoder_lr < 1e-5);
    }

    #[test]
    fn nan_metric_is_an_error() {
        let s = seeded(1e-5, 1e-4, 1.0);
        assert!(scheduler_step(&s, f64::NAN, true).is_err());
    }

    #[test]
    fn rates_are_non_increasing_over_any_history() {
        let mut s = ScheduleState::new(1e-5, 1e-4);
        let metrics = [50.0, 55.0, 54.0, 54.1, 60.0, 59.0, 58.0, 61.0];
        let mut prev = (s.encoder_lr, s.downstream_lr);
        for &m in &metrics {
            s = scheduler_step(&s, m, true).unwrap();
            assert!(s.encoder_lr <= prev.0 && s.downstream_lr <= prev.1);
            assert!(s.encoder_lr > 0.0 && s.downstream_lr > 0.0);
            prev = (s.encoder_lr, s.downstream_lr);
        }
        assert_eq!(s.history.len(), metrics.len());
    }
}
