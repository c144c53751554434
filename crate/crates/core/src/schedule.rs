//! Learning-rate schedules: linear warm-up followed by cosine annealing or
//! multiplicative step decay at epoch milestones.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Step,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    /// Learning rate at iteration 0.
    pub lr_start: f64,
    /// Cosine floor, reached at `total_iters`.
    pub lr_min: f64,
    pub warmup_iters: usize,
    pub total_iters: usize,
    pub iters_per_epoch: usize,
    /// Epochs at which the step schedule multiplies by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl LrSchedule {
    pub fn lr(&self, iter: usize) -> f64 {
        if iter < self.warmup_iters {
            let t = iter as f64 / self.warmup_iters as f64;
            return self.lr_start + (self.base_lr - self.lr_start) * t;
        }
        match self.kind {
            ScheduleKind::Cosine => {
                let span = self.total_iters.saturating_sub(self.warmup_iters);
                if span == 0 {
                    return self.lr_min;
                }
                let t = ((iter - self.warmup_iters) as f64 / span as f64).min(1.0);
                self.lr_min + (self.base_lr - self.lr_min) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
            ScheduleKind::Step => {
                let epoch = iter / self.iters_per_epoch.max(1);
                let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
                self.base_lr * self.gamma.powi(drops as i32)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine() -> LrSchedule {
        LrSchedule {
            kind: ScheduleKind::Cosine,
            base_lr: 0.01,
            lr_start: 1e-4,
            lr_min: 0.0,
            warmup_iters: 100,
            total_iters: 1100,
            iters_per_epoch: 10,
            milestones: vec![],
            gamma: 0.1,
        }
    }

    #[test]
    fn warmup_endpoints() {
        let s = cosine();
        assert_eq!(s.lr(0), 1e-4);
        assert_eq!(s.lr(100), 0.01);
        assert!((s.lr(50) - (1e-4 + 0.01) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_halfway_and_end() {
        let s = cosine();
        assert!((s.lr(600) - 0.005).abs() < 1e-15);
        assert!(s.lr(1100).abs() < 1e-18);
        assert!(s.lr(5000).abs() < 1e-18);
    }

    #[test]
    fn step_drops_at_milestones() {
        let s = LrSchedule {
            kind: ScheduleKind::Step,
            base_lr: 2e-4,
            lr_start: 3.5e-5,
            lr_min: 0.0,
            warmup_iters: 0,
            total_iters: 1000,
            iters_per_epoch: 10,
            milestones: vec![30, 70, 90],
            gamma: 0.1,
        };
        assert_eq!(s.lr(299), 2e-4);
        assert!((s.lr(300) - 2e-5).abs() < 1e-18);
        assert!((s.lr(700) - 2e-6).abs() < 1e-18);
        assert!((s.lr(900) - 2e-7).abs() < 1e-19);
    }
}
