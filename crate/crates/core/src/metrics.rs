//! Run metrics.

use serde::{Deserialize, Serialize};

use crate::sim::SimClock;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Fraction of the makespan each core was running a thread.
    pub per_core_utilization: Vec<f64>,
    /// Fraction of the makespan each core had two or more runnable workers.
    pub per_core_oversubscription: Vec<f64>,
    pub utilization: f64,
    pub oversubscription: f64,
    pub max_core_oversubscription: f64,
    pub context_switches: u64,
    pub leader_wakeups: u64,
    pub makespan_us: u64,
    pub events_blocked: u64,
    pub events_unblocked: u64,
    pub workers: usize,
    pub surrenders: u64,
    pub tasks: usize,
}

impl MetricsReport {
    /// Fills the time-based fields from a simulator clock.
    pub fn with_clock(mut self, clock: &SimClock) -> Self {
        let n = clock.busy.len();
        self.per_core_utilization = (0..n).map(|c| clock.utilization(c)).collect();
        self.per_core_oversubscription = (0..n).map(|c| clock.oversubscription(c)).collect();
        self.finish_means();
        self
    }

    /// Recomputes the mean and max fields from the per-core vectors.
    pub fn finish_means(&mut self) {
        self.utilization = mean(&self.per_core_utilization);
        self.oversubscription = mean(&self.per_core_oversubscription);
        self.max_core_oversubscription = self
            .per_core_oversubscription
            .iter()
            .copied()
            .fold(0.0, f64::max);
    }

    /// Throughput gain of `self` over `baseline` for the same work:
    /// `baseline_makespan / makespan - 1`.
    pub fn speedup_over(&self, baseline: &MetricsReport) -> f64 {
        speedup(baseline.makespan_us as f64, self.makespan_us as f64)
    }
}

pub fn speedup(baseline_makespan: f64, makespan: f64) -> f64 {
    if makespan <= 0.0 {
        return 0.0;
    }
    baseline_makespan / makespan - 1.0
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn speedup_arithmetic() {
        assert_eq!(speedup(200.0, 100.0), 1.0);
        assert_eq!(speedup(100.0, 100.0), 0.0);
    }

    #[test]
    fn means_from_clock() {
        let clock = SimClock {
            now: 100,
            busy: vec![50, 100],
            oversubscribed: vec![10, 0],
            idle: vec![40, 0],
        };
        let m = MetricsReport::default().with_clock(&clock);
        assert_eq!(m.per_core_utilization, vec![0.6, 1.0]);
        assert!((m.utilization - 0.8).abs() < 1e-12);
        assert_eq!(m.max_core_oversubscription, 0.1);
    }
}
