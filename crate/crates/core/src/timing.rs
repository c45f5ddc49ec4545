use std::time::{Duration, Instant};

use serde::Serialize;

/// Contiguous lap timer: each lap runs from the previous lap (or creation) to
/// now, so the laps add up to the elapsed time.
#[derive(Debug, Clone)]
pub struct PhaseTimer {
    start: Instant,
    last: Instant,
    phases: Vec<(&'static str, Duration)>,
}

impl Default for PhaseTimer {
    fn default() -> Self {
        Self::new()
    }
}

impl PhaseTimer {
    pub fn new() -> Self {
        let now = Instant::now();
        PhaseTimer {
            start: now,
            last: now,
            phases: Vec::new(),
        }
    }

    pub fn lap(&mut self, phase: &'static str) {
        let now = Instant::now();
        let d = now - self.last;
        self.last = now;
        match self.phases.iter_mut().find(|(p, _)| *p == phase) {
            Some((_, total)) => *total += d,
            None => self.phases.push((phase, d)),
        }
    }

    pub fn report(&self) -> TimingReport {
        let total = self.last - self.start;
        let phases: Vec<PhaseTime> = self
            .phases
            .iter()
            .map(|(p, d)| PhaseTime {
                phase: p,
                ms: d.as_secs_f64() * 1e3,
            })
            .collect();
        let accounted: Duration = self.phases.iter().map(|(_, d)| *d).sum();
        let coverage = if total.is_zero() {
            1.0
        } else {
            accounted.as_secs_f64() / total.as_secs_f64()
        };
        TimingReport {
            phases,
            total_ms: total.as_secs_f64() * 1e3,
            coverage,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PhaseTime {
    pub phase: &'static str,
    pub ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingReport {
    pub phases: Vec<PhaseTime>,
    pub total_ms: f64,
    /// Fraction of `total_ms` covered by the named phases.
    pub coverage: f64,
}
