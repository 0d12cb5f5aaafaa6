//! Piecewise-linear set-point programs for slow ramps and standardization
//! cycles, sampled every 100 ms.

use crate::sim::{Nanos, NS_PER_MS};

pub const RAMP_STEP_NS: Nanos = 100 * NS_PER_MS;
pub const MIN_RAMP_S: f64 = 0.1;
pub const CYCLE_EXCURSIONS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    /// (seconds from start, current) breakpoints, times increasing.
    pub points: Vec<(f64, f64)>,
}

impl Profile {
    pub fn linear(from: f64, to: f64, duration: f64) -> Self {
        Self {
            points: vec![(0.0, from), (duration, to)],
        }
    }

    /// Standardization: approach I_max, run the full excursions
    /// I_max -> I_min -> I_max at `rate`, then descend to the prior set.
    pub fn standardize(start: f64, i_min: f64, i_max: f64, rate: f64) -> Self {
        let mut p = Self {
            points: vec![(0.0, start)],
        };
        p.push_to(i_max, rate);
        for _ in 0..CYCLE_EXCURSIONS {
            p.push_to(i_min, rate);
            p.push_to(i_max, rate);
        }
        p.push_to(start, rate);
        p
    }

    fn push_to(&mut self, value: f64, rate: f64) {
        let (t, v) = *self.points.last().expect("non-empty");
        if v != value {
            self.points.push((t + (value - v).abs() / rate, value));
        }
    }

    pub fn duration(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.0)
    }

    pub fn end_value(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.1)
    }

    pub fn value_at(&self, t: f64) -> f64 {
        let pts = &self.points;
        if t <= pts[0].0 {
            return pts[0].1;
        }
        for w in pts.windows(2) {
            let ((t0, v0), (t1, v1)) = (w[0], w[1]);
            if t <= t1 {
                return v0 + (v1 - v0) * (t - t0) / (t1 - t0);
            }
        }
        self.end_value()
    }

    /// Number of 100 ms updates covering the program.
    pub fn steps(&self) -> u32 {
        let n = (self.duration() * 1e9 / RAMP_STEP_NS as f64 - 1e-9).ceil();
        (n as u32).max(1)
    }

    /// Set-point written by update `k` (0-based); the last update writes the
    /// end value exactly.
    pub fn step_value(&self, k: u32) -> f64 {
        if k + 1 >= self.steps() {
            return self.end_value();
        }
        self.value_at((k + 1) as f64 * RAMP_STEP_NS as f64 * 1e-9)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_two_seconds_is_twenty_steps() {
        let p = Profile::linear(0.0, 10.0, 2.0);
        assert_eq!(p.steps(), 20);
        assert!((p.step_value(0) - 0.5).abs() < 1e-12);
        assert_eq!(p.step_value(19), 10.0);
    }

    #[test]
    fn flat_ramp_writes_same_value() {
        let p = Profile::linear(3.0, 3.0, 2.0);
        assert!((0..20).all(|k| p.step_value(k) == 3.0));
    }

    #[test]
    fn standardize_program_duration() {
        // 60 -> 120 (6 s), three 24 s excursions, 120 -> 60 (6 s).
        let p = Profile::standardize(60.0, 0.0, 120.0, 10.0);
        assert!((p.duration() - 84.0).abs() < 1e-12);
        assert_eq!(p.steps(), 840);
        assert_eq!(p.end_value(), 60.0);
        let peak = (0..p.steps()).map(|k| p.step_value(k)).fold(0.0, f64::max);
        assert_eq!(peak, 120.0);
    }

    #[test]
    fn standardize_from_top_skips_approach() {
        let p = Profile::standardize(120.0, 0.0, 120.0, 10.0);
        assert!((p.duration() - 72.0).abs() < 1e-12);
    }
}
