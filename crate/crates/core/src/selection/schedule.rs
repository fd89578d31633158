use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Fixed,
    Cosine,
    Linear,
    Step,
}

/// Selection ratio as a function of the step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatioSchedule {
    pub kind: ScheduleKind,
    pub r_start: f64,
    pub r_end: f64,
    /// `(first step, r)` pairs for [`ScheduleKind::Step`]; when absent the
    /// boundaries are derived from the run length (see [`RatioSchedule::boundaries`]).
    pub step_boundaries: Option<Vec<(usize, f64)>>,
}

impl Default for RatioSchedule {
    fn default() -> Self {
        Self::fixed(0.5)
    }
}

fn check_ratio(what: &str, r: f64) -> Result<()> {
    if r > 0.0 && r <= 1.0 {
        Ok(())
    } else {
        Err(Error::Schedule(format!("{what} = {r} is outside (0, 1]")))
    }
}

impl RatioSchedule {
    pub fn fixed(r: f64) -> Self {
        Self {
            kind: ScheduleKind::Fixed,
            r_start: r,
            r_end: r,
            step_boundaries: None,
        }
    }

    pub fn new(kind: ScheduleKind, r_start: f64, r_end: f64) -> Self {
        Self {
            kind,
            r_start,
            r_end,
            step_boundaries: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_ratio("r_start", self.r_start)?;
        if self.kind != ScheduleKind::Fixed {
            check_ratio("r_end", self.r_end)?;
        }
        if let Some(bounds) = &self.step_boundaries {
            for &(step, r) in bounds {
                check_ratio(&format!("boundary r at step {step}"), r)?;
            }
        }
        Ok(())
    }

    /// Step boundaries in effect for a run of `total` steps. The default
    /// spends the first quarter at `r_start`, the second at 0.5 (or the
    /// midpoint, if 0.5 is not between the endpoints) and the rest at `r_end`.
    pub fn boundaries(&self, total: usize) -> Vec<(usize, f64)> {
        if let Some(b) = &self.step_boundaries {
            return b.clone();
        }
        let (hi, lo) = if self.r_start >= self.r_end {
            (self.r_start, self.r_end)
        } else {
            (self.r_end, self.r_start)
        };
        let mid = if (lo..=hi).contains(&0.5) {
            0.5
        } else {
            (self.r_start + self.r_end) / 2.0
        };
        vec![(1, self.r_start), (total / 4 + 1, mid), (total / 2 + 1, self.r_end)]
    }

    /// Ratio for step `t` of `total` (1-based).
    pub fn ratio(&self, t: usize, total: usize) -> Result<f64> {
        self.validate()?;
        if self.kind != ScheduleKind::Fixed && total < 2 {
            return Err(Error::Schedule(format!("{:?} schedule needs at least 2 steps, got {total}", self.kind)));
        }
        if t < 1 || t > total {
            return Err(Error::Schedule(format!("step {t} outside 1..={total}")));
        }
        let progress = (t - 1) as f64 / (total.max(2) - 1) as f64;
        let r = match self.kind {
            ScheduleKind::Fixed => self.r_start,
            ScheduleKind::Linear => self.r_start + (self.r_end - self.r_start) * progress,
            ScheduleKind::Cosine => self.r_end + (self.r_start - self.r_end) * (1.0 + (PI * progress).cos()) / 2.0,
            ScheduleKind::Step => {
                let mut r = self.r_start;
                let mut best = 0;
                for (step, br) in self.boundaries(total) {
                    if step <= t && step >= best {
                        best = step;
                        r = br;
                    }
                }
                r
            }
        };
        Ok(r.clamp(f64::MIN_POSITIVE, 1.0))
    }
}

/// Free-function form of [`RatioSchedule::ratio`].
pub fn schedule_ratio(schedule: &RatioSchedule, t: usize, total: usize) -> Result<f64> {
    schedule.ratio(t, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fixed_is_constant() {
        let s = RatioSchedule::fixed(0.5);
        for t in [1, 7, 100] {
            assert_eq!(s.ratio(t, 100).unwrap(), 0.5);
        }
        assert_eq!(s.ratio(1, 1).unwrap(), 0.5);
    }

    #[test]
    fn cosine_endpoints() {
        let s = RatioSchedule::new(ScheduleKind::Cosine, 0.8, 0.3);
        assert!((s.ratio(1, 1000).unwrap() - 0.8).abs() < 1e-12);
        assert!((s.ratio(1000, 1000).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn linear_midpoint() {
        let s = RatioSchedule::new(ScheduleKind::Linear, 0.8, 0.3);
        let total = 101;
        assert!((s.ratio((total + 1) / 2, total).unwrap() - 0.55).abs() < 1e-12);
    }

    #[test]
    fn step_default_boundaries() {
        let s = RatioSchedule::new(ScheduleKind::Step, 0.9, 0.2);
        assert_eq!(s.ratio(1, 1000).unwrap(), 0.9);
        assert_eq!(s.ratio(250, 1000).unwrap(), 0.9);
        assert_eq!(s.ratio(251, 1000).unwrap(), 0.5);
        assert_eq!(s.ratio(500, 1000).unwrap(), 0.5);
        assert_eq!(s.ratio(501, 1000).unwrap(), 0.2);
        assert_eq!(s.ratio(1000, 1000).unwrap(), 0.2);
    }

    #[test]
    fn step_explicit_boundaries() {
        let s = RatioSchedule {
            step_boundaries: Some(vec![(10, 0.4), (1, 1.0)]),
            ..RatioSchedule::new(ScheduleKind::Step, 1.0, 0.4)
        };
        assert_eq!(s.ratio(9, 20).unwrap(), 1.0);
        assert_eq!(s.ratio(10, 20).unwrap(), 0.4);
    }

    #[test]
    fn short_runs_rejected_for_varying_kinds() {
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear, ScheduleKind::Step] {
            let s = RatioSchedule::new(kind, 0.8, 0.3);
            assert!(matches!(s.ratio(1, 1), Err(Error::Schedule(_))));
        }
    }

    #[test]
    fn out_of_range_inputs_rejected() {
        assert!(RatioSchedule::fixed(0.0).ratio(1, 10).is_err());
        assert!(RatioSchedule::fixed(1.5).ratio(1, 10).is_err());
        assert!(RatioSchedule::fixed(0.5).ratio(0, 10).is_err());
        assert!(RatioSchedule::fixed(0.5).ratio(11, 10).is_err());
    }

    proptest! {
        #[test]
        fn non_increasing_when_decaying(
            kind in prop_oneof![Just(ScheduleKind::Cosine), Just(ScheduleKind::Linear), Just(ScheduleKind::Step)],
            hi in 0.05f64..=1.0,
            frac in 0.0f64..=1.0,
            total in 2usize..400,
        ) {
            let lo = (hi * frac).max(1e-3);
            let s = RatioSchedule::new(kind, hi, lo);
            let mut prev = f64::INFINITY;
            for t in 1..=total {
                let r = s.ratio(t, total).unwrap();
                prop_assert!(r > 0.0 && r <= 1.0);
                prop_assert!(r <= prev + 1e-12);
                prev = r;
            }
        }
    }
}
