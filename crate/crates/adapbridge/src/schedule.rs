//! Epoch-indexed schedules for the sampling probability alpha and the
//! similarity threshold beta.
//!
//! Two families live here: the decreasing keep-probability used by
//! word-level scheduled sampling, and the increasing switch-probability used
//! by the adaptive strategy, whose threshold beta rises with alpha from a
//! floor gamma toward 1. `n` counts completed epochs (or completed optimizer
//! steps when the trainer is configured for step granularity).

use crate::error::{Error, Result};

/// Shared schedule constants.
///
/// `k` controls how fast both curves move (larger k is slower), `w` delays
/// the adaptive ramp, `gamma` is the similarity-threshold floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleParams {
    pub k: f64,
    pub w: usize,
    pub gamma: f64,
}

impl ScheduleParams {
    pub fn new(k: f64, w: usize, gamma: f64) -> Result<Self> {
        if !k.is_finite() || k < 1.0 {
            return Err(Error::Config(format!("schedule.k must be >= 1, got {}", k)));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::Config(format!(
                "schedule.gamma must be in [0,1), got {}",
                gamma
            )));
        }
        Ok(ScheduleParams { k, w, gamma })
    }
}

impl Default for ScheduleParams {
    /// The constants used throughout the experiments: k=5, w=32, gamma=0.9.
    fn default() -> Self {
        ScheduleParams { k: 5.0, w: 32, gamma: 0.9 }
    }
}

/// Keep-probability for scheduled sampling: `k / (k + exp(n/k))`.
///
/// Strictly decreasing in `n`, starting at `k/(k+1)` and falling toward 0.
pub fn ss_decay_alpha(n: usize, k: f64) -> Result<f64> {
    if !k.is_finite() || k < 1.0 {
        return Err(Error::Config(format!("schedule.k must be >= 1, got {}", k)));
    }
    Ok(k / (k + (n as f64 / k).exp()))
}

/// Switch-probability for the adaptive strategy:
/// `1 - k / (k + exp((n - w) / k))`.
///
/// Near 0 for the first `w` epochs, reaches exactly `1/(k+1)` at `n == w`,
/// then climbs toward 1. The two algebraically equal forms below each keep
/// the small quantity explicit, so neither tail of the curve cancels away
/// in floating point and the evaluation stays monotone.
pub fn adap_alpha(n: usize, params: &ScheduleParams) -> f64 {
    let k = params.k;
    let e = ((n as f64 - params.w as f64) / k).exp();
    if e < k {
        e / (k + e)
    } else {
        1.0 - k / (k + e)
    }
}

/// Similarity threshold: `gamma + (1 - gamma) * alpha`.
///
/// Affine in alpha: equals `gamma` at alpha 0 and 1 at alpha 1.
pub fn adap_beta(alpha: f64, gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must be in [0,1], got {}", alpha)));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma must be in [0,1), got {}", gamma)));
    }
    Ok(gamma + (1.0 - gamma) * alpha)
}

/// Alpha and beta evaluated for one epoch, computed once and held constant
/// for the whole epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSchedule {
    pub epoch: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl EpochSchedule {
    pub fn at(n: usize, params: &ScheduleParams) -> Self {
        let alpha = adap_alpha(n, params);
        let beta = params.gamma + (1.0 - params.gamma) * alpha;
        EpochSchedule { epoch: n, alpha, beta }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ss_decay_starting_point_and_tail() {
        let a0 = ss_decay_alpha(0, 5.0).unwrap();
        assert!((a0 - 5.0 / 6.0).abs() < 1e-15);
        let far = ss_decay_alpha(500, 5.0).unwrap();
        assert!(far < 1e-8 && far > 0.0);
    }

    #[test]
    fn ss_decay_matches_direct_formula_at_25() {
        let have = ss_decay_alpha(25, 5.0).unwrap();
        let want = 5.0f64 / (5.0 + (25.0f64 / 5.0).exp());
        assert_eq!(have, want);
        assert!((have - 0.032591).abs() < 1e-6);
    }

    #[test]
    fn ss_decay_rejects_small_k() {
        assert!(ss_decay_alpha(3, 0.5).is_err());
    }

    #[test]
    fn adap_alpha_figure_constants() {
        let p = ScheduleParams::default();
        let at_w = adap_alpha(32, &p);
        assert_eq!(at_w, 1.0 / 6.0);

        let start = adap_alpha(0, &p);
        assert!(start > 0.0 && start < 1e-3);
        assert!((start - 3.323e-4).abs() < 5e-7);

        let late = adap_alpha(64, &p);
        assert!((late - 0.9918).abs() < 5e-5);
    }

    #[test]
    fn adap_beta_floor_ceiling_and_midpoint() {
        assert_eq!(adap_beta(0.0, 0.9).unwrap(), 0.9);
        assert_eq!(adap_beta(1.0, 0.9).unwrap(), 1.0);
        let mid = adap_beta(1.0 / 6.0, 0.9).unwrap();
        assert!((mid - (0.9 + 0.1 / 6.0)).abs() < 1e-15);
        assert!(adap_beta(1.5, 0.9).is_err());
        assert!(adap_beta(0.5, 1.0).is_err());
    }

    #[test]
    fn epoch_schedule_ties_beta_to_alpha_exactly() {
        let p = ScheduleParams::new(7.0, 10, 0.85).unwrap();
        for n in 0..100 {
            let s = EpochSchedule::at(n, &p);
            assert_eq!(s.beta, p.gamma + (1.0 - p.gamma) * s.alpha);
            assert!(s.beta >= p.gamma);
        }
    }

    #[test]
    fn params_validation() {
        assert!(ScheduleParams::new(0.9, 0, 0.5).is_err());
        assert!(ScheduleParams::new(5.0, 0, 1.0).is_err());
        assert!(ScheduleParams::new(1.0, 0, 0.0).is_ok());
    }

    proptest! {
        #[test]
        fn adap_alpha_strictly_increases(k in 1.0f64..20.0, w in 0usize..100) {
            let p = ScheduleParams::new(k, w, 0.9).unwrap();
            let mut prev = adap_alpha(0, &p);
            prop_assert!(prev > 0.0 && prev < 1.0);
            for n in 1..=200 {
                let cur = adap_alpha(n, &p);
                // Strict while the curve is resolvable in f64; within an ulp
                // of 1.0 it plateaus and non-decreasing is all that holds.
                if prev < 1.0 - 1e-12 {
                    prop_assert!(cur > prev, "not increasing at n={} (k={}, w={})", n, k, w);
                } else {
                    prop_assert!(cur >= prev);
                }
                prop_assert!(cur <= 1.0);
                prev = cur;
            }
        }

        #[test]
        fn ss_decay_strictly_decreases(k in 1.0f64..20.0) {
            let mut prev = ss_decay_alpha(0, k).unwrap();
            prop_assert!(prev <= k / (k + 1.0) + 1e-15);
            for n in 1..=200 {
                let cur = ss_decay_alpha(n, k).unwrap();
                prop_assert!(cur < prev);
                prop_assert!(cur > 0.0);
                prev = cur;
            }
        }

        #[test]
        fn zero_warmup_adaptive_complements_decay(n in 0usize..200, k in 1.0f64..20.0) {
            let p = ScheduleParams::new(k, 0, 0.9).unwrap();
            let total = ss_decay_alpha(n, k).unwrap() + adap_alpha(n, &p);
            prop_assert!((total - 1.0).abs() < 1e-15, "sum {}", total);
        }

        #[test]
        fn beta_monotone_in_alpha_and_floored(a1 in 0.0f64..1.0, a2 in 0.0f64..1.0, gamma in 0.0f64..0.999) {
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let b_lo = adap_beta(lo, gamma).unwrap();
            let b_hi = adap_beta(hi, gamma).unwrap();
            prop_assert!(b_lo <= b_hi);
            prop_assert!(b_lo >= gamma);
        }
    }
}
