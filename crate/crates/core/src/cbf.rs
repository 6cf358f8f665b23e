//! Steering safety filter built on a barrier function over the LiDAR
//! clearance `h = d_min - d_safe`.
//!
//! The barrier condition `Lf + Lg·δ + α·h ≥ 0` is linear in the steering
//! angle, so the minimal-deviation projection is a one-dimensional QP with
//! a closed-form solution.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::lidar::Scan;
use crate::sim::vehicle::MAX_STEER;

/// Below this |Lg| the constraint is treated as independent of steering.
pub const DEGENERATE_GAIN: f64 = 1e-6;

/// Slack allowed by [`certify_step`] for finite-difference noise.
pub const CERT_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CbfParams {
    /// Decay rate toward the safe-set boundary, 1/s.
    pub alpha: f64,
    /// Clearance kept from the nearest return, m.
    pub d_safe: f64,
}

impl Default for CbfParams {
    fn default() -> Self {
        CbfParams {
            alpha: 2.0,
            d_safe: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SafetyContext {
    /// Shortest beam range, m.
    pub d_min: f64,
    /// Bearing of that beam measured clockwise from the heading (positive
    /// to the right), rad. With this orientation a positive steering angle
    /// (to the left) raises the clearance rate for a wall on the right.
    pub phi: f64,
    pub v: f64,
    pub wheelbase: f64,
    pub d_safe: f64,
    pub alpha: f64,
    pub steer_max: f64,
}

impl SafetyContext {
    pub fn from_scan(scan: &Scan, v: f64, wheelbase: f64, p: &CbfParams) -> SafetyContext {
        let sv = safety_value(scan, p.d_safe);
        SafetyContext {
            d_min: sv.d_min,
            phi: -sv.phi,
            v,
            wheelbase,
            d_safe: p.d_safe,
            alpha: p.alpha,
            steer_max: MAX_STEER,
        }
    }

    pub fn h(&self) -> f64 {
        self.d_min - self.d_safe
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SafetyValue {
    pub h: f64,
    /// Beam angle of the closest return, counter-clockwise positive.
    pub phi: f64,
    pub d_min: f64,
}

/// Clearance of the closest beam; equal ranges prefer the smallest |angle|,
/// then the left beam.
pub fn safety_value(scan: &Scan, d_safe: f64) -> SafetyValue {
    let (d, a) = (&scan.distances, &scan.angles);
    let mut j = 0;
    for i in 1..d.len() {
        if d[i] < d[j] || (d[i] == d[j] && (a[i].abs() < a[j].abs() || (a[i].abs() == a[j].abs() && a[i] > a[j]))) {
            j = i;
        }
    }
    SafetyValue {
        h: d[j] - d_safe,
        phi: a[j],
        d_min: d[j],
    }
}

/// Drift and steering terms of the clearance rate: `(-v cos φ, v/L · d sin φ)`.
pub fn lie_derivatives(ctx: &SafetyContext) -> (f64, f64) {
    let lf = -ctx.v * ctx.phi.cos();
    let lg = ctx.v / ctx.wheelbase * ctx.d_min * ctx.phi.sin();
    (lf, lg)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    pub steer: f64,
    pub feasible: bool,
    /// The barrier constraint moved the command or could not be met.
    pub active: bool,
    /// The raw command lay outside the steering box and was clamped first.
    pub raw_clamped: bool,
    pub h: f64,
    pub lf: f64,
    pub lg: f64,
    /// Wall-clock solve time, s.
    pub solve_time: f64,
}

impl FilterResult {
    /// `Lf + Lg·δ* + α·h`.
    pub fn residual(&self, alpha: f64) -> f64 {
        self.lf + self.lg * self.steer + alpha * self.h
    }
}

/// Closest steering angle to `raw` that satisfies the barrier condition.
///
/// With `A = Lg` and `B = -Lf - α·h` the condition reads `A·δ ≥ B`. When no
/// angle in the steering box satisfies it, the endpoint that maximizes `A·δ`
/// is returned with `feasible = false`.
pub fn filter_steering(raw: f64, ctx: &SafetyContext) -> Result<FilterResult> {
    let start = Instant::now();
    let inputs = [raw, ctx.d_min, ctx.phi, ctx.v, ctx.wheelbase, ctx.d_safe, ctx.alpha, ctx.steer_max];
    if inputs.iter().any(|x| !x.is_finite()) {
        return Err(Error::Contract(format!("non-finite filter input: raw={raw}, {ctx:?}")));
    }
    let m = ctx.steer_max;
    let clamped = raw.clamp(-m, m);
    let h = ctx.h();
    let (lf, lg) = lie_derivatives(ctx);
    let (a, b) = (lg, -lf - ctx.alpha * h);

    let (steer, feasible) = if a > DEGENERATE_GAIN {
        let lo = (b / a).max(-m);
        if lo > m {
            (m, false)
        } else {
            (clamped.max(lo), true)
        }
    } else if a < -DEGENERATE_GAIN {
        let hi = (b / a).min(m);
        if hi < -m {
            (-m, false)
        } else {
            (clamped.min(hi), true)
        }
    } else {
        (clamped, b <= 0.0)
    };
    let solve_time = start.elapsed().as_secs_f64();
    Ok(FilterResult {
        steer,
        feasible,
        active: !feasible || steer != clamped,
        raw_clamped: clamped != raw,
        h,
        lf,
        lg,
        solve_time,
    })
}

/// Discrete check of `ḣ + α·h ≥ 0` between two consecutive steps.
pub fn certify_step(h_before: f64, h_after: f64, dt: f64, alpha: f64) -> bool {
    (h_after - h_before) / dt + alpha * h_before >= -CERT_TOL
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn ctx(d_min: f64, phi: f64, v: f64) -> SafetyContext {
        SafetyContext {
            d_min,
            phi,
            v,
            wheelbase: 0.33,
            d_safe: 0.1,
            alpha: 2.0,
            steer_max: MAX_STEER,
        }
    }

    #[test]
    fn constant_scan_safety_value() {
        let s = Scan::new(vec![5.0; 1080], 30.0).unwrap();
        let sv = safety_value(&s, 0.1);
        assert!((sv.h - 4.9).abs() < 1e-15);
        // beams 539 and 540 straddle zero; the left one wins the tie
        assert_eq!(sv.phi, s.angles[539]);
        assert!(sv.phi > 0.0);
    }

    #[test]
    fn already_unsafe_beam() {
        let mut d = vec![5.0; 5];
        d[1] = 0.05; // +67.5° in a 5-beam scan
        let s = Scan::new(d, 30.0).unwrap();
        let sv = safety_value(&s, 0.1);
        assert!((sv.h + 0.05).abs() < 1e-15);
        assert_eq!(sv.phi, s.angles[1]);
    }

    #[test]
    fn close_left_wall_pushes_steering_right() {
        let mut d = vec![5.0; 5];
        d[1] = 0.3;
        let s = Scan::new(d, 30.0).unwrap();
        let c = SafetyContext::from_scan(&s, 3.0, 0.33, &CbfParams::default());
        assert_eq!(c.phi, -s.angles[1]);
        let r = filter_steering(0.3, &c).unwrap();
        assert!(r.active && r.feasible);
        assert!(r.steer < 0.3);
    }

    #[test]
    fn lie_derivative_cases() {
        assert_eq!(lie_derivatives(&ctx(1.0, 0.0, 3.0)), (-3.0, 0.0));
        let (lf, lg) = lie_derivatives(&ctx(1.0, FRAC_PI_2, 2.0));
        assert!(lf.abs() < 1e-15);
        assert!((lg - 2.0 / 0.33).abs() < 1e-12);
        assert!((lg - 6.0606).abs() < 1e-4);
        let (lf, lg) = lie_derivatives(&ctx(1.0, 0.7, 0.0));
        assert_eq!((lf.abs(), lg), (0.0, 0.0));
    }

    #[test]
    fn inactive_when_clear() {
        let r = filter_steering(0.2, &ctx(10.0, 0.3, 2.0)).unwrap();
        assert_eq!(r.steer, 0.2);
        assert!(r.feasible && !r.active && !r.raw_clamped);
    }

    #[test]
    fn projects_onto_lower_bound() {
        // obstacle ahead-left at 2 m, driving at 5 m/s: constraint is δ ≥ ~0.109
        let c = ctx(2.0, 0.3, 5.0);
        let want = (5.0 * 0.3f64.cos() - 2.0 * 1.9) / (5.0 / 0.33 * 2.0 * 0.3f64.sin());
        assert!(want > 0.1 && want < 0.12);
        let r = filter_steering(0.0, &c).unwrap();
        assert!(r.feasible && r.active);
        assert!((r.steer - want).abs() < 1e-12);
        assert!(r.residual(c.alpha) >= -1e-9);
        // a raw command already above the bound is untouched
        let r = filter_steering(0.3, &c).unwrap();
        assert_eq!(r.steer, 0.3);
        assert!(!r.active);
    }

    #[test]
    fn infeasible_takes_best_endpoint() {
        let mut c = ctx(0.05, FRAC_PI_2, 2.0);
        c.alpha = 100.0;
        let r = filter_steering(0.2, &c).unwrap();
        assert!(!r.feasible);
        assert_eq!(r.steer, MAX_STEER);
    }

    #[test]
    fn degenerate_keeps_raw() {
        let c = ctx(0.05, 0.0, 3.0);
        let r = filter_steering(0.3, &c).unwrap();
        assert!(!r.feasible);
        assert_eq!(r.steer, 0.3);
        let r = filter_steering(0.9, &ctx(5.0, 0.0, 3.0)).unwrap();
        assert!(r.feasible && r.raw_clamped);
        assert_eq!(r.steer, MAX_STEER);
    }

    #[test]
    fn non_finite_is_rejected() {
        assert!(filter_steering(f64::NAN, &ctx(1.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn certificate_arithmetic() {
        assert!(certify_step(1.0, 1.0, 0.005, 2.0));
        assert!(!certify_step(1.0, 0.5, 0.005, 2.0));
        // exactly on the boundary: ḣ = -α·h
        assert!(certify_step(1.0, 1.0 - 0.005 * 2.0, 0.005, 2.0));
    }
}
