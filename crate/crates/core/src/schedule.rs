//! Interpolation schedules, path algebra, and the velocity/score conversion.
//!
//! The reference path interpolates data (t=0) and noise (t=1) as
//! `x_t = alpha(t)*x0 + beta(t)*x1`. A velocity field and the score of the
//! induced marginals are related linearly at every (x, t):
//!
//! ```text
//! v = (alpha_dot/alpha) * x + beta * ((alpha_dot/alpha) * beta - beta_dot) * s
//! ```
//!
//! which this module applies in both directions.

use crate::error::{Error, Result};
use crate::types::Point;

/// Threshold below which the score coefficient is treated as singular.
const SINGULAR_COEFF: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// alpha = 1 - t, beta = t.
    RectifiedLinear,
    /// alpha = cos(pi t / 2), beta = sin(pi t / 2); alpha^2 + beta^2 = 1.
    VariancePreserving,
}

/// Interpolation coefficient pair with derivatives. Data sits at t=0
/// (alpha(0)=1, beta(0)=0) and noise at t=1 (alpha(1)=0, beta(1)=1).
#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub kind: ScheduleKind,
    /// Coefficient evaluation clamps t into [eps_clamp, 1 - eps_clamp].
    pub eps_clamp: f64,
}

/// Coefficients of the linear velocity/score relation at a clamped time.
#[derive(Debug, Clone, Copy)]
pub struct ConversionCoeffs {
    /// alpha_dot / alpha, multiplies x.
    pub drift: f64,
    /// beta * ((alpha_dot/alpha) * beta - beta_dot), multiplies the score.
    pub score: f64,
}

impl Schedule {
    pub fn new(kind: ScheduleKind, eps_clamp: f64) -> Result<Self> {
        if !(eps_clamp > 0.0 && eps_clamp < 0.1) {
            return Err(Error::invalid(
                "schedule",
                format!("eps_clamp must lie in (0, 0.1), got {eps_clamp}"),
            ));
        }
        Ok(Schedule { kind, eps_clamp })
    }

    pub fn rectified_linear() -> Self {
        Schedule { kind: ScheduleKind::RectifiedLinear, eps_clamp: 1e-3 }
    }

    pub fn variance_preserving() -> Self {
        Schedule { kind: ScheduleKind::VariancePreserving, eps_clamp: 1e-3 }
    }

    pub fn alpha(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::RectifiedLinear => 1.0 - t,
            ScheduleKind::VariancePreserving => (std::f64::consts::FRAC_PI_2 * t).cos(),
        }
    }

    pub fn beta(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::RectifiedLinear => t,
            ScheduleKind::VariancePreserving => (std::f64::consts::FRAC_PI_2 * t).sin(),
        }
    }

    pub fn alpha_dot(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::RectifiedLinear => -1.0,
            ScheduleKind::VariancePreserving => {
                -std::f64::consts::FRAC_PI_2 * (std::f64::consts::FRAC_PI_2 * t).sin()
            }
        }
    }

    pub fn beta_dot(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::RectifiedLinear => 1.0,
            ScheduleKind::VariancePreserving => {
                std::f64::consts::FRAC_PI_2 * (std::f64::consts::FRAC_PI_2 * t).cos()
            }
        }
    }

    /// t clamped into [eps_clamp, 1 - eps_clamp] for coefficient evaluation.
    pub fn clamp_t(&self, t: f64) -> f64 {
        t.clamp(self.eps_clamp, 1.0 - self.eps_clamp)
    }

    /// Coefficients of the velocity/score relation at (clamped) time t.
    ///
    /// Errors only on exact coefficient degeneracy (|score coeff| < 1e-12),
    /// which the clamp keeps both built-in schedules away from.
    pub fn conversion_coeffs(&self, t: f64) -> Result<ConversionCoeffs> {
        let tc = self.clamp_t(t);
        let alpha = self.alpha(tc);
        let beta = self.beta(tc);
        let drift = self.alpha_dot(tc) / alpha;
        let score = beta * (drift * beta - self.beta_dot(tc));
        if score.abs() < SINGULAR_COEFF {
            return Err(Error::SingularSchedule { t: tc, coeff: score });
        }
        Ok(ConversionCoeffs { drift, score })
    }
}

fn check_dims(x0: &Point, x1: &Point) -> Result<()> {
    if x0.dim() != x1.dim() {
        return Err(Error::DimensionMismatch { expected: x0.dim(), got: x1.dim() });
    }
    Ok(())
}

/// Point on the interpolation path: beta(t)*x1 + alpha(t)*x0.
pub fn interpolate(x0: &Point, x1: &Point, t: f64, sched: &Schedule) -> Result<Point> {
    check_dims(x0, x1)?;
    let (a, b) = (sched.alpha(t), sched.beta(t));
    let coords = x0
        .coords()
        .iter()
        .zip(x1.coords())
        .map(|(&c0, &c1)| a * c0 + b * c1)
        .collect();
    Ok(Point::from_parts(coords))
}

/// Time derivative of the path: beta_dot(t)*x1 + alpha_dot(t)*x0.
pub fn target_velocity(x0: &Point, x1: &Point, t: f64, sched: &Schedule) -> Result<Point> {
    check_dims(x0, x1)?;
    let (ad, bd) = (sched.alpha_dot(t), sched.beta_dot(t));
    let coords = x0
        .coords()
        .iter()
        .zip(x1.coords())
        .map(|(&c0, &c1)| ad * c0 + bd * c1)
        .collect();
    Ok(Point::from_parts(coords))
}

/// Solves the velocity/score relation for the score.
pub fn velocity_to_score(v: &Point, x: &Point, t: f64, sched: &Schedule) -> Result<Point> {
    check_dims(v, x)?;
    let c = sched.conversion_coeffs(t)?;
    let coords = v
        .coords()
        .iter()
        .zip(x.coords())
        .map(|(&vi, &xi)| (vi - c.drift * xi) / c.score)
        .collect();
    Ok(Point::from_parts(coords))
}

/// Forward direction of the velocity/score relation.
pub fn score_to_velocity(s: &Point, x: &Point, t: f64, sched: &Schedule) -> Result<Point> {
    check_dims(s, x)?;
    let c = sched.conversion_coeffs(t)?;
    let coords = s
        .coords()
        .iter()
        .zip(x.coords())
        .map(|(&si, &xi)| c.drift * xi + c.score * si)
        .collect();
    Ok(Point::from_parts(coords))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(x: f64) -> Point {
        Point::scalar(x).unwrap()
    }

    #[test]
    fn rectified_boundaries() {
        let s = Schedule::rectified_linear();
        assert_eq!(s.alpha(0.0), 1.0);
        assert_eq!(s.beta(0.0), 0.0);
        assert_eq!(s.alpha(1.0), 0.0);
        assert_eq!(s.beta(1.0), 1.0);
    }

    #[test]
    fn vp_boundaries_and_unit_norm() {
        let s = Schedule::variance_preserving();
        assert!((s.alpha(0.0) - 1.0).abs() < 1e-15);
        assert!(s.beta(0.0).abs() < 1e-15);
        assert!(s.alpha(1.0).abs() < 1e-15);
        assert!((s.beta(1.0) - 1.0).abs() < 1e-15);
        for i in 0..=1000 {
            let t = i as f64 / 1000.0;
            let n = s.alpha(t).powi(2) + s.beta(t).powi(2);
            assert!((n - 1.0).abs() <= 1e-12, "norm {n} at t={t}");
        }
    }

    #[test]
    fn interpolate_boundaries_and_midpoint() {
        let s = Schedule::rectified_linear();
        assert_eq!(interpolate(&p(2.0), &p(0.0), 0.0, &s).unwrap().coords()[0], 2.0);
        assert_eq!(interpolate(&p(2.0), &p(0.0), 1.0, &s).unwrap().coords()[0], 0.0);
        assert_eq!(interpolate(&p(2.0), &p(-4.0), 0.5, &s).unwrap().coords()[0], -1.0);
    }

    #[test]
    fn target_velocity_rectified_is_displacement() {
        let s = Schedule::rectified_linear();
        for t in [0.0, 0.3, 0.9] {
            assert_eq!(target_velocity(&p(2.0), &p(0.0), t, &s).unwrap().coords()[0], -2.0);
            assert_eq!(target_velocity(&p(0.0), &p(3.0), t, &s).unwrap().coords()[0], 3.0);
            assert_eq!(target_velocity(&p(1.0), &p(1.0), t, &s).unwrap().coords()[0], 0.0);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let s = Schedule::rectified_linear();
        let a = Point::new(vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            interpolate(&a, &p(0.0), 0.5, &s),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(target_velocity(&a, &p(0.0), 0.5, &s).is_err());
        assert!(velocity_to_score(&a, &p(0.0), 0.5, &s).is_err());
    }

    #[test]
    fn zero_maps_to_zero() {
        let s = Schedule::rectified_linear();
        assert_eq!(velocity_to_score(&p(0.0), &p(0.0), 0.5, &s).unwrap().coords()[0], 0.0);
        assert_eq!(score_to_velocity(&p(0.0), &p(0.0), 0.3, &s).unwrap().coords()[0], 0.0);
    }

    // Hand-substituted coefficients at t=0.5 on the rectified schedule:
    // alpha=beta=0.5, alpha_dot=-1, beta_dot=1, so drift = -2 and the score
    // coefficient is 0.5*(-2*0.5 - 1) = -1. With x=1, v=-1 the score solves
    // to s = (-1 + 2)/(-1) = -1. The standard-normal closed-form pair below
    // (`gaussian_pair_converts`) pins the same coefficients independently.
    #[test]
    fn hand_worked_conversion_at_half() {
        let s = Schedule::rectified_linear();
        let c = s.conversion_coeffs(0.5).unwrap();
        assert!((c.drift + 2.0).abs() < 1e-15);
        assert!((c.score + 1.0).abs() < 1e-15);
        let score = velocity_to_score(&p(-1.0), &p(1.0), 0.5, &s).unwrap();
        assert!((score.coords()[0] + 1.0).abs() < 1e-12);
        let v = score_to_velocity(&p(-1.0), &p(1.0), 0.5, &s).unwrap();
        assert!((v.coords()[0] + 1.0).abs() < 1e-12);
    }

    /// For standard-normal data on the rectified path the t-marginal is
    /// N(0, (1-t)^2 + t^2), with score -x/var and velocity
    /// (alpha_dot*alpha + beta_dot*beta)/var * x. The conversion must map
    /// one onto the other.
    #[test]
    fn gaussian_pair_converts() {
        let sch = Schedule::rectified_linear();
        for i in 1..40 {
            let t = i as f64 / 40.0;
            let var = (1.0 - t).powi(2) + t * t;
            for &x in &[-2.0, -0.5, 0.7, 1.0, 3.0] {
                let score = -x / var;
                let vel = ((2.0 * t - 1.0) / var) * x;
                let got_v = score_to_velocity(&p(score), &p(x), t, &sch).unwrap();
                assert!((got_v.coords()[0] - vel).abs() <= 1e-8, "t={t} x={x}");
                let got_s = velocity_to_score(&p(vel), &p(x), t, &sch).unwrap();
                assert!((got_s.coords()[0] - score).abs() <= 1e-8, "t={t} x={x}");
            }
        }
    }

    #[test]
    fn round_trip_identity_on_grid() {
        for sch in [Schedule::rectified_linear(), Schedule::variance_preserving()] {
            for i in 0..=100 {
                let t = 0.001 + 0.998 * (i as f64 / 100.0);
                for &(x, v) in &[(0.3, -1.2), (-2.0, 0.4), (5.0, 5.0)] {
                    let s = velocity_to_score(&p(v), &p(x), t, &sch).unwrap();
                    let back = score_to_velocity(&s, &p(x), t, &sch).unwrap();
                    assert!((back.coords()[0] - v).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn eps_clamp_validation() {
        assert!(Schedule::new(ScheduleKind::RectifiedLinear, 0.0).is_err());
        assert!(Schedule::new(ScheduleKind::RectifiedLinear, 0.1).is_err());
        assert!(Schedule::new(ScheduleKind::RectifiedLinear, 1e-3).is_ok());
    }
}
