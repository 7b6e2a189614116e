//! Stationary isotropic covariance kernels and their reverting functions.
//!
//! Each kernel is unscaled (κ(0) = 1) and strictly decreasing in distance,
//! so it has a well-defined inverse on (0, 1]: the *reverting function*
//! that maps an inferred latent value back to a distance. SE and RQ invert
//! in closed form; Matérn 3/2 is inverted by bracketed bisection.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default RQ shape. Large α keeps the reverting exponent o^(-1/α) clear of
/// machine precision while staying close to SE behaviour.
pub const DEFAULT_RQ_ALPHA: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelKind {
    #[serde(rename = "se", alias = "squared_exponential")]
    SquaredExponential,
    #[serde(rename = "rq", alias = "rational_quadratic")]
    RationalQuadratic,
    #[serde(rename = "matern32", alias = "matern_32")]
    Matern32,
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            KernelKind::SquaredExponential => "se",
            KernelKind::RationalQuadratic => "rq",
            KernelKind::Matern32 => "matern32",
        };
        f.write_str(s)
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "se" | "squared_exponential" => Ok(KernelKind::SquaredExponential),
            "rq" | "rational_quadratic" => Ok(KernelKind::RationalQuadratic),
            "matern32" | "matern_32" => Ok(KernelKind::Matern32),
            other => Err(Error::invalid(format!(
                "unknown kernel kind {other:?} (expected se, rq or matern32)"
            ))),
        }
    }
}

/// Isotropic covariance κ(d) with lengthscale `l` and, for RQ, shape `α`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelModel {
    pub kind: KernelKind,
    pub lengthscale: f64,
    #[serde(default = "default_rq_alpha")]
    pub rq_alpha: f64,
}

fn default_rq_alpha() -> f64 {
    DEFAULT_RQ_ALPHA
}

impl KernelModel {
    pub fn new(kind: KernelKind, lengthscale: f64) -> Result<Self> {
        Self::with_alpha(kind, lengthscale, DEFAULT_RQ_ALPHA)
    }

    pub fn with_alpha(kind: KernelKind, lengthscale: f64, rq_alpha: f64) -> Result<Self> {
        let k = KernelModel { kind, lengthscale, rq_alpha };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lengthscale.is_finite() && self.lengthscale > 0.0) {
            return Err(Error::invalid(format!(
                "kernel lengthscale must be finite and > 0, got {}",
                self.lengthscale
            )));
        }
        if !(self.rq_alpha.is_finite() && self.rq_alpha > 0.0) {
            return Err(Error::invalid(format!(
                "rq_alpha must be finite and > 0, got {}",
                self.rq_alpha
            )));
        }
        Ok(())
    }

    /// κ(d). Exactly 1 at d = 0; may underflow to 0 far beyond the
    /// lengthscale (SE past ~38 l), which downstream reports as a
    /// field-not-positive failure rather than inverting garbage.
    pub fn eval(&self, d: f64) -> Result<f64> {
        check_distance(d)?;
        Ok(self.eval_raw(d))
    }

    /// dκ/dd, analytic. Zero at d = 0 for every kind.
    pub fn derivative(&self, d: f64) -> Result<f64> {
        check_distance(d)?;
        Ok(self.derivative_raw(d))
    }

    pub(crate) fn eval_raw(&self, d: f64) -> f64 {
        let l = self.lengthscale;
        match self.kind {
            KernelKind::SquaredExponential => {
                let z = d / l;
                (-0.5 * z * z).exp()
            }
            KernelKind::RationalQuadratic => {
                let a = self.rq_alpha;
                let base = 1.0 + d * d / (2.0 * a * l * l);
                rq_power(base, a)
            }
            KernelKind::Matern32 => {
                let s = SQRT_3 * d / l;
                (1.0 + s) * (-s).exp()
            }
        }
    }

    pub(crate) fn derivative_raw(&self, d: f64) -> f64 {
        let l = self.lengthscale;
        let l2 = l * l;
        match self.kind {
            KernelKind::SquaredExponential => {
                let z = d / l;
                -(d / l2) * (-0.5 * z * z).exp()
            }
            KernelKind::RationalQuadratic => {
                let a = self.rq_alpha;
                let base = 1.0 + d * d / (2.0 * a * l2);
                -(d / l2) * rq_power(base, a + 1.0)
            }
            KernelKind::Matern32 => {
                let s = SQRT_3 * d / l;
                -(3.0 * d / l2) * (-s).exp()
            }
        }
    }

    /// Inverse of `eval` on (0, 1]: the distance d with κ(d) = o.
    ///
    /// Non-positive `o` is the far-field failure case and reported as such;
    /// `o` > 1 must be capped by the caller before inverting.
    pub fn revert(&self, o: f64) -> Result<f64> {
        if o.is_nan() {
            return Err(Error::invalid("reverting a NaN latent value"));
        }
        if o <= 0.0 {
            return Err(Error::FieldNotPositive { value: o });
        }
        if o > 1.0 {
            return Err(Error::invalid(format!(
                "latent value {o} > 1 must be capped before reverting"
            )));
        }
        if o == 1.0 {
            return Ok(0.0);
        }
        let l = self.lengthscale;
        Ok(match self.kind {
            KernelKind::SquaredExponential => l * (-2.0 * o.ln()).sqrt(),
            KernelKind::RationalQuadratic => {
                let a = self.rq_alpha;
                let u = -o.ln() / a;
                if u > 600.0 {
                    // e^u - 1 would overflow; relative error of dropping the
                    // -1 is below e^-600.
                    l * (2.0 * a).sqrt() * (0.5 * u).exp()
                } else {
                    l * (2.0 * a * u.exp_m1()).sqrt()
                }
            }
            KernelKind::Matern32 => self.revert_matern(o),
        })
    }

    /// Prior variance of each latent-gradient component, -κ''(0).
    pub fn grad_prior_variance(&self) -> f64 {
        let l2 = self.lengthscale * self.lengthscale;
        match self.kind {
            KernelKind::SquaredExponential | KernelKind::RationalQuadratic => 1.0 / l2,
            KernelKind::Matern32 => 3.0 / l2,
        }
    }

    fn revert_matern(&self, o: f64) -> f64 {
        let l = self.lengthscale;
        let mut lo = 0.0_f64;
        let mut hi = 5.0 * l;
        while self.eval_raw(hi) > o {
            lo = hi;
            hi *= 2.0;
        }
        // Interval tolerance well under the 1e-9 the round-trip guarantee
        // needs, and still only ~50 kernel evaluations.
        loop {
            let mid = 0.5 * (lo + hi);
            if hi - lo <= f64::max(1e-12 * l, 1e-13 * mid) || mid <= lo || mid >= hi {
                return mid;
            }
            if self.eval_raw(mid) > o {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
}

const SQRT_3: f64 = 1.732_050_807_568_877_2;

/// base^(-a), taking the exact integer-exponent path when α is a small whole
/// number (the Gram assembly hot path).
fn rq_power(base: f64, a: f64) -> f64 {
    if a.fract() == 0.0 && a <= 512.0 {
        base.powi(-(a as i32))
    } else {
        base.powf(-a)
    }
}

fn check_distance(d: f64) -> Result<()> {
    if !d.is_finite() || d < 0.0 {
        return Err(Error::invalid(format!("distance must be finite and >= 0, got {d}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    fn se(l: f64) -> KernelModel {
        KernelModel::new(KernelKind::SquaredExponential, l).unwrap()
    }
    fn rq(l: f64, a: f64) -> KernelModel {
        KernelModel::with_alpha(KernelKind::RationalQuadratic, l, a).unwrap()
    }
    fn m32(l: f64) -> KernelModel {
        KernelModel::new(KernelKind::Matern32, l).unwrap()
    }

    #[test]
    fn eval_is_one_at_zero_for_all_kinds() {
        for k in [se(0.7), rq(0.7, 1.0), rq(0.7, 100.0), m32(0.7)] {
            assert_eq!(k.eval(0.0).unwrap(), 1.0);
        }
    }

    #[test]
    fn eval_matches_closed_forms_at_unit_distance() {
        assert_abs_diff_eq!(se(1.0).eval(1.0).unwrap(), 0.6065306597126334, epsilon = 1e-15);
        assert_abs_diff_eq!(rq(1.0, 1.0).eval(1.0).unwrap(), 0.6666666666666666, epsilon = 1e-15);
        assert_abs_diff_eq!(m32(1.0).eval(1.0).unwrap(), 0.4833577245965077, epsilon = 1e-15);
    }

    #[test]
    fn derivative_is_zero_at_origin() {
        for k in [se(0.3), rq(0.3, 2.5), m32(0.3)] {
            assert_eq!(k.derivative(0.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn derivative_matches_closed_forms_at_unit_distance() {
        assert_abs_diff_eq!(se(1.0).derivative(1.0).unwrap(), -0.6065306597126334, epsilon = 1e-15);
        // -d/l^2 * (1 + 1/2)^-2 = -4/9
        assert_abs_diff_eq!(
            rq(1.0, 1.0).derivative(1.0).unwrap(),
            -0.4444444444444444,
            epsilon = 1e-15
        );
        // -3 e^(-sqrt(3)), cross-checked against central differences
        assert_abs_diff_eq!(m32(1.0).derivative(1.0).unwrap(), -0.5307636189532927, epsilon = 1e-12);
    }

    #[test]
    fn revert_inverts_the_unit_distance_examples() {
        assert_abs_diff_eq!(se(1.0).revert(0.6065306597126334).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rq(1.0, 1.0).revert(2.0 / 3.0).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m32(1.0).revert(0.4833577245965077).unwrap(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn revert_of_one_is_exactly_zero() {
        for k in [se(0.06), rq(0.06, 100.0), m32(0.06)] {
            assert_eq!(k.revert(1.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn revert_rejects_out_of_domain_values() {
        let k = se(1.0);
        assert!(matches!(k.revert(0.0), Err(Error::FieldNotPositive { .. })));
        assert!(matches!(k.revert(-0.25), Err(Error::FieldNotPositive { .. })));
        assert!(matches!(k.revert(1.0 + 1e-9), Err(Error::InvalidArgument(_))));
        assert!(k.revert(f64::NAN).is_err());
    }

    #[test]
    fn eval_rejects_bad_distances() {
        let k = m32(1.0);
        assert!(k.eval(-1e-12).is_err());
        assert!(k.eval(f64::NAN).is_err());
        assert!(k.eval(f64::INFINITY).is_err());
        assert!(k.derivative(-1.0).is_err());
    }

    #[test]
    fn constructor_rejects_bad_hyperparameters() {
        assert!(KernelModel::new(KernelKind::SquaredExponential, 0.0).is_err());
        assert!(KernelModel::new(KernelKind::SquaredExponential, -1.0).is_err());
        assert!(KernelModel::with_alpha(KernelKind::RationalQuadratic, 1.0, 0.0).is_err());
    }

    #[test]
    fn grad_prior_variance_per_kind() {
        assert_abs_diff_eq!(se(2.0).grad_prior_variance(), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(rq(2.0, 7.0).grad_prior_variance(), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(m32(2.0).grad_prior_variance(), 0.75, epsilon = 1e-15);
    }

    #[test]
    fn rq_integer_alpha_path_agrees_with_powf() {
        let k = rq(0.06, 100.0);
        for i in 0..200 {
            let d = 0.002 * i as f64;
            let base = 1.0 + d * d / (2.0 * 100.0 * 0.06 * 0.06);
            assert_relative_eq!(k.eval(d).unwrap(), base.powf(-100.0), max_relative = 1e-13);
        }
    }

    #[test]
    fn rq_revert_survives_the_deep_tail() {
        let k = rq(1.0, 1.0);
        let d = 1.414213562373095e140;
        let o = k.eval(d).unwrap();
        assert!(o > 0.0);
        assert_relative_eq!(k.revert(o).unwrap(), d, max_relative = 1e-8);
    }

    #[test]
    fn se_round_trip_deep_into_the_underflow_region() {
        let k = se(1.0);
        // kappa ~ 1e-297 here, close to the smallest normal double
        let d = 37.0;
        let o = k.eval(d).unwrap();
        assert!(o > 1e-300);
        assert_abs_diff_eq!(k.revert(o).unwrap(), d, epsilon = 1e-9);
    }

    #[test]
    fn matern_round_trip_far_field() {
        let k = m32(0.06);
        for d in [0.3, 1.0, 3.0, 10.0, 20.0] {
            let o = k.eval(d).unwrap();
            let r = k.revert(o).unwrap();
            assert_abs_diff_eq!(r, d, epsilon = 1e-6 * d.max(0.06));
        }
    }

    #[test]
    fn eval_strictly_decreasing() {
        for k in [se(0.5), rq(0.5, 100.0), m32(0.5)] {
            let mut prev = k.eval(0.0).unwrap();
            for i in 1..=400 {
                let d = 0.02 * i as f64;
                let cur = k.eval(d).unwrap();
                assert!(cur < prev, "{:?} not decreasing at d={d}", k.kind);
                prev = cur;
            }
        }
    }

    proptest! {
        #[test]
        fn round_trip_se_rq(z in 0.0_f64..20.0, l in 0.01_f64..10.0) {
            let d = z * l;
            for k in [se(l), rq(l, 100.0), rq(l, 1.5)] {
                let o = k.eval(d).unwrap();
                let r = k.revert(o).unwrap();
                prop_assert!((r - d).abs() <= 1e-8 * d.max(l));
            }
        }

        #[test]
        fn round_trip_matern(z in 0.0_f64..20.0, l in 0.01_f64..10.0) {
            let d = z * l;
            let k = m32(l);
            let o = k.eval(d).unwrap();
            let r = k.revert(o).unwrap();
            prop_assert!((r - d).abs() <= 1e-6 * d.max(l));
        }

        #[test]
        fn derivative_matches_central_differences(z in 1e-3_f64..20.0, l in 0.01_f64..10.0) {
            let d = z * l;
            let h = 1e-6 * l;
            for k in [se(l), rq(l, 100.0), m32(l)] {
                let fd = (k.eval(d + h).unwrap() - k.eval((d - h).max(0.0)).unwrap()) / (2.0 * h);
                let an = k.derivative(d).unwrap();
                // far tails underflow the FD quotient first; skip once the
                // kernel itself is below noise
                if k.eval(d).unwrap() > 1e-12 {
                    prop_assert!((an - fd).abs() <= 1e-5 * an.abs().max(1e-12));
                }
            }
        }
    }
}
