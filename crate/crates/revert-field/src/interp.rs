//! Interpolation over uniformly gridded samples: linear lookup for envelope
//! queries and a C1 monotonicity-preserving cubic for least-squares residuals
//! that need a smooth derivative.

use crate::error::{Error, Result};

/// Linearly interpolates `values` sampled at `x0 + i*step`, clamping to the
/// end values outside the grid.
pub fn lerp_uniform(x0: f64, step: f64, values: &[f64], x: f64) -> f64 {
    debug_assert!(step > 0.0);
    debug_assert!(!values.is_empty());
    let t = (x - x0) / step;
    if t <= 0.0 {
        return values[0];
    }
    let last = values.len() - 1;
    if t >= last as f64 {
        return values[last];
    }
    let i = t as usize;
    let f = t - i as f64;
    values[i] + f * (values[i + 1] - values[i])
}

/// Piecewise-cubic Hermite interpolant with Fritsch-Carlson tangents on a
/// uniform grid. The harmonic-mean tangent rule keeps every piece inside the
/// Fritsch-Carlson monotonicity region, so data without interior wiggle maps
/// to an interpolant without overshoot, and the result is C1 everywhere.
/// Evaluation clamps to the end values outside the grid.
#[derive(Clone, Debug)]
pub struct MonotoneCubic {
    x0: f64,
    step: f64,
    values: Vec<f64>,
    tangents: Vec<f64>,
}

impl MonotoneCubic {
    pub fn new(x0: f64, step: f64, values: Vec<f64>) -> Result<Self> {
        if !step.is_finite() || step <= 0.0 {
            return Err(Error::invalid("interpolation step must be positive and finite"));
        }
        if values.len() < 2 {
            return Err(Error::invalid("interpolation needs at least two samples"));
        }
        if !x0.is_finite() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("interpolation samples must be finite"));
        }
        let n = values.len();
        let secants: Vec<f64> = values.windows(2).map(|w| (w[1] - w[0]) / step).collect();
        let mut tangents = vec![0.0; n];
        tangents[0] = secants[0];
        tangents[n - 1] = secants[n - 2];
        for i in 1..n - 1 {
            // Zero tangent at local extrema and flats; harmonic mean keeps
            // tangent/secant ratios <= 2, inside the monotone region.
            if secants[i - 1] * secants[i] > 0.0 {
                tangents[i] = 2.0 * secants[i - 1] * secants[i] / (secants[i - 1] + secants[i]);
            }
        }
        Ok(MonotoneCubic { x0, step, values, tangents })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let t = (x - self.x0) / self.step;
        if t <= 0.0 {
            return self.values[0];
        }
        let last = self.values.len() - 1;
        if t >= last as f64 {
            return self.values[last];
        }
        let i = t as usize;
        let u = t - i as f64;
        let u2 = u * u;
        let h00 = (1.0 + 2.0 * u) * (1.0 - u) * (1.0 - u);
        let h10 = u * (1.0 - u) * (1.0 - u);
        let h01 = u2 * (3.0 - 2.0 * u);
        let h11 = u2 * (u - 1.0);
        self.values[i] * h00
            + self.step * self.tangents[i] * h10
            + self.values[i + 1] * h01
            + self.step * self.tangents[i + 1] * h11
    }
}
