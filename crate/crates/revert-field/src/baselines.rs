//! Reference distance fields the benchmark compares against: the smooth
//! minimum, LogGPIS, and the exact rectangle field used as the
//! echolocation ground-truth oracle.

use crate::error::{Error, Result};
use crate::gp_field::{dist, LatentFieldModel, PointCloud};
use crate::kernels::{KernelKind, KernelModel};

/// Default smooth-minimum sharpness; negative so the weighted average
/// concentrates on the nearest point, far enough from zero to stay clear
/// of machine precision.
pub const DEFAULT_SMOOTHMIN_LAMBDA: f64 = -50.0;

/// Exponentially weighted soft minimum of the distances to the cloud,
/// Σ d_i e^(λ d_i) / Σ e^(λ d_i), computed with a max-shift so large
/// |λ|·d never underflows the whole sum.
pub fn smooth_min(cloud: &PointCloud, x: &[f64], lambda: f64) -> Result<f64> {
    if !(lambda.is_finite() && lambda < 0.0) {
        return Err(Error::invalid(format!("smooth-min lambda must be < 0, got {lambda}")));
    }
    if x.len() != cloud.dim() {
        return Err(Error::invalid("query dimension does not match the cloud"));
    }
    let mut t_max = f64::NEG_INFINITY;
    for p in cloud.iter() {
        t_max = t_max.max(lambda * dist(x, p));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for p in cloud.iter() {
        let d = dist(x, p);
        let w = (lambda * d - t_max).exp();
        num += d * w;
        den += w;
    }
    Ok(num / den)
}

/// Matérn-3/2 latent field read out as d = -(l/√3)·ln ô; a close-range
/// approximation of the reverting approach, kept as a faithful baseline.
#[derive(Clone, Debug)]
pub struct LogGpisModel {
    model: LatentFieldModel,
}

impl LogGpisModel {
    pub fn build(cloud: PointCloud, lengthscale: f64, sigma_n: f64) -> Result<Self> {
        let kernel = KernelModel::new(KernelKind::Matern32, lengthscale)?;
        Ok(LogGpisModel { model: LatentFieldModel::build(cloud, kernel, sigma_n)? })
    }

    pub fn from_model(model: LatentFieldModel) -> Result<Self> {
        if model.kernel().kind != KernelKind::Matern32 {
            return Err(Error::invalid("LogGPIS requires a Matérn 3/2 kernel"));
        }
        Ok(LogGpisModel { model })
    }

    pub fn model(&self) -> &LatentFieldModel {
        &self.model
    }

    /// Underestimates by exactly -(l/√3)·ln(1+√3d/l) in the single-
    /// observation case; slightly negative readings near the surface are
    /// the formula's own behaviour and are not clamped.
    pub fn distance(&self, x: &[f64]) -> Result<f64> {
        let o = self.model.latent_mean(x)?;
        if o <= 0.0 {
            return Err(Error::FieldNotPositive { value: o });
        }
        let l = self.model.kernel().lengthscale;
        Ok(-(l / SQRT_3) * o.ln())
    }
}

const SQRT_3: f64 = 1.732_050_807_568_877_2;

/// Axis-aligned plate with corners (0,0) and (width, height).
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct Rect {
    pub width: f64,
    pub height: f64,
}

impl Rect {
    pub fn new(width: f64, height: f64) -> Result<Self> {
        if !(width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite()) {
            return Err(Error::invalid(format!("rectangle sides must be positive, got {width}x{height}")));
        }
        Ok(Rect { width, height })
    }

    pub fn contains(&self, x: &[f64; 2]) -> bool {
        x[0] >= 0.0 && x[0] <= self.width && x[1] >= 0.0 && x[1] <= self.height
    }
}

/// Exact unsigned distance from `x` to the rectangle boundary, valid
/// inside and outside.
pub fn rect_distance(rect: &Rect, x: &[f64; 2]) -> f64 {
    let ex = (-x[0]).max(x[0] - rect.width).max(0.0);
    let ey = (-x[1]).max(x[1] - rect.height).max(0.0);
    if ex > 0.0 || ey > 0.0 {
        return ex.hypot(ey);
    }
    (x[0].min(rect.width - x[0])).min(x[1].min(rect.height - x[1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn smooth_min_single_point_is_exact() {
        let cloud = PointCloud::from_points2([[3.0, 0.0]]).unwrap();
        assert_eq!(smooth_min(&cloud, &[0.0, 0.0], -50.0).unwrap(), 3.0);
    }

    #[test]
    fn smooth_min_two_points_concentrates_on_the_nearest() {
        let cloud = PointCloud::from_points2([[1.0, 0.0], [2.0, 0.0]]).unwrap();
        let r = smooth_min(&cloud, &[0.0, 0.0], -50.0).unwrap();
        // 1 + e^-50 up to normalization, ~1e-22 above the true minimum
        assert!(r >= 1.0);
        assert_abs_diff_eq!(r, 1.0, epsilon = 1e-20);
    }

    #[test]
    fn smooth_min_equidistant_is_exact() {
        let cloud = PointCloud::from_points2([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(smooth_min(&cloud, &[0.0, 0.0], -50.0).unwrap(), 1.0);
    }

    #[test]
    fn smooth_min_upper_bounds_and_approaches_the_minimum() {
        let cloud =
            PointCloud::from_points2([[0.9, 0.1], [1.3, -0.4], [2.0, 0.3], [1.1, 0.2]]).unwrap();
        let x = [0.0, 0.0];
        let true_min = cloud.iter().map(|p| dist(&x, p)).fold(f64::INFINITY, f64::min);
        let mut prev_gap = f64::INFINITY;
        for lambda in [-10.0, -50.0, -200.0] {
            let sm = smooth_min(&cloud, &x, lambda).unwrap();
            assert!(sm >= true_min - 1e-9);
            let gap = sm - true_min;
            assert!(gap <= prev_gap + 1e-15, "gap grew at lambda={lambda}");
            prev_gap = gap;
        }
        assert!(prev_gap < 1e-9);
    }

    #[test]
    fn smooth_min_survives_huge_distances() {
        // unshifted e^(λd) would underflow to 0/0 here
        let cloud = PointCloud::from_points2([[100.0, 0.0], [101.0, 0.0]]).unwrap();
        let r = smooth_min(&cloud, &[0.0, 0.0], -50.0).unwrap();
        assert_abs_diff_eq!(r, 100.0, epsilon = 1e-9);
    }

    #[test]
    fn smooth_min_rejects_non_negative_lambda() {
        let cloud = PointCloud::from_points2([[1.0, 0.0]]).unwrap();
        assert!(smooth_min(&cloud, &[0.0, 0.0], 0.0).is_err());
        assert!(smooth_min(&cloud, &[0.0, 0.0], 7.0).is_err());
    }

    #[test]
    fn loggpis_is_zero_on_a_noiseless_observation() {
        let cloud = PointCloud::from_points2([[0.2, 0.4]]).unwrap();
        let m = LogGpisModel::build(cloud, 0.1, 0.0).unwrap();
        assert_abs_diff_eq!(m.distance(&[0.2, 0.4]).unwrap(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn loggpis_single_observation_error_law_frozen_value() {
        let cloud = PointCloud::from_points2([[0.0, 0.0]]).unwrap();
        let m = LogGpisModel::build(cloud, 0.1, 0.0).unwrap();
        let d = 0.2;
        let err = m.distance(&[d, 0.0]).unwrap() - d;
        // -(l/√3)·ln(1+√3 d/l) at d=0.2, l=0.1
        assert_abs_diff_eq!(err, -0.08637552556368315, epsilon = 1e-12);
    }

    #[test]
    fn loggpis_error_law_across_the_range() {
        let l = 0.1;
        let cloud = PointCloud::from_points2([[0.0, 0.0]]).unwrap();
        let m = LogGpisModel::build(cloud, l, 0.0).unwrap();
        for i in 0..=100 {
            let d = 10.0 * l * i as f64 / 100.0;
            let expected_err = -(l / SQRT_3) * (1.0 + SQRT_3 * d / l).ln();
            let err = m.distance(&[d, 0.0]).unwrap() - d;
            assert_abs_diff_eq!(err, expected_err, epsilon = 1e-9);
        }
    }

    #[test]
    fn loggpis_far_field_fails_not_positive() {
        let cloud = PointCloud::from_points2([[0.0, 0.0]]).unwrap();
        let m = LogGpisModel::build(cloud, 0.1, 0.0).unwrap();
        assert!(matches!(m.distance(&[50.0, 0.0]), Err(Error::FieldNotPositive { .. })));
    }

    #[test]
    fn loggpis_requires_matern() {
        let cloud = PointCloud::from_points2([[0.0, 0.0]]).unwrap();
        let se = KernelModel::new(KernelKind::SquaredExponential, 0.1).unwrap();
        let m = LatentFieldModel::build(cloud, se, 0.0).unwrap();
        assert!(LogGpisModel::from_model(m).is_err());
    }

    #[test]
    fn rect_distance_interior_cases() {
        let r = Rect::new(0.6, 0.45).unwrap();
        assert_abs_diff_eq!(rect_distance(&r, &[0.3, 0.225]), 0.225, epsilon = 1e-15);
        assert_abs_diff_eq!(rect_distance(&r, &[0.08, 0.2]), 0.08, epsilon = 1e-15);
        assert_eq!(rect_distance(&r, &[0.0, 0.2]), 0.0);
        assert_eq!(rect_distance(&r, &[0.6, 0.45]), 0.0);
    }

    #[test]
    fn rect_distance_exterior_cases() {
        let r = Rect::new(0.6, 0.45).unwrap();
        assert_abs_diff_eq!(rect_distance(&r, &[-0.3, 0.2]), 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(rect_distance(&r, &[0.9, 0.85]), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(rect_distance(&r, &[-0.03, -0.04]), 0.05, epsilon = 1e-15);
    }

    #[test]
    fn rect_distance_is_eikonal_off_the_medial_axis() {
        let r = Rect::new(0.6, 0.45).unwrap();
        let h = 1e-7;
        // probe points chosen away from the medial axis and the boundary
        for p in [[0.05, 0.2], [0.55, 0.3], [0.3, 0.04], [0.3, 0.42], [-0.1, 0.1], [0.7, 0.5]] {
            let gx = (rect_distance(&r, &[p[0] + h, p[1]]) - rect_distance(&r, &[p[0] - h, p[1]]))
                / (2.0 * h);
            let gy = (rect_distance(&r, &[p[0], p[1] + h]) - rect_distance(&r, &[p[0], p[1] - h]))
                / (2.0 * h);
            assert_abs_diff_eq!(gx.hypot(gy), 1.0, epsilon = 1e-6);
        }
    }
}
