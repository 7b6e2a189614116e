//! The distance field proper: latent inference capped and reverted into a
//! distance, a gradient-discrepancy uncertainty proxy, and the fusion with
//! the smooth minimum for far-field coverage.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::baselines::smooth_min;
use crate::error::{Error, Result};
use crate::gp_field::LatentFieldModel;
use crate::kernels::KernelModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldStatus {
    Ok,
    /// Raw latent exceeded 1 and was capped: the query sits at (numerically
    /// inside) the surface. Distinct from Ok because the field is not
    /// guaranteed to be exactly one on the surface.
    CappedAtSurface,
    /// Latent underflowed to ≤ 0: no distance can be reverted here.
    FieldNotPositive,
}

impl FieldStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            FieldStatus::Ok => "ok",
            FieldStatus::CappedAtSurface => "capped",
            FieldStatus::FieldNotPositive => "nopos",
        }
    }
}

impl fmt::Display for FieldStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One evaluated field query. `o_hat` is the raw (uncapped) latent value;
/// `d_hat` and `uncertainty` are NaN when the status is FieldNotPositive
/// so they cannot be consumed silently.
#[derive(Clone, Debug)]
pub struct FieldQuery {
    pub d_hat: f64,
    pub o_hat: f64,
    pub grad: DVector<f64>,
    pub uncertainty: f64,
    pub status: FieldStatus,
}

/// Logistic blend parameters for the GP/smooth-min fusion, in units of the
/// kernel lengthscale.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusedBlend {
    pub center_lengthscales: f64,
    pub width_lengthscales: f64,
}

impl Default for FusedBlend {
    fn default() -> Self {
        FusedBlend { center_lengthscales: 2.0, width_lengthscales: 0.5 }
    }
}

/// Full query: latent + gradient inference, capping, reverting, proxy.
pub fn query_distance(model: &LatentFieldModel, x: &[f64]) -> Result<FieldQuery> {
    let lq = model.query(x)?;
    let (d_hat, status) = cap_and_revert(model.kernel(), lq.o_hat)?;
    let uncertainty = match status {
        FieldStatus::FieldNotPositive => f64::NAN,
        _ => uncertainty_proxy(model.kernel(), d_hat, &lq.grad, &lq.grad_cov)?,
    };
    Ok(FieldQuery { d_hat, o_hat: lq.o_hat, grad: lq.grad, uncertainty, status })
}

/// Latent mean + reverting only; the allocation-free fast path for dense
/// sweeps where neither the gradient nor the proxy is needed. `d_hat` is
/// NaN on FieldNotPositive.
pub fn distance_only(model: &LatentFieldModel, x: &[f64]) -> Result<(f64, FieldStatus)> {
    let o_hat = model.latent_mean(x)?;
    cap_and_revert(model.kernel(), o_hat)
}

fn cap_and_revert(kernel: &KernelModel, o_hat: f64) -> Result<(f64, FieldStatus)> {
    if o_hat > 1.0 {
        Ok((0.0, FieldStatus::CappedAtSurface))
    } else if o_hat <= 0.0 {
        Ok((f64::NAN, FieldStatus::FieldNotPositive))
    } else {
        Ok((kernel.revert(o_hat)?, FieldStatus::Ok))
    }
}

/// Standardized discrepancy between the field-model derivative |κ'(d̂)| and
/// the inferred gradient norm ‖∇ô‖, in standard-deviation units: the
/// gradient covariance is propagated through the norm along ĝ = ∇ô/‖∇ô‖
/// (largest-eigenvalue fallback when the gradient nearly vanishes).
pub fn uncertainty_proxy(
    kernel: &KernelModel,
    d_hat: f64,
    grad: &DVector<f64>,
    grad_cov: &DMatrix<f64>,
) -> Result<f64> {
    if d_hat.is_nan() {
        return Err(Error::invalid("uncertainty proxy is undefined on a failed query"));
    }
    let g = grad.norm();
    let m = kernel.derivative(d_hat)?.abs();
    let s2 = if g < 1e-12 {
        grad_cov.symmetric_eigenvalues().max()
    } else {
        let ghat = grad / g;
        (ghat.transpose() * grad_cov * &ghat)[(0, 0)]
    };
    let s = s2.max(0.0).sqrt();
    Ok((m - g).abs() / s.max(1e-12))
}

/// GP field blended into the smooth minimum: w·d_gp + (1-w)·d_sm with a
/// logistic weight w that trusts the GP within ~2l of the surface and the
/// smooth minimum beyond. A failed GP query falls back to the smooth
/// minimum entirely (w = 0, status Ok).
pub fn query_fused(
    model: &LatentFieldModel,
    x: &[f64],
    lambda: f64,
    blend: &FusedBlend,
) -> Result<FieldQuery> {
    let gp = query_distance(model, x)?;
    let d_sm = smooth_min(model.cloud(), x, lambda)?;
    Ok(match gp.status {
        FieldStatus::FieldNotPositive => FieldQuery {
            d_hat: d_sm,
            uncertainty: f64::NAN,
            status: FieldStatus::Ok,
            ..gp
        },
        _ => FieldQuery { d_hat: blend_value(model, gp.d_hat, d_sm, blend), ..gp },
    })
}

/// Fast-path fused distance, mirroring `distance_only`.
pub fn fused_only(
    model: &LatentFieldModel,
    x: &[f64],
    lambda: f64,
    blend: &FusedBlend,
) -> Result<(f64, FieldStatus)> {
    let (d_gp, status) = distance_only(model, x)?;
    let d_sm = smooth_min(model.cloud(), x, lambda)?;
    Ok(match status {
        FieldStatus::FieldNotPositive => (d_sm, FieldStatus::Ok),
        _ => (blend_value(model, d_gp, d_sm, blend), status),
    })
}

fn blend_value(model: &LatentFieldModel, d_gp: f64, d_sm: f64, blend: &FusedBlend) -> f64 {
    let l = model.kernel().lengthscale;
    let c = blend.center_lengthscales * l;
    let s = blend.width_lengthscales * l;
    let w = 1.0 / (1.0 + ((d_sm - c) / s).exp());
    w * d_gp + (1.0 - w) * d_sm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::DEFAULT_SMOOTHMIN_LAMBDA;
    use crate::gp_field::PointCloud;
    use crate::kernels::{KernelKind, KernelModel};
    use approx::assert_abs_diff_eq;

    fn se(l: f64) -> KernelModel {
        KernelModel::new(KernelKind::SquaredExponential, l).unwrap()
    }

    fn single_obs_model() -> LatentFieldModel {
        let cloud = PointCloud::from_points2([[0.0, 0.0]]).unwrap();
        LatentFieldModel::build(cloud, se(1.0), 0.0).unwrap()
    }

    #[test]
    fn single_observation_distance_is_exact() {
        let m = single_obs_model();
        let q = query_distance(&m, &[0.5, 0.0]).unwrap();
        assert_eq!(q.status, FieldStatus::Ok);
        assert_abs_diff_eq!(q.d_hat, 0.5, epsilon = 1e-9);
    }

    #[test]
    fn latent_above_one_is_capped_to_the_surface() {
        // midpoint of two close noiseless observations pushes ô above 1
        let cloud = PointCloud::from_points2([[-0.05, 0.0], [0.05, 0.0]]).unwrap();
        let m = LatentFieldModel::build(cloud, se(1.0), 0.0).unwrap();
        let q = query_distance(&m, &[0.0, 0.0]).unwrap();
        assert_eq!(q.status, FieldStatus::CappedAtSurface);
        assert!(q.o_hat > 1.0, "raw latent {}", q.o_hat);
        assert_eq!(q.d_hat, 0.0);
    }

    #[test]
    fn far_query_reports_field_not_positive() {
        let m = single_obs_model();
        let q = query_distance(&m, &[50.0, 0.0]).unwrap();
        assert_eq!(q.status, FieldStatus::FieldNotPositive);
        assert!(q.d_hat.is_nan());
        assert!(q.uncertainty.is_nan());
    }

    #[test]
    fn distance_only_agrees_with_full_query() {
        let m = single_obs_model();
        for x in [[0.3, 0.2], [1.5, -0.4], [0.0, 2.0]] {
            let full = query_distance(&m, &x).unwrap();
            let (d, status) = distance_only(&m, &x).unwrap();
            assert_eq!(status, full.status);
            assert_eq!(d, full.d_hat);
        }
    }

    #[test]
    fn proxy_vanishes_on_a_self_consistent_field() {
        // one noiseless observation: ‖∇ô‖ equals |κ'(d̂)| identically
        let m = single_obs_model();
        let q = query_distance(&m, &[0.7, 0.3]).unwrap();
        assert!(q.uncertainty <= 1e-9, "proxy {}", q.uncertainty);
    }

    #[test]
    fn proxy_uses_eigenvalue_fallback_at_zero_gradient() {
        let m = single_obs_model();
        // on the observation the gradient vanishes exactly
        let lq = m.query(&[0.0, 0.0]).unwrap();
        assert!(lq.grad.norm() < 1e-12);
        let p = uncertainty_proxy(m.kernel(), 0.0, &lq.grad, &lq.grad_cov).unwrap();
        assert!(p.is_finite());
        assert_abs_diff_eq!(p, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn proxy_rejects_failed_queries() {
        let m = single_obs_model();
        let lq = m.query(&[50.0, 0.0]).unwrap();
        assert!(uncertainty_proxy(m.kernel(), f64::NAN, &lq.grad, &lq.grad_cov).is_err());
    }

    #[test]
    fn fused_vanishes_on_data_and_tracks_smooth_min_far_out() {
        let cloud = PointCloud::from_points2([[0.0, 0.0], [0.2, 0.0]]).unwrap();
        let m = LatentFieldModel::build(cloud.clone(), se(0.06), 0.0).unwrap();
        let blend = FusedBlend::default();
        let near = query_fused(&m, &[0.0, 0.0], DEFAULT_SMOOTHMIN_LAMBDA, &blend).unwrap();
        assert!(near.d_hat.abs() <= 1e-6);

        // far out the SE latent underflows; the fused field must fall back
        // to exactly the smooth minimum and report Ok
        let x = [10.0, 0.0];
        let (_, gp_status) = distance_only(&m, &x).unwrap();
        assert_eq!(gp_status, FieldStatus::FieldNotPositive);
        let far = query_fused(&m, &x, DEFAULT_SMOOTHMIN_LAMBDA, &blend).unwrap();
        assert_eq!(far.status, FieldStatus::Ok);
        let sm = smooth_min(&cloud, &x, DEFAULT_SMOOTHMIN_LAMBDA).unwrap();
        assert_eq!(far.d_hat, sm);
    }

    #[test]
    fn fused_fast_path_agrees_with_full() {
        let cloud = PointCloud::from_points2([[0.0, 0.0], [0.2, 0.0], [0.4, 0.05]]).unwrap();
        let m = LatentFieldModel::build(cloud, se(0.06), 1e-3).unwrap();
        let blend = FusedBlend::default();
        for x in [[0.1, 0.02], [0.1, 0.2], [0.3, 1.0], [5.0, 5.0]] {
            let full = query_fused(&m, &x, DEFAULT_SMOOTHMIN_LAMBDA, &blend).unwrap();
            let (d, _) = fused_only(&m, &x, DEFAULT_SMOOTHMIN_LAMBDA, &blend).unwrap();
            assert_eq!(d, full.d_hat);
        }
    }

    #[test]
    fn distance_grows_monotonically_along_an_outward_ray() {
        // isolated convex surface: a circle, sampled densely
        let n = 48;
        let cloud = PointCloud::from_points2((0..n).map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            [0.3 * a.cos(), 0.3 * a.sin()]
        }))
        .unwrap();
        let m = LatentFieldModel::build(cloud, se(0.06), 1e-3).unwrap();
        let mut prev = -1.0;
        for i in 0..200 {
            let r = 0.3 + 1.2 * i as f64 / 200.0;
            let (d, status) = distance_only(&m, &[r, 0.0]).unwrap();
            if status == FieldStatus::FieldNotPositive {
                break;
            }
            assert!(d >= prev - 1e-9, "d̂ decreased to {d} at r={r}");
            prev = d;
        }
    }

    #[test]
    fn noiseless_observations_read_back_as_zero_distance() {
        let cloud = PointCloud::from_points2((0..20).map(|i| [0.04 * i as f64, 0.0])).unwrap();
        let m = LatentFieldModel::build(cloud.clone(), se(0.06), 0.0).unwrap();
        for p in cloud.iter() {
            let (d, status) = distance_only(&m, p).unwrap();
            if status != FieldStatus::CappedAtSurface {
                assert!(d <= 1e-6 * 0.06, "d̂ = {d} at a training point");
            }
        }
    }

    #[test]
    fn status_strings_are_stable() {
        assert_eq!(FieldStatus::Ok.as_str(), "ok");
        assert_eq!(FieldStatus::CappedAtSurface.as_str(), "capped");
        assert_eq!(FieldStatus::FieldNotPositive.as_str(), "nopos");
    }
}
