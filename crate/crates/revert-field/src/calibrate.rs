//! Corrective-noise calibration: pick σ_n so the GP posterior on a known
//! scene best explains the ideal latent field, in the Mahalanobis sense.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gp_field::{LatentFieldModel, PointCloud};
use crate::kernels::KernelModel;

/// Grid size above which the posterior covariance is approximated by its
/// diagonal; the full matrix solve is cubic in the grid size.
pub const FULL_COV_LIMIT: usize = 2000;

const LOG10_LO: f64 = -6.0;
const LOG10_HI: f64 = 0.0;
const LOG10_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug)]
pub struct CalibrationResult {
    pub sigma_n: f64,
    pub objective: f64,
    /// Number of objective evaluations (model rebuilds) the search took.
    pub evaluations: usize,
}

/// Minimizes (o_q - ô)ᵀ Σ_ô⁻¹ (o_q - ô) over σ_n ∈ [1e-6, 1] by
/// golden-section search in log10 σ_n, where o_q = κ(true distance) is the
/// ideal latent at each grid point and (ô, Σ_ô) come from a model rebuilt
/// per candidate.
pub fn learn_sigma_n(
    cloud: &PointCloud,
    kernel: &KernelModel,
    grid: &PointCloud,
    gt_distances: &[f64],
) -> Result<CalibrationResult> {
    if grid.len() != gt_distances.len() {
        return Err(Error::invalid(format!(
            "{} grid points but {} ground-truth distances",
            grid.len(),
            gt_distances.len()
        )));
    }
    let o_q = DVector::from_iterator(
        gt_distances.len(),
        gt_distances.iter().map(|&d| kernel.eval(d)).collect::<Result<Vec<_>>>()?,
    );

    let mut evaluations = 0;
    let mut objective = |t: f64| -> Result<f64> {
        evaluations += 1;
        mahalanobis_objective(cloud, kernel, grid, &o_q, 10f64.powf(t))
    };

    // Guard against degenerate grids before searching.
    let f_lo = objective(LOG10_LO)?;
    let f_hi = objective(LOG10_HI)?;
    if !f_lo.is_finite() || !f_hi.is_finite() {
        return Err(Error::invalid(format!(
            "calibration objective not finite at the search bounds ({f_lo}, {f_hi})"
        )));
    }

    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut a = LOG10_LO;
    let mut b = LOG10_HI;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = objective(c)?;
    let mut fd = objective(d)?;
    while b - a > LOG10_TOL {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = objective(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = objective(d)?;
        }
    }
    let t = 0.5 * (a + b);
    let f = objective(t)?;
    Ok(CalibrationResult { sigma_n: 10f64.powf(t), objective: f, evaluations })
}

fn mahalanobis_objective(
    cloud: &PointCloud,
    kernel: &KernelModel,
    grid: &PointCloud,
    o_q: &DVector<f64>,
    sigma_n: f64,
) -> Result<f64> {
    let model = LatentFieldModel::build(cloud.clone(), *kernel, sigma_n)?;
    let m = grid.len();
    if m <= FULL_COV_LIMIT {
        let o_hat = DVector::from_iterator(
            m,
            (0..m).map(|i| model.mean_raw(grid.point(i))),
        );
        let r = o_q - o_hat;
        let cov = model.posterior_cov(grid)?;
        let chol = cholesky_with_jitter(cov)?;
        let z = chol.solve(&r);
        Ok(r.dot(&z))
    } else {
        let mut obj = 0.0;
        for i in 0..m {
            let (o_hat, var) = model.latent(grid.point(i))?;
            obj += (o_q[i] - o_hat).powi(2) / var.max(1e-12);
        }
        Ok(obj)
    }
}

/// Same escalating-jitter policy the Gram factorization uses.
fn cholesky_with_jitter(mut m: DMatrix<f64>) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    let n = m.nrows();
    let mean_diag = m.trace() / n as f64;
    let mut jitter = 0.0;
    let max = 1e-6 * mean_diag.max(f64::MIN_POSITIVE);
    loop {
        if let Some(c) = Cholesky::new(m.clone()) {
            return Ok(c);
        }
        jitter = if jitter == 0.0 { 1e-12 * mean_diag.max(f64::MIN_POSITIVE) } else { jitter * 10.0 };
        if jitter > max * (1.0 + 1e-9) {
            return Err(Error::GramNotPositiveDefinite { max_jitter: jitter / 10.0 });
        }
        for i in 0..n {
            m[(i, i)] += jitter;
        }
    }
}
