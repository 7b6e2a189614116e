//! GP regression of the latent occupancy field.
//!
//! Every surface point is an observation with latent value 1; the model
//! solves (K + σ_n²I)w = 1 once at build time, after which latent mean,
//! variance, gradient and gradient covariance at arbitrary queries are
//! read-only evaluations safe to issue from many threads at once.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::kernels::KernelModel;

/// Surface samples, 2D or 3D, stored flat for cache-friendly query loops.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    coords: Vec<f64>,
    dim: usize,
}

impl PointCloud {
    pub fn from_flat(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if !(dim == 2 || dim == 3) {
            return Err(Error::invalid(format!("point dimension must be 2 or 3, got {dim}")));
        }
        if coords.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if coords.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "{} coordinates do not form {dim}-dimensional points",
                coords.len()
            )));
        }
        if let Some(bad) = coords.iter().find(|c| !c.is_finite()) {
            return Err(Error::invalid(format!("non-finite coordinate {bad}")));
        }
        Ok(PointCloud { coords, dim })
    }

    pub fn from_points2(points: impl IntoIterator<Item = [f64; 2]>) -> Result<Self> {
        Self::from_flat(2, points.into_iter().flatten().collect())
    }

    pub fn from_points3(points: impl IntoIterator<Item = [f64; 3]>) -> Result<Self> {
        Self::from_flat(3, points.into_iter().flatten().collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.coords.chunks_exact(self.dim)
    }

    /// One point per row, `x,y[,z]`; a header row is auto-detected.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut dim = None;
        let mut coords = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let parsed: std::result::Result<Vec<f64>, _> =
                fields.iter().map(|f| f.parse::<f64>()).collect();
            let row = match parsed {
                Ok(row) => row,
                Err(_) if coords.is_empty() && dim.is_none() => continue, // header
                Err(_) => {
                    return Err(Error::invalid(format!(
                        "line {}: cannot parse {line:?} as a point",
                        idx + 1
                    )));
                }
            };
            match dim {
                None => dim = Some(row.len()),
                Some(d) if d != row.len() => {
                    return Err(Error::invalid(format!(
                        "line {}: expected {d} coordinates, got {}",
                        idx + 1,
                        row.len()
                    )));
                }
                Some(_) => {}
            }
            coords.extend(row);
        }
        let dim = dim.ok_or(Error::EmptyCloud)?;
        Self::from_flat(dim, coords)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(if self.dim == 2 { "x,y\n" } else { "x,y,z\n" });
        for p in self.iter() {
            for (k, c) in p.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{c}");
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for k in 0..a.len() {
        let d = a[k] - b[k];
        s += d * d;
    }
    s.sqrt()
}

/// Latent inference at one query point.
#[derive(Clone, Debug)]
pub struct LatentQuery {
    pub o_hat: f64,
    pub o_var: f64,
    pub grad: DVector<f64>,
    pub grad_cov: DMatrix<f64>,
}

/// Immutable GP model over a point cloud: cached Cholesky factor of
/// (K + σ_n²I) and the weight vector solved against all-ones observations.
#[derive(Clone, Debug)]
pub struct LatentFieldModel {
    cloud: PointCloud,
    kernel: KernelModel,
    sigma_n: f64,
    chol: Cholesky<f64, Dyn>,
    weights: DVector<f64>,
    jitter: f64,
}

impl LatentFieldModel {
    pub fn build(cloud: PointCloud, kernel: KernelModel, sigma_n: f64) -> Result<Self> {
        kernel.validate()?;
        if !(sigma_n.is_finite() && sigma_n >= 0.0) {
            return Err(Error::invalid(format!("sigma_n must be finite and >= 0, got {sigma_n}")));
        }
        let q = cloud.len();
        if q == 0 {
            return Err(Error::EmptyCloud);
        }

        let mut gram = DMatrix::zeros(q, q);
        for i in 0..q {
            gram[(i, i)] = 1.0;
            for j in 0..i {
                let k = kernel.eval_raw(dist(cloud.point(i), cloud.point(j)));
                gram[(i, j)] = k;
                gram[(j, i)] = k;
            }
        }
        let mean_diag = gram.trace() / q as f64;
        let noise = sigma_n * sigma_n;
        for i in 0..q {
            gram[(i, i)] += noise;
        }

        // Jitter ladder: 1e-12 of the mean Gram diagonal, escalating tenfold
        // up to 1e-6 of it, only on factorization failure.
        let mut ladder = vec![0.0];
        let mut j = 1e-12 * mean_diag;
        let max = 1e-6 * mean_diag;
        while j <= max * (1.0 + 1e-9) {
            ladder.push(j);
            j *= 10.0;
        }
        let mut factor = None;
        let mut jitter = 0.0;
        for &jit in &ladder {
            let mut m = gram.clone();
            for i in 0..q {
                m[(i, i)] += jit;
            }
            if let Some(c) = Cholesky::new(m) {
                factor = Some(c);
                jitter = jit;
                break;
            }
        }
        let Some(chol) = factor else {
            return Err(Error::GramNotPositiveDefinite { max_jitter: *ladder.last().unwrap() });
        };

        let weights = chol.solve(&DVector::from_element(q, 1.0));
        Ok(LatentFieldModel { cloud, kernel, sigma_n, chol, weights, jitter })
    }

    pub fn cloud(&self) -> &PointCloud {
        &self.cloud
    }

    pub fn kernel(&self) -> &KernelModel {
        &self.kernel
    }

    pub fn sigma_n(&self) -> f64 {
        self.sigma_n
    }

    /// Diagonal jitter the factorization needed, 0 when none.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    /// Latent mean only; the allocation-free hot path for dense field sweeps.
    pub fn latent_mean(&self, x: &[f64]) -> Result<f64> {
        self.check_query(x)?;
        Ok(self.mean_raw(x))
    }

    pub(crate) fn mean_raw(&self, x: &[f64]) -> f64 {
        let w = self.weights.as_slice();
        let mut acc = 0.0;
        for (i, p) in self.cloud.iter().enumerate() {
            acc += self.kernel.eval_raw(dist(x, p)) * w[i];
        }
        acc
    }

    /// Posterior latent mean and variance.
    pub fn latent(&self, x: &[f64]) -> Result<(f64, f64)> {
        self.check_query(x)?;
        let kx = self.kernel_vector(x);
        let o_hat = kx.dot(&self.weights);
        let v = self.chol.solve(&kx);
        let o_var = (1.0 - kx.dot(&v)).max(0.0);
        Ok((o_hat, o_var))
    }

    /// Analytic latent gradient and its posterior covariance.
    pub fn gradient(&self, x: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.check_query(x)?;
        let dim = self.cloud.dim();
        let q = self.cloud.len();
        let mut g = DMatrix::zeros(dim, q);
        for (i, p) in self.cloud.iter().enumerate() {
            let r = dist(x, p);
            if r > 0.0 {
                let s = self.kernel.derivative_raw(r) / r;
                for k in 0..dim {
                    g[(k, i)] = s * (x[k] - p[k]);
                }
            }
            // r == 0: the kernel is stationary there, the column stays zero
        }
        let grad = &g * &self.weights;
        let sol = self.chol.solve(&g.transpose());
        let mut cov = DMatrix::identity(dim, dim) * self.kernel.grad_prior_variance();
        cov -= &g * &sol;
        let cov = 0.5 * (&cov + cov.transpose());
        Ok((grad, cov))
    }

    /// Full posterior at one query.
    pub fn query(&self, x: &[f64]) -> Result<LatentQuery> {
        let (o_hat, o_var) = self.latent(x)?;
        let (grad, grad_cov) = self.gradient(x)?;
        Ok(LatentQuery { o_hat, o_var, grad, grad_cov })
    }

    /// Joint posterior covariance of the latent across a set of queries.
    pub fn posterior_cov(&self, queries: &PointCloud) -> Result<DMatrix<f64>> {
        if queries.dim() != self.cloud.dim() {
            return Err(Error::invalid("query dimension does not match the model"));
        }
        let m = queries.len();
        let q = self.cloud.len();
        let mut k_qq = DMatrix::zeros(m, m);
        for i in 0..m {
            k_qq[(i, i)] = 1.0;
            for j in 0..i {
                let k = self.kernel.eval_raw(dist(queries.point(i), queries.point(j)));
                k_qq[(i, j)] = k;
                k_qq[(j, i)] = k;
            }
        }
        let mut k_qx = DMatrix::zeros(m, q);
        for i in 0..m {
            for (j, p) in self.cloud.iter().enumerate() {
                k_qx[(i, j)] = self.kernel.eval_raw(dist(queries.point(i), p));
            }
        }
        let sol = self.chol.solve(&k_qx.transpose());
        let mut cov = k_qq - &k_qx * &sol;
        for i in 0..m {
            for j in 0..i {
                let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
            cov[(i, i)] = cov[(i, i)].max(0.0);
        }
        Ok(cov)
    }

    fn kernel_vector(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.cloud.len(),
            self.cloud.iter().map(|p| self.kernel.eval_raw(dist(x, p))),
        )
    }

    fn check_query(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.cloud.dim() {
            return Err(Error::invalid(format!(
                "query has {} coordinates, model is {}-dimensional",
                x.len(),
                self.cloud.dim()
            )));
        }
        if x.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("non-finite query coordinate"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelKind;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn se(l: f64) -> KernelModel {
        KernelModel::new(KernelKind::SquaredExponential, l).unwrap()
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = crate::seed::stream(seed, "gp-test-cloud", 0);
        PointCloud::from_points2((0..n).map(|_| {
            [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
        }))
        .unwrap()
    }

    #[test]
    fn single_observation_weight_is_one() {
        for kind in [KernelKind::SquaredExponential, KernelKind::RationalQuadratic, KernelKind::Matern32] {
            let cloud = PointCloud::from_points2([[0.3, -0.2]]).unwrap();
            let m = LatentFieldModel::build(cloud, KernelModel::new(kind, 0.5).unwrap(), 0.0).unwrap();
            assert_abs_diff_eq!(m.weights()[0], 1.0, epsilon = 1e-14);
            assert_eq!(m.jitter(), 0.0);
        }
    }

    #[test]
    fn two_point_weights_match_hand_solve() {
        let cloud = PointCloud::from_points2([[0.0, 0.0], [1.0, 0.0]]).unwrap();
        let m = LatentFieldModel::build(cloud, se(1.0), 0.0).unwrap();
        // [[1, k],[k, 1]] w = 1 with k = exp(-0.5) => w = 1/(1+k)
        let expected = 0.6224593312018546;
        assert_abs_diff_eq!(m.weights()[0], expected, epsilon = 1e-12);
        assert_abs_diff_eq!(m.weights()[1], expected, epsilon = 1e-12);
    }

    #[test]
    fn duplicate_points_resolved_by_jitter() {
        let cloud = PointCloud::from_points2([[0.1, 0.1], [0.1, 0.1]]).unwrap();
        let m = LatentFieldModel::build(cloud, se(1.0), 0.0).unwrap();
        assert!(m.jitter() > 0.0, "rank-deficient Gram should have needed jitter");
        let o = m.latent_mean(&[0.1, 0.1]).unwrap();
        assert_abs_diff_eq!(o, 1.0, epsilon = 1e-3);
    }

    #[test]
    fn weights_solve_the_all_ones_system() {
        let cloud = random_cloud(40, 11);
        let kernel = se(0.4);
        let sigma_n = 0.05;
        let m = LatentFieldModel::build(cloud.clone(), kernel, sigma_n).unwrap();
        let q = cloud.len();
        let mut gram = DMatrix::zeros(q, q);
        for i in 0..q {
            for j in 0..q {
                gram[(i, j)] = kernel.eval(dist(cloud.point(i), cloud.point(j))).unwrap();
            }
            gram[(i, i)] += sigma_n * sigma_n + m.jitter();
        }
        let resid = (&gram * m.weights() - DVector::from_element(q, 1.0)).norm();
        assert!(resid / (q as f64).sqrt() <= 1e-10, "residual {resid}");
    }

    #[test]
    fn noiseless_interpolation_at_the_observation() {
        let cloud = PointCloud::from_points2([[0.2, 0.7]]).unwrap();
        let m = LatentFieldModel::build(cloud, se(1.0), 0.0).unwrap();
        let (o_hat, o_var) = m.latent(&[0.2, 0.7]).unwrap();
        assert_abs_diff_eq!(o_hat, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(o_var, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn far_query_underflows_to_non_positive() {
        let cloud = PointCloud::from_points2([[0.0, 0.0]]).unwrap();
        let m = LatentFieldModel::build(cloud, se(1.0), 0.0).unwrap();
        let o = m.latent_mean(&[50.0, 0.0]).unwrap();
        assert!(o <= 0.0, "o_hat = {o}");
    }

    #[test]
    fn single_point_gradient_is_analytic() {
        let cloud = PointCloud::from_points2([[0.0, 0.0]]).unwrap();
        let m = LatentFieldModel::build(cloud, se(1.0), 0.0).unwrap();
        let (grad, _) = m.gradient(&[1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(grad[0], -0.6065306597126334, epsilon = 1e-12);
        assert_abs_diff_eq!(grad[1], 0.0, epsilon = 1e-15);
        let (grad0, _) = m.gradient(&[0.0, 0.0]).unwrap();
        assert_eq!(grad0.norm(), 0.0);
    }

    #[test]
    fn inference_agrees_with_direct_inverse() {
        let cloud = random_cloud(8, 3);
        let kernel = se(0.6);
        let sigma_n = 0.1;
        let m = LatentFieldModel::build(cloud.clone(), kernel, sigma_n).unwrap();
        let q = cloud.len();
        let mut gram = DMatrix::zeros(q, q);
        for i in 0..q {
            for j in 0..q {
                gram[(i, j)] = kernel.eval(dist(cloud.point(i), cloud.point(j))).unwrap();
            }
            gram[(i, i)] += sigma_n * sigma_n;
        }
        let inv = gram.try_inverse().unwrap();
        let x = [0.37, -0.21];
        let kx = DVector::from_iterator(q, cloud.iter().map(|p| kernel.eval(dist(&x, p)).unwrap()));
        let w = &inv * DVector::from_element(q, 1.0);
        let (o_hat, o_var) = m.latent(&x).unwrap();
        assert_abs_diff_eq!(o_hat, kx.dot(&w), epsilon = 1e-10);
        assert_abs_diff_eq!(o_var, 1.0 - (kx.transpose() * &inv * &kx)[(0, 0)], epsilon = 1e-10);

        let mut g = DMatrix::zeros(2, q);
        for (i, p) in cloud.iter().enumerate() {
            let r = dist(&x, p);
            let s = kernel.derivative(r).unwrap() / r;
            g[(0, i)] = s * (x[0] - p[0]);
            g[(1, i)] = s * (x[1] - p[1]);
        }
        let grad_direct = &g * &w;
        let cov_direct = DMatrix::identity(2, 2) * kernel.grad_prior_variance() - &g * &inv * g.transpose();
        let (grad, cov) = m.gradient(&x).unwrap();
        assert_abs_diff_eq!((grad - grad_direct).norm(), 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!((cov - cov_direct).norm(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cloud = random_cloud(12, 5);
        let m = LatentFieldModel::build(cloud, se(0.5), 0.08).unwrap();
        let h = 1e-6 * 0.5;
        let mut rng = crate::seed::stream(9, "gp-test-query", 0);
        for _ in 0..50 {
            let x = [rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2)];
            let (grad, _) = m.gradient(&x).unwrap();
            for k in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[k] += h;
                xm[k] -= h;
                let fd = (m.latent_mean(&xp).unwrap() - m.latent_mean(&xm).unwrap()) / (2.0 * h);
                let scale = grad.norm().max(1e-9);
                assert!((grad[k] - fd).abs() <= 1e-4 * scale, "component {k}: {} vs {fd}", grad[k]);
            }
        }
    }

    #[test]
    fn gradient_covariance_is_symmetric_psd() {
        let cloud = random_cloud(15, 7);
        let m = LatentFieldModel::build(cloud, se(0.4), 0.05).unwrap();
        let (_, cov) = m.gradient(&[0.3, 0.4]).unwrap();
        assert_abs_diff_eq!(cov[(0, 1)], cov[(1, 0)], epsilon = 1e-12);
        let eig = cov.symmetric_eigenvalues();
        assert!(eig.iter().all(|&e| e >= -1e-10), "eigenvalues {eig:?}");
    }

    #[test]
    fn mirror_symmetric_cloud_gives_mirror_symmetric_field() {
        let cloud =
            PointCloud::from_points2([[0.5, 0.1], [-0.5, 0.1], [0.5, -0.3], [-0.5, -0.3]]).unwrap();
        let m = LatentFieldModel::build(cloud, se(0.7), 0.02).unwrap();
        let a = m.latent_mean(&[0.2, 0.05]).unwrap();
        let b = m.latent_mean(&[-0.2, 0.05]).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn variance_shrinks_when_observing_the_query() {
        let cloud = random_cloud(10, 2);
        let x = [0.05, -0.4];
        let m = LatentFieldModel::build(cloud.clone(), se(0.5), 0.1).unwrap();
        let (_, var_before) = m.latent(&x).unwrap();
        let mut coords: Vec<f64> = cloud.iter().flatten().copied().collect();
        coords.extend_from_slice(&x);
        let extended = PointCloud::from_flat(2, coords).unwrap();
        let m2 = LatentFieldModel::build(extended, se(0.5), 0.1).unwrap();
        let (_, var_after) = m2.latent(&x).unwrap();
        assert!(var_after <= var_before + 1e-12, "{var_after} > {var_before}");
    }

    #[test]
    fn query_dimension_mismatch_is_rejected() {
        let m = LatentFieldModel::build(random_cloud(3, 1), se(1.0), 0.0).unwrap();
        assert!(m.latent_mean(&[0.0, 0.0, 0.0]).is_err());
        assert!(m.latent_mean(&[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn csv_round_trip_preserves_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pts.csv");
        let cloud = PointCloud::from_points2([[0.1, -0.25], [1e-17, 2.5e3]]).unwrap();
        cloud.write_csv(&path).unwrap();
        let back = PointCloud::read_csv(&path).unwrap();
        assert_eq!(cloud, back);
    }

    #[test]
    fn csv_header_is_optional() {
        let with = PointCloud::parse_csv("x,y\n1.0,2.0\n").unwrap();
        let without = PointCloud::parse_csv("1.0,2.0\n").unwrap();
        assert_eq!(with, without);
        assert_eq!(with.len(), 1);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let err = PointCloud::parse_csv("x,y\n1.0,2.0\noops,3.0\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = PointCloud::parse_csv("x,y\n1.0,2.0\n1.0,2.0,3.0\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn empty_csv_is_an_empty_cloud_error() {
        assert!(matches!(PointCloud::parse_csv("x,y\n"), Err(Error::EmptyCloud)));
        assert!(matches!(PointCloud::parse_csv(""), Err(Error::EmptyCloud)));
    }

    proptest! {
        // The founding identity at the model level: one noiseless observation
        // reproduces the kernel itself as the latent field.
        #[test]
        fn single_observation_reproduces_the_kernel(
            px in -1.0_f64..1.0, py in -1.0_f64..1.0,
            qx in -5.0_f64..5.0, qy in -5.0_f64..5.0,
        ) {
            let cloud = PointCloud::from_points2([[px, py]]).unwrap();
            let kernel = se(0.8);
            let m = LatentFieldModel::build(cloud, kernel, 0.0).unwrap();
            let expected = kernel.eval(dist(&[qx, qy], &[px, py])).unwrap();
            let got = m.latent_mean(&[qx, qy]).unwrap();
            prop_assert!((got - expected).abs() <= 1e-14);
        }
    }
}
