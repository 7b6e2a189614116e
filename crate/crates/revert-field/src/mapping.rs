//! Two-stage mapping: estimate virtual boundary observations X from known
//! sensor positions by damped least squares, first on first-echo distances,
//! then on full envelopes, with a chain regularizer keeping X coherent.
//! Also provides the delay-and-sum comparison map.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{smooth_min, LogGpisModel, DEFAULT_SMOOTHMIN_LAMBDA};
use crate::distance::{distance_only, fused_only, FieldStatus, FusedBlend};
use crate::error::{Error, Result};
use crate::gp_field::{LatentFieldModel, PointCloud};
use crate::interp::MonotoneCubic;
use crate::kernels::KernelModel;
use crate::ugw_signal::EnvelopeSignal;

pub const DEFAULT_REG_ALPHA: f64 = 1e-3;
/// Forward-difference step for the numeric Jacobian, meters.
pub const FD_STEP: f64 = 1e-5;
pub const MAX_ITERATIONS: usize = 200;
/// Converged when an accepted step reduces the cost by less than this
/// fraction, or moves the parameters by less than STEP_NORM_TOL.
pub const COST_DECREASE_TOL: f64 = 1e-8;
pub const STEP_NORM_TOL: f64 = 1e-9;

/// Distance field rebuilt from X inside the residuals: the reverting GP
/// field, or LogGPIS for the baseline comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapFieldKind {
    Reverting,
    LogGpis,
}

#[derive(Clone, Debug)]
pub struct MapState {
    /// Chain-ordered virtual observations X.
    pub virtual_points: Vec<[f64; 2]>,
    pub reg_alpha: f64,
    pub kernel: KernelModel,
    pub sigma_n: f64,
    pub field: MapFieldKind,
}

impl MapState {
    pub fn validate(&self) -> Result<()> {
        if self.virtual_points.len() < 2 {
            return Err(Error::invalid("mapping needs at least 2 virtual points"));
        }
        if !(self.reg_alpha.is_finite() && self.reg_alpha >= 0.0) {
            return Err(Error::invalid("reg_alpha must be nonnegative and finite"));
        }
        self.kernel.validate()?;
        if !(self.sigma_n.is_finite() && self.sigma_n >= 0.0) {
            return Err(Error::invalid("sigma_n must be nonnegative and finite"));
        }
        Ok(())
    }

    /// Field evaluator for the current X (one GP build).
    pub fn field_eval(&self) -> Result<MapField> {
        MapField::build(self, &self.virtual_points)
    }
}

/// Default chain length: enough virtual points that adjacent gaps stay
/// near 1.5 lengthscales around the expected perimeter.
pub fn default_q(perimeter: f64, lengthscale: f64) -> usize {
    ((perimeter / (1.5 * lengthscale)).ceil() as usize).max(2)
}

/// Closed-polygon perimeter, for sizing the chain via [`default_q`].
pub fn polygon_perimeter(polygon: &[[f64; 2]]) -> f64 {
    let n = polygon.len();
    (0..n)
        .map(|i| {
            let a = polygon[i];
            let b = polygon[(i + 1) % n];
            (a[0] - b[0]).hypot(a[1] - b[1])
        })
        .sum()
}

/// Distance field built from one concrete X. Queries report whether the
/// smooth-min-backed fallback had to stand in for a nonpositive latent.
pub struct MapField {
    model: FieldModel,
}

enum FieldModel {
    Reverting(LatentFieldModel),
    LogGpis(LogGpisModel),
}

impl MapField {
    fn build(state: &MapState, points: &[[f64; 2]]) -> Result<Self> {
        let cloud = PointCloud::from_points2(points.iter().copied())?;
        let model = match state.field {
            MapFieldKind::Reverting => FieldModel::Reverting(LatentFieldModel::build(
                cloud,
                state.kernel.clone(),
                state.sigma_n,
            )?),
            MapFieldKind::LogGpis => FieldModel::LogGpis(LogGpisModel::build(
                cloud,
                state.kernel.lengthscale,
                state.sigma_n,
            )?),
        };
        Ok(MapField { model })
    }

    pub fn distance(&self, p: [f64; 2]) -> Result<(f64, bool)> {
        match &self.model {
            FieldModel::Reverting(model) => {
                let (d, status) = distance_only(model, &p)?;
                if status == FieldStatus::FieldNotPositive {
                    let (d, _) = fused_only(model, &p, DEFAULT_SMOOTHMIN_LAMBDA, &FusedBlend::default())?;
                    Ok((d, true))
                } else {
                    Ok((d, false))
                }
            }
            FieldModel::LogGpis(model) => match model.distance(&p) {
                Ok(d) => Ok((d, false)),
                Err(Error::FieldNotPositive { .. }) => {
                    let d = smooth_min(model.model().cloud(), &p, DEFAULT_SMOOTHMIN_LAMBDA)?;
                    Ok((d, true))
                }
                Err(e) => Err(e),
            },
        }
    }
}

/// Initial guess: circle around the sensor centroid at the median first
/// echo plus a 1.5-median margin, ordered by angle so the chain
/// regularizer sees consecutive neighbors. The wide margin starts every
/// point near (or beyond) the boundary; a tight circle leaves redundant
/// interior points that the data term exiles instead of spreading.
pub fn init_virtual_points(
    sensors: &[[f64; 2]],
    first_echo_distances: &[f64],
    q: usize,
) -> Result<Vec<[f64; 2]>> {
    if q < 2 {
        return Err(Error::invalid("at least 2 virtual points are required"));
    }
    if sensors.is_empty() || first_echo_distances.is_empty() {
        return Err(Error::invalid("initialization needs sensors and echo distances"));
    }
    let mut centroid = [0.0; 2];
    for s in sensors {
        centroid[0] += s[0];
        centroid[1] += s[1];
    }
    centroid[0] /= sensors.len() as f64;
    centroid[1] /= sensors.len() as f64;
    let mut sorted = first_echo_distances.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 0 {
        0.5 * (sorted[mid - 1] + sorted[mid])
    } else {
        sorted[mid]
    };
    let radius = 2.5 * median;
    if !(radius.is_finite() && radius > 0.0) {
        return Err(Error::invalid("echo distances give no positive initial radius"));
    }
    Ok((0..q)
        .map(|k| {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / q as f64;
            [centroid[0] + radius * theta.cos(), centroid[1] + radius * theta.sin()]
        })
        .collect())
}

enum ProblemData<'a> {
    EchoDistances(&'a [f64]),
    Envelopes(Vec<MonotoneCubic>),
}

/// Residual stack for one stage: N data terms, then Q-1 chain terms of two
/// components each. The GP is rebuilt from the candidate X on every call.
pub struct LsqProblem<'a> {
    sensors: &'a [[f64; 2]],
    data: ProblemData<'a>,
    state: &'a MapState,
}

impl<'a> LsqProblem<'a> {
    pub fn stage1(sensors: &'a [[f64; 2]], echo_distances: &'a [f64], state: &'a MapState) -> Result<Self> {
        state.validate()?;
        if sensors.len() != echo_distances.len() {
            return Err(Error::invalid("one echo distance per sensor required"));
        }
        if sensors.is_empty() {
            return Err(Error::invalid("mapping needs at least one measurement"));
        }
        Ok(LsqProblem { sensors, data: ProblemData::EchoDistances(echo_distances), state })
    }

    pub fn stage2(sensors: &'a [[f64; 2]], envelopes: &[EnvelopeSignal], state: &'a MapState) -> Result<Self> {
        state.validate()?;
        if sensors.len() != envelopes.len() {
            return Err(Error::invalid("one envelope per sensor required"));
        }
        if sensors.is_empty() {
            return Err(Error::invalid("mapping needs at least one measurement"));
        }
        let interps = envelopes
            .iter()
            .map(|e| MonotoneCubic::new(0.0, e.step, e.values.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(LsqProblem { sensors, data: ProblemData::Envelopes(interps), state })
    }

    /// Data terms plus chain terms (each chain term is one 2-vector block).
    pub fn residual_blocks(&self) -> usize {
        self.sensors.len() + (self.state.virtual_points.len() - 1)
    }

    pub fn residual_len(&self) -> usize {
        self.sensors.len() + 2 * (self.state.virtual_points.len() - 1)
    }

    pub fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.eval(x).map(|(r, _)| r)
    }

    /// Number of data residuals that needed the smooth-min-backed fallback
    /// at this X.
    pub fn fallback_count(&self, x: &DVector<f64>) -> Result<usize> {
        self.eval(x).map(|(_, n)| n)
    }

    fn eval(&self, x: &DVector<f64>) -> Result<(DVector<f64>, usize)> {
        let points = unflatten(x);
        let field = MapField::build(self.state, &points)?;
        let mut r = DVector::zeros(self.residual_len());
        let mut fallbacks = 0;
        for (i, sensor) in self.sensors.iter().enumerate() {
            let (d_hat, fell_back) = field.distance(*sensor)?;
            fallbacks += fell_back as usize;
            r[i] = match &self.data {
                ProblemData::EchoDistances(d) => d[i] - d_hat,
                ProblemData::Envelopes(e) => 1.0 - e[i].eval(d_hat),
            };
        }
        let sqrt_alpha = self.state.reg_alpha.sqrt();
        let n = self.sensors.len();
        for i in 1..points.len() {
            r[n + 2 * (i - 1)] = sqrt_alpha * (points[i][0] - points[i - 1][0]);
            r[n + 2 * (i - 1) + 1] = sqrt_alpha * (points[i][1] - points[i - 1][1]);
        }
        Ok((r, fallbacks))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// True when no damping level produced a cost decrease; the solver
    /// cannot make progress (for instance, a rank-deficient problem).
    pub stalled: bool,
    pub fused_fallbacks: usize,
    /// Cost after every accepted iteration, initial cost first.
    pub cost_trace: Vec<f64>,
}

fn flatten(points: &[[f64; 2]]) -> DVector<f64> {
    DVector::from_iterator(2 * points.len(), points.iter().flat_map(|p| [p[0], p[1]]))
}

fn unflatten(x: &DVector<f64>) -> Vec<[f64; 2]> {
    (0..x.len() / 2).map(|i| [x[2 * i], x[2 * i + 1]]).collect()
}

/// Forward-difference Jacobian, columns evaluated in parallel.
fn fd_jacobian<F>(residuals: &F, x: &DVector<f64>, r0: &DVector<f64>) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync,
{
    let cols = (0..x.len())
        .into_par_iter()
        .map(|j| {
            let mut xj = x.clone();
            xj[j] += FD_STEP;
            residuals(&xj).map(|rj| (rj - r0) / FD_STEP)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_columns(&cols))
}

/// Damped least squares: accepted steps divide the damping by 3, rejected
/// steps multiply it by 10. Damping uses Marquardt's per-diagonal scaling
/// with a floor at 1e-3 of the largest curvature: virtual points far from
/// every sensor give near-zero curvature directions, and undamped they let
/// the solve run away; fully isotropic damping instead stalls their travel
/// toward the boundary within the iteration budget.
fn levenberg_marquardt<F>(
    residuals: &F,
    x0: DVector<f64>,
    max_iterations: usize,
) -> Result<(DVector<f64>, StageReport)>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync,
{
    let mut x = x0;
    let mut r = residuals(&x)?;
    let mut cost = r.norm_squared();
    let mut report = StageReport {
        initial_cost: cost,
        final_cost: cost,
        iterations: 0,
        converged: false,
        stalled: false,
        fused_fallbacks: 0,
        cost_trace: vec![cost],
    };
    if cost <= 1e-24 {
        report.converged = true;
        return Ok((x, report));
    }
    let mut lambda = 1e-3;
    for iteration in 1..=max_iterations {
        let jac = fd_jacobian(residuals, &x, &r)?;
        let hess = jac.transpose() * &jac;
        let gradient = jac.transpose() * &r;
        if gradient.amax() <= 1e-10 {
            report.converged = true;
            break;
        }
        let max_diag = (0..hess.nrows()).fold(0.0f64, |acc, i| acc.max(hess[(i, i)]));
        let diag_floor = (1e-3 * max_diag).max(1e-12);
        let mut accepted = false;
        while lambda <= 1e12 {
            let mut damped = hess.clone();
            for i in 0..damped.nrows() {
                damped[(i, i)] += lambda * hess[(i, i)].max(diag_floor);
            }
            let step = match Cholesky::new(damped) {
                Some(chol) => chol.solve(&(-&gradient)),
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let candidate = &x + &step;
            let r_new = residuals(&candidate)?;
            let cost_new = r_new.norm_squared();
            if cost_new < cost {
                let decrease = cost - cost_new;
                x = candidate;
                r = r_new;
                cost = cost_new;
                lambda = (lambda / 3.0).max(1e-12);
                report.iterations = iteration;
                report.cost_trace.push(cost);
                accepted = true;
                if decrease <= COST_DECREASE_TOL * cost.max(f64::MIN_POSITIVE)
                    || step.norm() <= STEP_NORM_TOL
                {
                    report.converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            report.stalled = true;
            break;
        }
        if report.converged {
            break;
        }
    }
    report.final_cost = cost;
    Ok((x, report))
}

fn solve(problem: &LsqProblem) -> Result<(MapState, StageReport)> {
    let x0 = flatten(&problem.state.virtual_points);
    let (x, mut report) =
        levenberg_marquardt(&|x: &DVector<f64>| problem.residuals(x), x0, MAX_ITERATIONS)?;
    report.fused_fallbacks = problem.fallback_count(&x)?;
    let mut state = problem.state.clone();
    state.virtual_points = unflatten(&x);
    Ok((state, report))
}

/// Stage 1: fit X so the field distance at each sensor matches its first
/// echo, plus the chain regularizer.
pub fn solve_stage1(
    sensors: &[[f64; 2]],
    echo_distances: &[f64],
    state: &MapState,
) -> Result<(MapState, StageReport)> {
    solve(&LsqProblem::stage1(sensors, echo_distances, state)?)
}

/// Stage 2: refine X so every envelope evaluates near 1 at the field
/// distance of its sensor, starting from the stage-1 solution.
pub fn solve_stage2(
    sensors: &[[f64; 2]],
    envelopes: &[EnvelopeSignal],
    state: &MapState,
) -> Result<(MapState, StageReport)> {
    solve(&LsqProblem::stage2(sensors, envelopes, state)?)
}

/// Delay-and-sum comparison map: L(x) = sum_i e_i(|p_i - x|) on the given
/// grid, row-major with y outermost.
pub fn das_map(
    sensors: &[[f64; 2]],
    envelopes: &[EnvelopeSignal],
    xs: &[f64],
    ys: &[f64],
) -> Result<Vec<f64>> {
    if sensors.len() != envelopes.len() {
        return Err(Error::invalid("one envelope per sensor required"));
    }
    if sensors.is_empty() || xs.is_empty() || ys.is_empty() {
        return Err(Error::invalid("delay-and-sum needs sensors and a nonempty grid"));
    }
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for &y in ys {
        for &x in xs {
            let mut total = 0.0;
            for (p, e) in sensors.iter().zip(envelopes) {
                total += e.value_at((p[0] - x).hypot(p[1] - y));
            }
            out.push(total);
        }
    }
    Ok(out)
}
