//! Particle-filter echolocation: noisy-odometry motion updates, envelope-
//! likelihood weight updates through a boundary-distance oracle, periodic
//! systematic resampling, and top-quantile state estimation.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::baselines::LogGpisModel;
use crate::distance::{distance_only, FieldStatus};
use crate::error::{Error, Result};
use crate::gp_field::{LatentFieldModel, PointCloud};
use crate::kernels::KernelModel;
use crate::ugw_signal::{EnvelopeSignal, PlateScene};

pub const DEFAULT_N_PARTICLES: usize = 500;
pub const DEFAULT_BETA: f64 = 5.0;
pub const DEFAULT_RESAMPLE_INTERVAL: usize = 5;
pub const DEFAULT_ODOM_NOISE_SD: f64 = 0.005;
pub const DEFAULT_ESTIMATE_QUANTILE: f64 = 0.25;
/// Boundary sampling pitch for the GP and LogGPIS oracles.
pub const DEFAULT_BOUNDARY_GAP: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleKind {
    GpField,
    LogGpis,
    RectAnalytic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub n_particles: usize,
    pub beta: f64,
    pub resample_interval: usize,
    pub odom_noise_sd: f64,
    pub estimate_quantile: f64,
    pub distance_oracle: OracleKind,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            n_particles: DEFAULT_N_PARTICLES,
            beta: DEFAULT_BETA,
            resample_interval: DEFAULT_RESAMPLE_INTERVAL,
            odom_noise_sd: DEFAULT_ODOM_NOISE_SD,
            estimate_quantile: DEFAULT_ESTIMATE_QUANTILE,
            distance_oracle: OracleKind::GpField,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::invalid("n_particles must be >= 1"));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::invalid("beta must be positive and finite"));
        }
        if self.resample_interval == 0 {
            return Err(Error::invalid("resample_interval must be >= 1"));
        }
        if !(self.odom_noise_sd.is_finite() && self.odom_noise_sd >= 0.0) {
            return Err(Error::invalid("odom_noise_sd must be nonnegative and finite"));
        }
        if !(self.estimate_quantile > 0.0 && self.estimate_quantile <= 1.0) {
            return Err(Error::invalid("estimate_quantile must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Particle {
    pub position: [f64; 2],
    pub weight: f64,
}

/// Boundary-distance oracle queried once per particle per measurement.
/// `distance` returns `None` where the field model cannot produce a
/// positive latent value; the filter treats that as an uninformative
/// (not impossible) measurement.
pub enum DistanceOracle {
    GpField(LatentFieldModel),
    LogGpis(LogGpisModel),
    RectAnalytic(Vec<[f64; 2]>),
}

impl DistanceOracle {
    /// Builds the oracle named by `kind` for `scene`. The GP variants fit
    /// dense boundary samples at pitch `gap`; RectAnalytic is the exact
    /// distance to the scene polygon.
    pub fn build(
        kind: OracleKind,
        scene: &PlateScene,
        gap: f64,
        kernel: &KernelModel,
        sigma_n: f64,
    ) -> Result<Self> {
        Ok(match kind {
            OracleKind::GpField => {
                let cloud = boundary_cloud(scene, gap)?;
                DistanceOracle::GpField(LatentFieldModel::build(cloud, kernel.clone(), sigma_n)?)
            }
            OracleKind::LogGpis => {
                let cloud = boundary_cloud(scene, gap)?;
                DistanceOracle::LogGpis(LogGpisModel::build(cloud, kernel.lengthscale, sigma_n)?)
            }
            OracleKind::RectAnalytic => {
                scene.validate()?;
                DistanceOracle::RectAnalytic(scene.polygon.clone())
            }
        })
    }

    pub fn distance(&self, p: [f64; 2]) -> Result<Option<f64>> {
        match self {
            DistanceOracle::GpField(model) => {
                let (d, status) = distance_only(model, &p)?;
                Ok(match status {
                    FieldStatus::FieldNotPositive => None,
                    _ => Some(d),
                })
            }
            DistanceOracle::LogGpis(model) => match model.distance(&p) {
                Ok(d) => Ok(Some(d)),
                Err(Error::FieldNotPositive { .. }) => Ok(None),
                Err(e) => Err(e),
            },
            DistanceOracle::RectAnalytic(polygon) => Ok(Some(polygon_distance(polygon, p))),
        }
    }
}

/// Uniform samples along the scene boundary at pitch `gap`, corners
/// included, endpoint of each edge left to the next edge.
pub fn boundary_cloud(scene: &PlateScene, gap: f64) -> Result<PointCloud> {
    scene.validate()?;
    if !(gap.is_finite() && gap > 0.0) {
        return Err(Error::invalid("boundary gap must be positive"));
    }
    let n = scene.polygon.len();
    let mut points = Vec::new();
    for i in 0..n {
        let a = scene.polygon[i];
        let b = scene.polygon[(i + 1) % n];
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        let segments = (len / gap).ceil().max(1.0) as usize;
        for j in 0..segments {
            let t = j as f64 / segments as f64;
            points.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
    }
    PointCloud::from_points2(points)
}

/// Exact distance from `p` to the closest polygon edge.
fn polygon_distance(polygon: &[[f64; 2]], p: [f64; 2]) -> f64 {
    let n = polygon.len();
    let mut best = f64::INFINITY;
    for i in 0..n {
        let a = polygon[i];
        let b = polygon[(i + 1) % n];
        let ex = b[0] - a[0];
        let ey = b[1] - a[1];
        let t = (((p[0] - a[0]) * ex + (p[1] - a[1]) * ey) / (ex * ex + ey * ey)).clamp(0.0, 1.0);
        let dx = p[0] - (a[0] + t * ex);
        let dy = p[1] - (a[1] + t * ey);
        best = best.min(dx.hypot(dy));
    }
    best
}

/// Uniform rejection samples inside the scene polygon, weights 1/n.
pub fn init_particles<R: Rng + ?Sized>(
    scene: &PlateScene,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Particle>> {
    scene.validate()?;
    if n == 0 {
        return Err(Error::invalid("particle count must be >= 1"));
    }
    let (lo, hi) = {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in &scene.polygon {
            for k in 0..2 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    };
    let w = 1.0 / n as f64;
    let mut particles = Vec::with_capacity(n);
    while particles.len() < n {
        let p = [rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1])];
        if scene.contains(p) {
            particles.push(Particle { position: p, weight: w });
        }
    }
    Ok(particles)
}

/// Shifts every particle by the odometry delta plus isotropic Gaussian
/// noise; weights are untouched.
pub fn motion_update<R: Rng + ?Sized>(
    particles: &mut [Particle],
    odom_delta: [f64; 2],
    cfg: &FilterConfig,
    rng: &mut R,
) -> Result<()> {
    let noise = Normal::new(0.0, cfg.odom_noise_sd).map_err(|e| Error::invalid(e.to_string()))?;
    for p in particles.iter_mut() {
        p.position[0] += odom_delta[0] + noise.sample(rng);
        p.position[1] += odom_delta[1] + noise.sample(rng);
    }
    Ok(())
}

/// Reweights by exp(beta * e(d_hat)) per particle and renormalizes. A
/// particle whose distance query fails gets envelope value 0 (factor 1).
/// Returns true when the weights collapsed and the set was reinitialized
/// uniformly over the scene (a divergence event).
pub fn measurement_update<R: Rng + ?Sized>(
    particles: &mut Vec<Particle>,
    e: &EnvelopeSignal,
    oracle: &DistanceOracle,
    cfg: &FilterConfig,
    scene: &PlateScene,
    rng: &mut R,
) -> Result<bool> {
    for p in particles.iter_mut() {
        let ev = match oracle.distance(p.position)? {
            Some(d) => e.value_at(d),
            None => 0.0,
        };
        p.weight *= (cfg.beta * ev).exp();
    }
    let total: f64 = particles.iter().map(|p| p.weight).sum();
    if !(total.is_finite() && total > 0.0) {
        let n = particles.len();
        *particles = init_particles(scene, n, rng)?;
        return Ok(true);
    }
    for p in particles.iter_mut() {
        p.weight /= total;
    }
    Ok(false)
}

/// Systematic (low-variance) resampling; uniform weights after.
pub fn resample<R: Rng + ?Sized>(particles: &mut Vec<Particle>, rng: &mut R) {
    let n = particles.len();
    if n == 0 {
        return;
    }
    let start = rng.random_range(0.0..1.0) / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut cumulative = particles[0].weight;
    let mut i = 0;
    let w = 1.0 / n as f64;
    for j in 0..n {
        let target = start + j as f64 * w;
        while cumulative < target && i + 1 < n {
            i += 1;
            cumulative += particles[i].weight;
        }
        out.push(Particle { position: particles[i].position, weight: w });
    }
    *particles = out;
}

/// Mean position of the ceil(q * n) highest-weight particles, ties broken
/// by original index.
pub fn estimate(particles: &[Particle], q: f64) -> [f64; 2] {
    let n = particles.len();
    let k = ((q * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| particles[b].weight.total_cmp(&particles[a].weight));
    let mut mean = [0.0; 2];
    for &i in &order[..k] {
        mean[0] += particles[i].position[0];
        mean[1] += particles[i].position[1];
    }
    [mean[0] / k as f64, mean[1] / k as f64]
}

/// One filter input step: odometry since the previous step, the index of
/// the envelope measured at the arrival position, and optionally the true
/// position for error traces.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryStep {
    pub odom_delta: [f64; 2],
    pub envelope: usize,
    pub truth: Option<[f64; 2]>,
}

#[derive(Clone, Debug)]
pub struct FilterRun {
    pub estimates: Vec<[f64; 2]>,
    /// Estimate-to-truth distance per step, None where truth was absent.
    pub errors: Vec<Option<f64>>,
    pub divergences: usize,
}

/// Runs the full filter: uniform initialization, motion + measurement
/// update per step, systematic resampling every `resample_interval` steps,
/// and a top-quantile estimate after each measurement.
pub fn run_filter<R: Rng + ?Sized>(
    steps: &[TrajectoryStep],
    envelopes: &[EnvelopeSignal],
    scene: &PlateScene,
    oracle: &DistanceOracle,
    cfg: &FilterConfig,
    rng: &mut R,
) -> Result<FilterRun> {
    cfg.validate()?;
    if let Some(bad) = steps.iter().find(|s| s.envelope >= envelopes.len()) {
        return Err(Error::invalid(format!(
            "envelope index {} out of range ({} envelopes)",
            bad.envelope,
            envelopes.len()
        )));
    }
    let mut particles = init_particles(scene, cfg.n_particles, rng)?;
    let mut run = FilterRun {
        estimates: Vec::with_capacity(steps.len()),
        errors: Vec::with_capacity(steps.len()),
        divergences: 0,
    };
    for (i, step) in steps.iter().enumerate() {
        motion_update(&mut particles, step.odom_delta, cfg, rng)?;
        if measurement_update(&mut particles, &envelopes[step.envelope], oracle, cfg, scene, rng)? {
            run.divergences += 1;
        }
        let est = estimate(&particles, cfg.estimate_quantile);
        run.errors.push(
            step.truth
                .map(|t| (est[0] - t[0]).hypot(est[1] - t[1])),
        );
        run.estimates.push(est);
        if (i + 1) % cfg.resample_interval == 0 {
            resample(&mut particles, rng);
        }
    }
    Ok(run)
}

/// Random walk over the 4-neighbor graph of an nx * ny source grid
/// (row-major, x fastest), emitted as filter steps with ground truth.
/// The first step carries zero odometry and the start vertex measurement.
pub fn random_walk_steps<R: Rng + ?Sized>(
    sources: &[[f64; 2]],
    nx: usize,
    ny: usize,
    n_steps: usize,
    rng: &mut R,
) -> Result<Vec<TrajectoryStep>> {
    if nx * ny != sources.len() {
        return Err(Error::invalid(format!(
            "grid {nx}x{ny} does not match {} sources",
            sources.len()
        )));
    }
    if sources.is_empty() || n_steps == 0 {
        return Err(Error::invalid("walk needs at least one source and one step"));
    }
    let mut at = rng.random_range(0..sources.len());
    let mut steps = Vec::with_capacity(n_steps);
    steps.push(TrajectoryStep { odom_delta: [0.0, 0.0], envelope: at, truth: Some(sources[at]) });
    for _ in 1..n_steps {
        let (i, j) = (at % nx, at / nx);
        let mut neighbors = Vec::with_capacity(4);
        if i > 0 {
            neighbors.push(at - 1);
        }
        if i + 1 < nx {
            neighbors.push(at + 1);
        }
        if j > 0 {
            neighbors.push(at - nx);
        }
        if j + 1 < ny {
            neighbors.push(at + nx);
        }
        let next = neighbors[rng.random_range(0..neighbors.len())];
        let delta = [
            sources[next][0] - sources[at][0],
            sources[next][1] - sources[at][1],
        ];
        at = next;
        steps.push(TrajectoryStep { odom_delta: delta, envelope: at, truth: Some(sources[at]) });
    }
    Ok(steps)
}
