//! Simulated distance-field benchmark: random sum-of-sines environments,
//! noisy arc-length sampling, an exact dense ground-truth oracle, and
//! RMSE/coverage reporting per method with an error-vs-distance scatter.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{smooth_min, LogGpisModel};
use crate::distance::{distance_only, fused_only, FieldStatus, FusedBlend};
use crate::error::{Error, Result};
use crate::gp_field::{LatentFieldModel, PointCloud};
use crate::kernels::{KernelKind, KernelModel, DEFAULT_RQ_ALPHA};
use crate::seed;

/// Table II's close/far split on true distance.
pub const CLOSE_RANGE_SPLIT: f64 = 0.05;
/// Dense oracle sample spacing; the δ-halving test pins its adequacy.
pub const DEFAULT_ORACLE_DELTA: f64 = 1e-4;
pub const DEFAULT_POINT_GAP: f64 = 0.04;
pub const DEFAULT_NOISE_SD: f64 = 0.005;

/// Lengthscale guideline: one and a half times the typical point gap.
pub fn lengthscale_from_gap(gap: f64) -> f64 {
    1.5 * gap
}

/// Workspace: x across [0,1], y across [-0.5, 0.5], meters.
pub const WORKSPACE_X: (f64, f64) = (0.0, 1.0);
pub const WORKSPACE_Y: (f64, f64) = (-0.5, 0.5);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SineTerm {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

/// Single-valued curve y(x) = Σ a_j sin(f_j x + φ_j) over the workspace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SineEnvironment {
    pub terms: Vec<SineTerm>,
}

impl SineEnvironment {
    pub fn y(&self, x: f64) -> f64 {
        self.terms.iter().map(|t| t.amplitude * (t.frequency * x + t.phase).sin()).sum()
    }

    pub fn slope(&self, x: f64) -> f64 {
        self.terms
            .iter()
            .map(|t| t.amplitude * t.frequency * (t.frequency * x + t.phase).cos())
            .sum()
    }
}

/// Random-environment term count and parameter ranges. Frequencies reach
/// high enough that curvature radii dip well below the close-range split,
/// while the shortest wiggle wavelength stays several point gaps wide.
pub const ENV_TERMS: (u32, u32) = (3, 6);
pub const ENV_AMPLITUDE: (f64, f64) = (0.02, 0.15);
pub const ENV_FREQUENCY: (f64, f64) = (2.0, 18.0);

/// Draws a sum-of-sines curve from the ranges above with uniform phases.
pub fn generate_environment(master: u64, index: u64) -> SineEnvironment {
    random_environment(&mut seed::stream(master, "simbench-env", index))
}

fn random_environment(rng: &mut impl Rng) -> SineEnvironment {
    let n = rng.random_range(ENV_TERMS.0..=ENV_TERMS.1);
    let terms = (0..n)
        .map(|_| SineTerm {
            amplitude: rng.random_range(ENV_AMPLITUDE.0..ENV_AMPLITUDE.1),
            frequency: rng.random_range(ENV_FREQUENCY.0..ENV_FREQUENCY.1),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        })
        .collect();
    SineEnvironment { terms }
}

/// Arc-length-uniform samples of the curve at spacing ≈ `gap` with isotropic
/// Gaussian positional noise.
pub fn sample_cloud(
    env: &SineEnvironment,
    gap: f64,
    noise_sd: f64,
    rng: &mut impl Rng,
) -> Result<PointCloud> {
    if !(gap > 0.0 && gap.is_finite()) {
        return Err(Error::invalid(format!("point gap must be > 0, got {gap}")));
    }
    let normal = Normal::new(0.0, noise_sd)
        .map_err(|e| Error::invalid(format!("bad noise sd {noise_sd}: {e}")))?;
    let mut pts = Vec::new();
    let mut x = WORKSPACE_X.0;
    while x <= WORKSPACE_X.1 {
        pts.push([x + normal.sample(rng), env.y(x) + normal.sample(rng)]);
        let s = env.slope(x);
        x += gap / (1.0 + s * s).sqrt();
    }
    PointCloud::from_points2(pts)
}

/// Dense noiseless samples of the curve plus a uniform-grid spatial index;
/// nearest-sample distance is exact to δ/2 by construction.
pub struct GroundTruthOracle {
    samples: Vec<[f64; 2]>,
    index: GridIndex,
}

impl GroundTruthOracle {
    pub fn build(env: &SineEnvironment, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::invalid(format!("oracle spacing must be > 0, got {delta}")));
        }
        let mut samples = Vec::new();
        let mut x = WORKSPACE_X.0;
        while x < WORKSPACE_X.1 {
            samples.push([x, env.y(x)]);
            let s = env.slope(x);
            x += delta / (1.0 + s * s).sqrt();
        }
        samples.push([WORKSPACE_X.1, env.y(WORKSPACE_X.1)]);
        Ok(Self::from_samples(samples))
    }

    pub fn from_samples(samples: Vec<[f64; 2]>) -> Self {
        let index = GridIndex::build(&samples, 0.01);
        GroundTruthOracle { samples, index }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn distance(&self, x: &[f64; 2]) -> f64 {
        self.nearest(x).1
    }

    /// Exact nearest dense sample, found by expanding-ring search over the
    /// grid index; a ring at cell radius r cannot hold anything closer than
    /// (r-1)·cell, which bounds the search.
    pub fn nearest(&self, x: &[f64; 2]) -> (usize, f64) {
        let (cx, cy) = self.index.cell_of(x);
        let mut best_i = usize::MAX;
        let mut best_d2 = f64::INFINITY;
        let r_cover = self.index.cover_radius(cx, cy);
        let mut r = 0i64;
        loop {
            if best_d2.is_finite() {
                let bound = (r - 1).max(0) as f64 * self.index.cell;
                if bound * bound > best_d2 {
                    break;
                }
            }
            if r > r_cover {
                break;
            }
            self.index.scan_ring(cx, cy, r, |i| {
                let p = &self.samples[i];
                let dx = p[0] - x[0];
                let dy = p[1] - x[1];
                let d2 = dx * dx + dy * dy;
                if d2 < best_d2 {
                    best_d2 = d2;
                    best_i = i;
                }
            });
            r += 1;
        }
        (best_i, best_d2.sqrt())
    }
}

/// Uniform bucket grid in CSR layout over the sample bounding box.
struct GridIndex {
    ox: f64,
    oy: f64,
    cell: f64,
    nx: i64,
    ny: i64,
    start: Vec<u32>,
    order: Vec<u32>,
}

impl GridIndex {
    fn build(samples: &[[f64; 2]], cell: f64) -> Self {
        let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
        let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in samples {
            x0 = x0.min(p[0]);
            y0 = y0.min(p[1]);
            x1 = x1.max(p[0]);
            y1 = y1.max(p[1]);
        }
        let nx = (((x1 - x0) / cell).floor() as i64 + 1).max(1);
        let ny = (((y1 - y0) / cell).floor() as i64 + 1).max(1);
        let ncells = (nx * ny) as usize;
        let cell_idx = |p: &[f64; 2]| -> usize {
            let ix = (((p[0] - x0) / cell).floor() as i64).clamp(0, nx - 1);
            let iy = (((p[1] - y0) / cell).floor() as i64).clamp(0, ny - 1);
            (iy * nx + ix) as usize
        };
        let mut start = vec![0u32; ncells + 1];
        for p in samples {
            start[cell_idx(p) + 1] += 1;
        }
        for i in 0..ncells {
            start[i + 1] += start[i];
        }
        let mut cursor = start.clone();
        let mut order = vec![0u32; samples.len()];
        for (i, p) in samples.iter().enumerate() {
            let c = cell_idx(p);
            order[cursor[c] as usize] = i as u32;
            cursor[c] += 1;
        }
        GridIndex { ox: x0, oy: y0, cell, nx, ny, start, order }
    }

    fn cell_of(&self, p: &[f64; 2]) -> (i64, i64) {
        (((p[0] - self.ox) / self.cell).floor() as i64, ((p[1] - self.oy) / self.cell).floor() as i64)
    }

    /// Chebyshev cell radius that covers the whole grid from (cx, cy).
    fn cover_radius(&self, cx: i64, cy: i64) -> i64 {
        let dx = cx.max(self.nx - 1 - cx).max(cx.abs());
        let dy = cy.max(self.ny - 1 - cy).max(cy.abs());
        dx.max(dy)
    }

    fn scan_ring(&self, cx: i64, cy: i64, r: i64, mut visit: impl FnMut(usize)) {
        let mut cell = |ix: i64, iy: i64| {
            if ix < 0 || iy < 0 || ix >= self.nx || iy >= self.ny {
                return;
            }
            let c = (iy * self.nx + ix) as usize;
            for k in self.start[c]..self.start[c + 1] {
                visit(self.order[k as usize] as usize);
            }
        };
        if r == 0 {
            cell(cx, cy);
            return;
        }
        for ix in (cx - r)..=(cx + r) {
            cell(ix, cy - r);
            cell(ix, cy + r);
        }
        for iy in (cy - r + 1)..=(cy + r - 1) {
            cell(cx - r, iy);
            cell(cx + r, iy);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ours-se")]
    OursSe,
    #[serde(rename = "ours-rq")]
    OursRq,
    #[serde(rename = "ours-matern")]
    OursMatern,
    #[serde(rename = "loggpis")]
    LogGpis,
    #[serde(rename = "smoothmin")]
    SmoothMin,
    #[serde(rename = "fused")]
    Fused,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::OursSe,
        Method::OursRq,
        Method::OursMatern,
        Method::LogGpis,
        Method::SmoothMin,
        Method::Fused,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::OursSe => "ours-se",
            Method::OursRq => "ours-rq",
            Method::OursMatern => "ours-matern",
            Method::LogGpis => "loggpis",
            Method::SmoothMin => "smoothmin",
            Method::Fused => "fused",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }
}

/// Default corrective noise for the benchmark models. Deliberately small:
/// the distance field is most accurate lightly regularised, and the
/// coverage contrast between kernels only shows up in this regime.
/// `calibrate-noise` can refine it for other noise/density settings.
pub const DEFAULT_BENCH_SIGMA_N: f64 = 0.001;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub envs: usize,
    pub grid: [usize; 2],
    pub seed: u64,
    pub methods: Vec<Method>,
    pub gap: f64,
    pub noise_sd: f64,
    pub lengthscale: f64,
    pub rq_alpha: f64,
    pub lambda: f64,
    pub blend: FusedBlend,
    pub fused_kernel: KernelKind,
    pub oracle_delta: f64,
    pub sigma_n: f64,
    pub scatter_per_env: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            envs: 100,
            grid: [200, 200],
            seed: 1,
            methods: Method::ALL.to_vec(),
            gap: DEFAULT_POINT_GAP,
            noise_sd: DEFAULT_NOISE_SD,
            lengthscale: lengthscale_from_gap(DEFAULT_POINT_GAP),
            rq_alpha: DEFAULT_RQ_ALPHA,
            lambda: crate::baselines::DEFAULT_SMOOTHMIN_LAMBDA,
            blend: FusedBlend::default(),
            fused_kernel: KernelKind::Matern32,
            oracle_delta: DEFAULT_ORACLE_DELTA,
            sigma_n: DEFAULT_BENCH_SIGMA_N,
            scatter_per_env: 25,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.envs == 0 {
            return Err(Error::invalid("envs must be >= 1"));
        }
        if self.grid[0] < 2 || self.grid[1] < 2 {
            return Err(Error::invalid("query grid must be at least 2x2"));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("no methods selected"));
        }
        if !(self.lengthscale > 0.0) {
            return Err(Error::invalid("lengthscale must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EnvRow {
    pub close_rmse: Option<f64>,
    pub far_rmse: Option<f64>,
    pub overall_rmse: Option<f64>,
    pub coverage: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub close_rmse_mean: Option<f64>,
    pub far_rmse_mean: Option<f64>,
    pub overall_rmse_mean: Option<f64>,
    pub coverage_mean: f64,
    pub per_env: Vec<EnvRow>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub close_split: f64,
    pub sigma_n: f64,
    pub methods: Vec<MethodSummary>,
}

/// Error-vs-distance scatter rows per method: (true distance, |error|).
pub type Scatter = Vec<(Method, Vec<(f64, f64)>)>;

pub struct BenchOutput {
    pub report: BenchReport,
    pub scatter: Scatter,
}

struct MethodAccum {
    close_sse: f64,
    close_n: u64,
    far_sse: f64,
    far_n: u64,
    covered: u64,
    total: u64,
    scatter: Vec<(f64, f64)>,
}

impl MethodAccum {
    fn new() -> Self {
        MethodAccum {
            close_sse: 0.0,
            close_n: 0,
            far_sse: 0.0,
            far_n: 0,
            covered: 0,
            total: 0,
            scatter: Vec::new(),
        }
    }

    fn add(&mut self, gt: f64, estimate: Option<f64>) {
        self.total += 1;
        let Some(d) = estimate else { return };
        self.covered += 1;
        let e2 = (d - gt) * (d - gt);
        if gt < CLOSE_RANGE_SPLIT {
            self.close_sse += e2;
            self.close_n += 1;
        } else {
            self.far_sse += e2;
            self.far_n += 1;
        }
    }

    fn row(&self) -> EnvRow {
        let rmse = |sse: f64, n: u64| (n > 0).then(|| (sse / n as f64).sqrt());
        EnvRow {
            close_rmse: rmse(self.close_sse, self.close_n),
            far_rmse: rmse(self.far_sse, self.far_n),
            overall_rmse: rmse(self.close_sse + self.far_sse, self.close_n + self.far_n),
            coverage: self.covered as f64 / self.total.max(1) as f64,
        }
    }
}

enum MethodField {
    Gp(LatentFieldModel),
    LogGpis(LogGpisModel),
    SmoothMin(PointCloud, f64),
    Fused(LatentFieldModel, f64, FusedBlend),
}

impl MethodField {
    fn eval(&self, x: &[f64]) -> Result<Option<f64>> {
        match self {
            MethodField::Gp(m) => {
                let (d, status) = distance_only(m, x)?;
                Ok((status != FieldStatus::FieldNotPositive).then_some(d))
            }
            MethodField::LogGpis(m) => match m.distance(x) {
                Ok(d) => Ok(Some(d)),
                Err(Error::FieldNotPositive { .. }) => Ok(None),
                Err(e) => Err(e),
            },
            MethodField::SmoothMin(cloud, lambda) => Ok(Some(smooth_min(cloud, x, *lambda)?)),
            MethodField::Fused(m, lambda, blend) => {
                let (d, _) = fused_only(m, x, *lambda, blend)?;
                Ok(Some(d))
            }
        }
    }
}

fn build_method_field(cfg: &BenchConfig, cloud: &PointCloud, method: Method) -> Result<MethodField> {
    let gp = |kind: KernelKind| -> Result<LatentFieldModel> {
        let kernel = KernelModel::with_alpha(kind, cfg.lengthscale, cfg.rq_alpha)?;
        LatentFieldModel::build(cloud.clone(), kernel, cfg.sigma_n)
    };
    Ok(match method {
        Method::OursSe => MethodField::Gp(gp(KernelKind::SquaredExponential)?),
        Method::OursRq => MethodField::Gp(gp(KernelKind::RationalQuadratic)?),
        Method::OursMatern => MethodField::Gp(gp(KernelKind::Matern32)?),
        Method::LogGpis => MethodField::LogGpis(LogGpisModel::from_model(gp(KernelKind::Matern32)?)?),
        Method::SmoothMin => MethodField::SmoothMin(cloud.clone(), cfg.lambda),
        Method::Fused => MethodField::Fused(gp(cfg.fused_kernel)?, cfg.lambda, cfg.blend),
    })
}

/// Runs the full protocol: per environment, build the cloud and all method
/// fields, sweep the regular query grid against the ground-truth oracle,
/// and collect the random error-vs-distance scatter. Environments fan out
/// across threads; every stream is derived from the master seed, so the
/// output is independent of scheduling.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchOutput> {
    cfg.validate()?;

    let per_env: Vec<Vec<MethodAccum>> = (0..cfg.envs)
        .into_par_iter()
        .map(|i| run_env(cfg, i as u64))
        .collect::<Result<_>>()?;

    let mut methods = Vec::with_capacity(cfg.methods.len());
    let mut scatter = Vec::with_capacity(cfg.methods.len());
    for (mi, &method) in cfg.methods.iter().enumerate() {
        let rows: Vec<EnvRow> = per_env.iter().map(|e| e[mi].row()).collect();
        let mean_of = |f: &dyn Fn(&EnvRow) -> Option<f64>| -> Option<f64> {
            let vals: Vec<f64> = rows.iter().filter_map(f).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        methods.push(MethodSummary {
            method,
            close_rmse_mean: mean_of(&|r| r.close_rmse),
            far_rmse_mean: mean_of(&|r| r.far_rmse),
            overall_rmse_mean: mean_of(&|r| r.overall_rmse),
            coverage_mean: rows.iter().map(|r| r.coverage).sum::<f64>() / rows.len() as f64,
            per_env: rows,
        });
        let pts: Vec<(f64, f64)> =
            per_env.iter().flat_map(|e| e[mi].scatter.iter().copied()).collect();
        scatter.push((method, pts));
    }
    Ok(BenchOutput {
        report: BenchReport { close_split: CLOSE_RANGE_SPLIT, sigma_n: cfg.sigma_n, methods },
        scatter,
    })
}

fn run_env(cfg: &BenchConfig, i: u64) -> Result<Vec<MethodAccum>> {
    let env = generate_environment(cfg.seed, i);
    let oracle = GroundTruthOracle::build(&env, cfg.oracle_delta)?;
    let cloud = sample_cloud(&env, cfg.gap, cfg.noise_sd, &mut seed::stream(cfg.seed, "simbench-cloud", i))?;

    let fields: Vec<MethodField> = cfg
        .methods
        .iter()
        .map(|&m| build_method_field(cfg, &cloud, m))
        .collect::<Result<_>>()?;
    let mut accums: Vec<MethodAccum> = cfg.methods.iter().map(|_| MethodAccum::new()).collect();

    let (gx, gy) = (cfg.grid[0], cfg.grid[1]);
    for iy in 0..gy {
        let y = WORKSPACE_Y.0 + (WORKSPACE_Y.1 - WORKSPACE_Y.0) * iy as f64 / (gy - 1) as f64;
        for ix in 0..gx {
            let x = WORKSPACE_X.0 + (WORKSPACE_X.1 - WORKSPACE_X.0) * ix as f64 / (gx - 1) as f64;
            let q = [x, y];
            let gt = oracle.distance(&q);
            for (field, acc) in fields.iter().zip(accums.iter_mut()) {
                acc.add(gt, field.eval(&q)?);
            }
        }
    }

    let mut rng = seed::stream(cfg.seed, "simbench-scatter", i);
    for _ in 0..cfg.scatter_per_env {
        let q = [
            rng.random_range(WORKSPACE_X.0..WORKSPACE_X.1),
            rng.random_range(WORKSPACE_Y.0..WORKSPACE_Y.1),
        ];
        let gt = oracle.distance(&q);
        for (field, acc) in fields.iter().zip(accums.iter_mut()) {
            if let Some(d) = field.eval(&q)? {
                acc.scatter.push((gt, (d - gt).abs()));
            }
        }
    }
    Ok(accums)
}

/// Calibration scene at a given noise spec and point density: one random
/// environment, its noisy cloud, and a regular grid over the ±3l band
/// around the surface (surface included) with oracle true distances.
pub fn calibration_scene(
    master: u64,
    gap: f64,
    noise_sd: f64,
    lengthscale: f64,
) -> Result<(PointCloud, PointCloud, Vec<f64>)> {
    let env = random_environment(&mut seed::stream(master, "simbench-calib-env", 0));
    let oracle = GroundTruthOracle::build(&env, DEFAULT_ORACLE_DELTA)?;
    let cloud = sample_cloud(&env, gap, noise_sd, &mut seed::stream(master, "simbench-calib-cloud", 0))?;

    let l = lengthscale;
    let band = 3.0 * l;
    let h = 0.5 * l;
    let mut grid = Vec::new();
    let mut gt = Vec::new();
    let cols = ((WORKSPACE_X.1 - WORKSPACE_X.0) / h).round() as i64;
    for c in 0..=cols {
        let x = WORKSPACE_X.0 + h * c as f64;
        let y0 = env.y(x);
        let rows = (band / h).round() as i64;
        for r in -rows..=rows {
            let q = [x, y0 + h * r as f64];
            let d = oracle.distance(&q);
            if d <= band {
                grid.push(q);
                gt.push(d);
            }
        }
    }
    Ok((cloud, PointCloud::from_points2(grid)?, gt))
}

/// Equal-count binned means of a scatter: returns (mean distance,
/// mean |error|) per bin, sorted by distance.
pub fn binned_profile(points: &[(f64, f64)], bins: usize) -> Vec<(f64, f64)> {
    if points.is_empty() || bins == 0 {
        return Vec::new();
    }
    let mut sorted: Vec<(f64, f64)> = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = sorted.len();
    let bins = bins.min(n);
    (0..bins)
        .map(|b| {
            let lo = b * n / bins;
            let hi = ((b + 1) * n / bins).max(lo + 1);
            let chunk = &sorted[lo..hi];
            let m = chunk.len() as f64;
            (
                chunk.iter().map(|p| p.0).sum::<f64>() / m,
                chunk.iter().map(|p| p.1).sum::<f64>() / m,
            )
        })
        .collect()
}

/// Least-squares fit of points to a·ln(1 + b·d): closed-form a for each
/// candidate b, golden-section over log10 b. Returns (a, b, R²).
pub fn fit_log_curve(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let sse_for = |log_b: f64| -> (f64, f64) {
        let b = 10f64.powf(log_b);
        let mut gg = 0.0;
        let mut gy = 0.0;
        for &(d, y) in points {
            let g = (1.0 + b * d).ln();
            gg += g * g;
            gy += g * y;
        }
        let a = if gg > 0.0 { gy / gg } else { 0.0 };
        let sse: f64 = points.iter().map(|&(d, y)| (y - a * (1.0 + b * d).ln()).powi(2)).sum();
        (sse, a)
    };
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let (mut lo, mut hi) = (-2.0, 4.0);
    let mut c = hi - INV_PHI * (hi - lo);
    let mut d = lo + INV_PHI * (hi - lo);
    let mut fc = sse_for(c).0;
    let mut fd = sse_for(d).0;
    while hi - lo > 1e-6 {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - INV_PHI * (hi - lo);
            fc = sse_for(c).0;
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + INV_PHI * (hi - lo);
            fd = sse_for(d).0;
        }
    }
    let log_b = 0.5 * (lo + hi);
    let (sse, a) = sse_for(log_b);
    let mean = points.iter().map(|p| p.1).sum::<f64>() / points.len().max(1) as f64;
    let sst: f64 = points.iter().map(|p| (p.1 - mean).powi(2)).sum();
    let r2 = if sst > 0.0 { 1.0 - sse / sst } else { 0.0 };
    (a, 10f64.powf(log_b), r2)
}
