//! Command-line entry point: per-subcommand configuration (TOML file
//! overlaid by flags), a run manifest written next to every output, and
//! deterministic dispatch into the library modules.
//!
//! Exit codes: 0 success, 2 configuration error (bad flags, bad config
//! file, inconsistent inputs), 1 runtime error. Unknown config keys are
//! hard errors. Re-running a subcommand with its manifest as `--config`
//! reproduces every output byte for byte (given unchanged input files).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::calibrate::learn_sigma_n;
use crate::distance::query_distance;
use crate::echoloc::{
    random_walk_steps, run_filter, DistanceOracle, FilterConfig, OracleKind, TrajectoryStep,
    DEFAULT_BOUNDARY_GAP,
};
use crate::error::{Error, Result};
use crate::gp_field::{LatentFieldModel, PointCloud};
use crate::kernels::{KernelKind, KernelModel, DEFAULT_RQ_ALPHA};
use crate::mapping::{
    default_q, init_virtual_points, polygon_perimeter, solve_stage1, solve_stage2, MapFieldKind,
    MapState, StageReport, DEFAULT_REG_ALPHA,
};
use crate::seed;
use crate::simbench::{lengthscale_from_gap, run_benchmark, BenchConfig, DEFAULT_POINT_GAP, DEFAULT_NOISE_SD};
use crate::ugw_signal::{
    envelope, first_echo_distance, read_archive, synthesize_measurement, write_archive, PlateScene,
    TemplateBank, UgwConfig,
};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Default echo-peak acceptance parameters for the mapping pipeline.
pub const DEFAULT_ECHO_THRESHOLD: f64 = 0.4;
pub const DEFAULT_ECHO_PROMINENCE: f64 = 0.1;

/// Run manifest written next to every output: the fully resolved config
/// plus enough metadata to re-run it. Loadable back via `--config`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest<C> {
    pub artifact_version: String,
    pub subcommand: String,
    pub master_seed: u64,
    pub config: C,
}

/// `report.json` -> `report.manifest.toml`; a directory output gets a
/// sibling file named after it.
pub fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.toml")
}

fn write_manifest<C: Serialize>(out: &Path, subcommand: &str, master_seed: u64, config: &C) -> Result<PathBuf> {
    let manifest = Manifest {
        artifact_version: ARTIFACT_VERSION.to_string(),
        subcommand: subcommand.to_string(),
        master_seed,
        config,
    };
    let body = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::config(format!("manifest serialization: {e}")))?;
    let path = manifest_path(out);
    fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads a subcommand config from a TOML file: either a bare config table
/// or a previously written manifest (whose subcommand must match). Missing
/// file argument means defaults; unknown keys are hard errors either way.
pub fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>, subcommand: &str) -> Result<C> {
    let Some(path) = path else { return Ok(C::default()) };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    if table.contains_key("artifact_version") || table.contains_key("subcommand") {
        let manifest: Manifest<C> = toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        if manifest.subcommand != subcommand {
            return Err(Error::config(format!(
                "{}: manifest is for subcommand {:?}, not {subcommand:?}",
                path.display(),
                manifest.subcommand
            )));
        }
        Ok(manifest.config)
    } else {
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }
}

fn parse_grid(s: &str) -> std::result::Result<[usize; 2], String> {
    let (a, b) = s
        .split_once('x')
        .ok_or_else(|| format!("expected NXxNY (e.g. 200x200), got {s:?}"))?;
    let nx: usize = a.trim().parse().map_err(|e| format!("bad grid width {a:?}: {e}"))?;
    let ny: usize = b.trim().parse().map_err(|e| format!("bad grid height {b:?}: {e}"))?;
    if nx == 0 || ny == 0 {
        return Err("grid dimensions must be >= 1".into());
    }
    Ok([nx, ny])
}

fn parse_methods(s: &str) -> std::result::Result<Vec<crate::simbench::Method>, String> {
    s.split(',')
        .map(|m| m.trim().parse().map_err(|e| format!("{e}")))
        .collect()
}

fn parse_oracle(s: &str) -> std::result::Result<OracleKind, String> {
    match s {
        "ours" | "gp-field" => Ok(OracleKind::GpField),
        "loggpis" | "log-gpis" => Ok(OracleKind::LogGpis),
        "rect" | "rect-analytic" => Ok(OracleKind::RectAnalytic),
        other => Err(format!("unknown oracle {other:?} (expected ours, loggpis or rect)")),
    }
}

fn parse_map_field(s: &str) -> std::result::Result<MapFieldKind, String> {
    match s {
        "ours" | "reverting" => Ok(MapFieldKind::Reverting),
        "loggpis" | "log-gpis" => Ok(MapFieldKind::LogGpis),
        other => Err(format!("unknown field kind {other:?} (expected reverting or loggpis)")),
    }
}

/// Shortest round-trip float text; always a valid TOML/CSV float.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Output path sibling: `report.json` + "_scatter" + "csv" ->
/// `report_scatter.csv`.
fn sibling(out: &Path, suffix: &str, ext: &str) -> PathBuf {
    let stem = out.file_stem().unwrap_or_default().to_string_lossy();
    out.with_file_name(format!("{stem}{suffix}.{ext}"))
}

#[derive(Parser)]
#[command(name = "revert-field", version, about = "GP distance fields by kernel inversion: benchmark, echolocation and mapping tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulated distance-field benchmark over random environments.
    BenchDistance(BenchArgs),
    /// Learn the corrective noise term sigma_n on a calibration scene.
    CalibrateNoise(CalibrateArgs),
    /// Evaluate a distance field built from a point cloud on a query grid.
    FieldGrid(FieldGridArgs),
    /// Synthesize a guided-wave measurement archive for a plate scene.
    UgwSim(UgwSimArgs),
    /// Particle-filter echolocation over trajectories on a plate scene.
    Echoloc(EcholocArgs),
    /// Two-stage virtual-observation mapping from a measurement archive.
    Map(MapArgs),
}

#[derive(Args)]
struct BenchArgs {
    /// TOML config file (bare table or a previous run manifest).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    envs: Option<usize>,
    /// Total queries per environment; must be a square number (the query
    /// grid is square). Use --grid for non-square layouts.
    #[arg(long, conflicts_with = "grid")]
    queries: Option<usize>,
    #[arg(long, value_parser = parse_grid)]
    grid: Option<[usize; 2]>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated: ours-se,ours-rq,ours-matern,loggpis,smoothmin,fused.
    #[arg(long, value_parser = parse_methods)]
    methods: Option<Vec<crate::simbench::Method>>,
    /// Report JSON path; the scatter CSV and manifest are written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrateConfig {
    pub seed: u64,
    pub point_gap: f64,
    pub noise_sd: f64,
    /// Defaults to 1.5 * point_gap when absent.
    pub lengthscale: Option<f64>,
    pub kernel: KernelKind,
    pub rq_alpha: f64,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        CalibrateConfig {
            seed: 1,
            point_gap: DEFAULT_POINT_GAP,
            noise_sd: DEFAULT_NOISE_SD,
            lengthscale: None,
            kernel: KernelKind::RationalQuadratic,
            rq_alpha: DEFAULT_RQ_ALPHA,
        }
    }
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    noise_sd: Option<f64>,
    #[arg(long)]
    point_gap: Option<f64>,
    #[arg(long)]
    lengthscale: Option<f64>,
    #[arg(long, value_enum)]
    kernel: Option<KernelKindArg>,
    #[arg(long)]
    rq_alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output TOML holding the learned `sigma_n` (a valid config fragment).
    #[arg(long, default_value = "sigma_n.toml")]
    out: PathBuf,
}

/// clap-friendly kernel names matching the config-file spellings.
#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum KernelKindArg {
    #[value(name = "se")]
    Se,
    #[value(name = "rq")]
    Rq,
    #[value(name = "matern32")]
    Matern32,
}

impl From<KernelKindArg> for KernelKind {
    fn from(k: KernelKindArg) -> Self {
        match k {
            KernelKindArg::Se => KernelKind::SquaredExponential,
            KernelKindArg::Rq => KernelKind::RationalQuadratic,
            KernelKindArg::Matern32 => KernelKind::Matern32,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldGridConfig {
    /// Input point cloud CSV (`x,y[,z]`, header optional).
    pub cloud: Option<PathBuf>,
    pub kernel: KernelKind,
    pub lengthscale: Option<f64>,
    pub rq_alpha: f64,
    pub sigma_n: f64,
    pub grid: [usize; 2],
    /// Query window [xmin, xmax, ymin, ymax]; defaults to the cloud
    /// bounding box padded by 3 lengthscales.
    pub bounds: Option<[f64; 4]>,
}

impl Default for FieldGridConfig {
    fn default() -> Self {
        FieldGridConfig {
            cloud: None,
            kernel: KernelKind::RationalQuadratic,
            lengthscale: None,
            rq_alpha: DEFAULT_RQ_ALPHA,
            sigma_n: 1e-3,
            grid: [200, 200],
            bounds: None,
        }
    }
}

#[derive(Args)]
struct FieldGridArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    cloud: Option<PathBuf>,
    #[arg(long, value_enum)]
    kernel: Option<KernelKindArg>,
    #[arg(long)]
    lengthscale: Option<f64>,
    #[arg(long)]
    rq_alpha: Option<f64>,
    #[arg(long)]
    sigma_n: Option<f64>,
    #[arg(long, value_parser = parse_grid)]
    grid: Option<[usize; 2]>,
    /// Query CSV output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UgwSimConfig {
    pub seed: u64,
    pub width: f64,
    pub height: f64,
    /// Source grid (nx x ny interior measurement positions).
    pub grid: [usize; 2],
    pub ugw: UgwConfig,
}

impl Default for UgwSimConfig {
    fn default() -> Self {
        UgwSimConfig { seed: 1, width: 0.6, height: 0.45, grid: [9, 12], ugw: UgwConfig::default() }
    }
}

#[derive(Args)]
struct UgwSimArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    width: Option<f64>,
    #[arg(long)]
    height: Option<f64>,
    #[arg(long, value_parser = parse_grid)]
    grid: Option<[usize; 2]>,
    #[arg(long)]
    seed: Option<u64>,
    /// Archive output directory.
    #[arg(long)]
    out: PathBuf,
    /// Also export one measurement's correlation envelope as CSV `d,e`.
    #[arg(long)]
    envelope_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 0, requires = "envelope_csv")]
    envelope_index: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EcholocConfig {
    pub seed: u64,
    /// Scene JSON (polygon + sources); alternative to `measurements`.
    pub scene: Option<PathBuf>,
    /// Measurement archive directory; brings its own scene and signals.
    pub measurements: Option<PathBuf>,
    /// Trajectory JSON: a step list or a list of step lists.
    pub traj: Option<PathBuf>,
    /// Generate this many random grid walks instead of loading `traj`.
    pub walks: usize,
    pub walk_steps: usize,
    /// Source-grid dimensions backing the walk graph.
    pub walk_grid: [usize; 2],
    pub boundary_gap: f64,
    pub kernel: KernelKind,
    pub lengthscale: f64,
    pub rq_alpha: f64,
    pub sigma_n: f64,
    pub filter: FilterConfig,
    /// Signal model for on-the-fly synthesis in `scene` mode.
    pub ugw: UgwConfig,
}

impl Default for EcholocConfig {
    fn default() -> Self {
        EcholocConfig {
            seed: 1,
            scene: None,
            measurements: None,
            traj: None,
            walks: 0,
            walk_steps: 300,
            walk_grid: [9, 12],
            boundary_gap: DEFAULT_BOUNDARY_GAP,
            kernel: KernelKind::RationalQuadratic,
            lengthscale: 1.5 * DEFAULT_BOUNDARY_GAP,
            rq_alpha: DEFAULT_RQ_ALPHA,
            sigma_n: 1e-3,
            filter: FilterConfig::default(),
            ugw: UgwConfig::default(),
        }
    }
}

#[derive(Args)]
struct EcholocArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    measurements: Option<PathBuf>,
    #[arg(long)]
    traj: Option<PathBuf>,
    /// Generate N random grid walks instead of --traj.
    #[arg(long, conflicts_with = "traj")]
    random_walks: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_parser = parse_oracle)]
    oracle: Option<OracleKind>,
    #[arg(long)]
    seed: Option<u64>,
    /// Errors CSV: `step,err_m` (single trajectory) or `traj,step,err_m`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapConfig {
    /// Measurement archive directory (scene, signals, signal config).
    pub measurements: Option<PathBuf>,
    pub kernel: KernelKind,
    pub lengthscale: f64,
    pub rq_alpha: f64,
    pub sigma_n: f64,
    /// Chain regularizer weight.
    pub reg_alpha: f64,
    /// Virtual-observation count; defaults to perimeter / 1.5 lengthscales.
    pub q: Option<usize>,
    pub field: MapFieldKind,
    pub echo_threshold: f64,
    pub echo_prominence: f64,
    /// Envelope-only ablation: start stage 2 from the initial circle.
    pub skip_stage1: bool,
    /// Field CSV resolution and bounding-box margin (m).
    pub grid: [usize; 2],
    pub grid_margin: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            measurements: None,
            kernel: KernelKind::RationalQuadratic,
            lengthscale: 0.06,
            rq_alpha: DEFAULT_RQ_ALPHA,
            sigma_n: 1e-3,
            reg_alpha: DEFAULT_REG_ALPHA,
            q: None,
            field: MapFieldKind::Reverting,
            echo_threshold: DEFAULT_ECHO_THRESHOLD,
            echo_prominence: DEFAULT_ECHO_PROMINENCE,
            skip_stage1: false,
            grid: [61, 46],
            grid_margin: 0.02,
        }
    }
}

#[derive(Args)]
struct MapArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    measurements: Option<PathBuf>,
    #[arg(long, value_enum)]
    kernel: Option<KernelKindArg>,
    #[arg(long)]
    lengthscale: Option<f64>,
    #[arg(long)]
    rq_alpha: Option<f64>,
    #[arg(long)]
    sigma_n: Option<f64>,
    /// Chain regularizer weight.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    q: Option<usize>,
    #[arg(long, value_parser = parse_map_field)]
    field: Option<MapFieldKind>,
    #[arg(long)]
    skip_stage1: bool,
    /// Map JSON output; the field CSV and manifest are written next to it.
    #[arg(long)]
    out: PathBuf,
}

/// Full CLI: parse, resolve, dispatch. Returns the process exit code.
pub fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return 2;
    }
    let result = match cli.command {
        Command::BenchDistance(args) => run_bench(args),
        Command::CalibrateNoise(args) => run_calibrate(args),
        Command::FieldGrid(args) => run_field_grid(args),
        Command::UgwSim(args) => run_ugw_sim(args),
        Command::Echoloc(args) => run_echoloc(args),
        Command::Map(args) => run_map(args),
    };
    match result {
        Ok(()) => 0,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// `REVERT_FIELD_THREADS` caps the rayon worker count for the process.
fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("REVERT_FIELD_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .map_err(|_| Error::config(format!("REVERT_FIELD_THREADS must be a positive integer, got {v:?}")))?;
    if n == 0 {
        return Err(Error::config("REVERT_FIELD_THREADS must be >= 1"));
    }
    // Ignore AlreadyInitialized: tests may run several commands in-process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Errors during config resolution are configuration errors (exit 2)
/// regardless of the underlying variant.
fn to_config(e: Error) -> Error {
    match e {
        e @ Error::Config(_) => e,
        other => Error::config(other.to_string()),
    }
}

fn run_bench(args: BenchArgs) -> Result<()> {
    let mut cfg: BenchConfig = load_config(args.config.as_deref(), "bench-distance")?;
    if let Some(envs) = args.envs {
        cfg.envs = envs;
    }
    if let Some(queries) = args.queries {
        let side = (queries as f64).sqrt().round() as usize;
        if side * side != queries {
            return Err(Error::config(format!(
                "--queries {queries} is not a square number; use --grid NXxNY"
            )));
        }
        cfg.grid = [side, side];
    }
    if let Some(grid) = args.grid {
        cfg.grid = grid;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(methods) = args.methods {
        cfg.methods = methods;
    }
    cfg.validate().map_err(to_config)?;

    let output = run_benchmark(&cfg)?;
    let report = serde_json::to_string_pretty(&output.report)
        .map_err(|e| Error::invalid(format!("report serialization: {e}")))?;
    write_text(&args.out, &(report + "\n"))?;
    println!("wrote {}", args.out.display());

    let mut csv = String::from("method,true_d,abs_err\n");
    for (method, rows) in &output.scatter {
        for &(d, err) in rows {
            let _ = writeln!(csv, "{method},{},{}", fmt_f64(d), fmt_f64(err));
        }
    }
    let scatter_path = sibling(&args.out, "_scatter", "csv");
    write_text(&scatter_path, &csv)?;
    println!("wrote {}", scatter_path.display());

    let manifest = write_manifest(&args.out, "bench-distance", cfg.seed, &cfg)?;
    println!("wrote {}", manifest.display());
    Ok(())
}

fn run_calibrate(args: CalibrateArgs) -> Result<()> {
    let mut cfg: CalibrateConfig = load_config(args.config.as_deref(), "calibrate-noise")?;
    if let Some(v) = args.noise_sd {
        cfg.noise_sd = v;
    }
    if let Some(v) = args.point_gap {
        cfg.point_gap = v;
    }
    if let Some(v) = args.lengthscale {
        cfg.lengthscale = Some(v);
    }
    if let Some(k) = args.kernel {
        cfg.kernel = k.into();
    }
    if let Some(v) = args.rq_alpha {
        cfg.rq_alpha = v;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let lengthscale = cfg.lengthscale.unwrap_or(lengthscale_from_gap(cfg.point_gap));
    let kernel = KernelModel::with_alpha(cfg.kernel, lengthscale, cfg.rq_alpha).map_err(to_config)?;

    let (cloud, grid, gt) =
        crate::simbench::calibration_scene(cfg.seed, cfg.point_gap, cfg.noise_sd, lengthscale)?;
    let result = learn_sigma_n(&cloud, &kernel, &grid, &gt)?;
    write_text(&args.out, &format!("sigma_n = {}\n", fmt_f64(result.sigma_n)))?;
    println!("sigma_n = {}", fmt_f64(result.sigma_n));
    println!("wrote {}", args.out.display());

    let manifest = write_manifest(&args.out, "calibrate-noise", cfg.seed, &cfg)?;
    println!("wrote {}", manifest.display());
    Ok(())
}

fn run_field_grid(args: FieldGridArgs) -> Result<()> {
    let mut cfg: FieldGridConfig = load_config(args.config.as_deref(), "field-grid")?;
    if let Some(p) = args.cloud {
        cfg.cloud = Some(p);
    }
    if let Some(k) = args.kernel {
        cfg.kernel = k.into();
    }
    if let Some(v) = args.lengthscale {
        cfg.lengthscale = Some(v);
    }
    if let Some(v) = args.rq_alpha {
        cfg.rq_alpha = v;
    }
    if let Some(v) = args.sigma_n {
        cfg.sigma_n = v;
    }
    if let Some(g) = args.grid {
        cfg.grid = g;
    }
    let cloud_path = cfg.cloud.clone().ok_or_else(|| Error::config("--cloud (or config key `cloud`) is required"))?;
    let lengthscale = cfg
        .lengthscale
        .ok_or_else(|| Error::config("--lengthscale (or config key `lengthscale`) is required"))?;
    let kernel = KernelModel::with_alpha(cfg.kernel, lengthscale, cfg.rq_alpha).map_err(to_config)?;

    let cloud = PointCloud::read_csv(&cloud_path).map_err(to_config)?;
    if cloud.dim() != 2 {
        return Err(Error::config("field-grid expects a 2D cloud (x,y)"));
    }
    let bounds = cfg.bounds.unwrap_or_else(|| {
        let pad = 3.0 * lengthscale;
        let mut b = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
        for p in cloud.iter() {
            b[0] = b[0].min(p[0]);
            b[1] = b[1].max(p[0]);
            b[2] = b[2].min(p[1]);
            b[3] = b[3].max(p[1]);
        }
        [b[0] - pad, b[1] + pad, b[2] - pad, b[3] + pad]
    });
    if !(bounds[0] < bounds[1] && bounds[2] < bounds[3]) {
        return Err(Error::config(format!("degenerate bounds {bounds:?}")));
    }

    let model = LatentFieldModel::build(cloud, kernel, cfg.sigma_n)?;
    let [nx, ny] = cfg.grid;
    let mut csv = String::from("x,y,d_hat,o_hat,grad_x,grad_y,uncertainty,status\n");
    for iy in 0..ny {
        let y = bounds[2] + (bounds[3] - bounds[2]) * iy as f64 / (ny - 1).max(1) as f64;
        for ix in 0..nx {
            let x = bounds[0] + (bounds[1] - bounds[0]) * ix as f64 / (nx - 1).max(1) as f64;
            let q = query_distance(&model, &[x, y])?;
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{}",
                fmt_f64(x),
                fmt_f64(y),
                fmt_f64(q.d_hat),
                fmt_f64(q.o_hat),
                fmt_f64(q.grad[0]),
                fmt_f64(q.grad[1]),
                fmt_f64(q.uncertainty),
                q.status
            );
        }
    }
    write_text(&args.out, &csv)?;
    println!("wrote {}", args.out.display());

    let manifest = write_manifest(&args.out, "field-grid", 0, &cfg)?;
    println!("wrote {}", manifest.display());
    Ok(())
}

fn run_ugw_sim(args: UgwSimArgs) -> Result<()> {
    let mut cfg: UgwSimConfig = load_config(args.config.as_deref(), "ugw-sim")?;
    if let Some(v) = args.width {
        cfg.width = v;
    }
    if let Some(v) = args.height {
        cfg.height = v;
    }
    if let Some(g) = args.grid {
        cfg.grid = g;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let scene = PlateScene::rectangle(cfg.width, cfg.height).with_source_grid(cfg.grid[0], cfg.grid[1]);
    scene.validate().map_err(to_config)?;
    cfg.ugw.validate_for_scene(&scene).map_err(to_config)?;

    write_archive(&args.out, &scene, &cfg.ugw, cfg.seed)?;
    println!("wrote {} ({} measurements)", args.out.display(), scene.sources.len());

    if let Some(env_path) = &args.envelope_csv {
        let (manifest, signals) = read_archive(&args.out)?;
        let z = signals
            .get(args.envelope_index)
            .ok_or_else(|| Error::config(format!("--envelope-index {} out of range", args.envelope_index)))?;
        let bank = TemplateBank::new(&manifest.config, manifest.scene.diagonal())?;
        let e = envelope(z, &bank)?;
        e.write_csv(env_path)?;
        println!("wrote {}", env_path.display());
    }

    let manifest = write_manifest(&args.out, "ugw-sim", cfg.seed, &cfg)?;
    println!("wrote {}", manifest.display());
    Ok(())
}

fn run_echoloc(args: EcholocArgs) -> Result<()> {
    let mut cfg: EcholocConfig = load_config(args.config.as_deref(), "echoloc")?;
    if let Some(p) = args.scene {
        cfg.scene = Some(p);
    }
    if let Some(p) = args.measurements {
        cfg.measurements = Some(p);
    }
    if let Some(p) = args.traj {
        cfg.traj = Some(p);
    }
    if let Some(n) = args.random_walks {
        cfg.walks = n;
    }
    if let Some(n) = args.steps {
        cfg.walk_steps = n;
    }
    if let Some(o) = args.oracle {
        cfg.filter.distance_oracle = o;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.filter.validate().map_err(to_config)?;
    let kernel = KernelModel::with_alpha(cfg.kernel, cfg.lengthscale, cfg.rq_alpha).map_err(to_config)?;

    // Scene and signals: an archive brings both; a bare scene gets
    // deterministic on-the-fly synthesis with the archive's stream labels.
    let (scene, signals, ugw_cfg) = match (&cfg.measurements, &cfg.scene) {
        (Some(_), Some(_)) => {
            return Err(Error::config("--measurements and --scene are mutually exclusive"))
        }
        (Some(dir), None) => {
            let (manifest, signals) = read_archive(dir).map_err(to_config)?;
            (manifest.scene, signals, manifest.config)
        }
        (None, Some(path)) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let scene: PlateScene = serde_json::from_str(&text)
                .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
            scene.validate().map_err(to_config)?;
            cfg.ugw.validate_for_scene(&scene).map_err(to_config)?;
            let signals = scene
                .sources
                .iter()
                .enumerate()
                .map(|(i, &p)| {
                    let mut rng = seed::stream(cfg.seed, "ugw-measurement", i as u64);
                    synthesize_measurement(&scene, p, &cfg.ugw, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            (scene, signals, cfg.ugw.clone())
        }
        (None, None) => return Err(Error::config("either --measurements or --scene is required")),
    };

    let bank = TemplateBank::new(&ugw_cfg, scene.diagonal())?;
    let envelopes = signals
        .iter()
        .map(|z| envelope(z, &bank))
        .collect::<Result<Vec<_>>>()?;

    let trajectories: Vec<Vec<TrajectoryStep>> = match (&cfg.traj, cfg.walks) {
        (Some(_), n) if n > 0 => {
            return Err(Error::config("--traj and --random-walks are mutually exclusive"))
        }
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            // Either one trajectory or a list of them.
            serde_json::from_str::<Vec<Vec<TrajectoryStep>>>(&text)
                .or_else(|_| serde_json::from_str::<Vec<TrajectoryStep>>(&text).map(|t| vec![t]))
                .map_err(|e| Error::config(format!("{}: {e}", path.display())))?
        }
        (None, 0) => return Err(Error::config("either --traj or --random-walks is required")),
        (None, walks) => {
            let [nx, ny] = cfg.walk_grid;
            (0..walks)
                .map(|t| {
                    let mut rng = seed::stream(cfg.seed, "echoloc-walk", t as u64);
                    random_walk_steps(&scene.sources, nx, ny, cfg.walk_steps, &mut rng)
                })
                .collect::<Result<Vec<_>>>()
                .map_err(to_config)?
        }
    };

    let oracle =
        DistanceOracle::build(cfg.filter.distance_oracle, &scene, cfg.boundary_gap, &kernel, cfg.sigma_n)?;
    let runs = trajectories
        .par_iter()
        .enumerate()
        .map(|(t, steps)| {
            let mut rng = seed::stream(cfg.seed, "echoloc-traj", t as u64);
            run_filter(steps, &envelopes, &scene, &oracle, &cfg.filter, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    let single = runs.len() == 1;
    let mut csv = String::from(if single { "step,err_m\n" } else { "traj,step,err_m\n" });
    for (t, run) in runs.iter().enumerate() {
        for (i, err) in run.errors.iter().enumerate() {
            let Some(err) = err else { continue };
            if single {
                let _ = writeln!(csv, "{},{}", i + 1, fmt_f64(*err));
            } else {
                let _ = writeln!(csv, "{t},{},{}", i + 1, fmt_f64(*err));
            }
        }
    }
    write_text(&args.out, &csv)?;
    println!("wrote {} ({} trajectories)", args.out.display(), runs.len());

    let manifest = write_manifest(&args.out, "echoloc", cfg.seed, &cfg)?;
    println!("wrote {}", manifest.display());
    Ok(())
}

/// Map run output: the optimized chain plus both stage reports.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MapOutput {
    pub virtual_points: Vec<[f64; 2]>,
    pub q: usize,
    pub first_echoes: Vec<f64>,
    pub stage1: Option<StageReport>,
    pub stage2: StageReport,
    pub field_csv: String,
}

fn run_map(args: MapArgs) -> Result<()> {
    let mut cfg: MapConfig = load_config(args.config.as_deref(), "map")?;
    if let Some(p) = args.measurements {
        cfg.measurements = Some(p);
    }
    if let Some(k) = args.kernel {
        cfg.kernel = k.into();
    }
    if let Some(v) = args.lengthscale {
        cfg.lengthscale = v;
    }
    if let Some(v) = args.rq_alpha {
        cfg.rq_alpha = v;
    }
    if let Some(v) = args.sigma_n {
        cfg.sigma_n = v;
    }
    if let Some(v) = args.alpha {
        cfg.reg_alpha = v;
    }
    if let Some(q) = args.q {
        cfg.q = Some(q);
    }
    if let Some(f) = args.field {
        cfg.field = f;
    }
    if args.skip_stage1 {
        cfg.skip_stage1 = true;
    }
    let dir = cfg
        .measurements
        .clone()
        .ok_or_else(|| Error::config("--measurements (or config key `measurements`) is required"))?;
    let kernel = KernelModel::with_alpha(cfg.kernel, cfg.lengthscale, cfg.rq_alpha).map_err(to_config)?;

    let (archive, signals) = read_archive(&dir).map_err(to_config)?;
    let scene = archive.scene;
    let sensors = scene.sources.clone();
    let bank = TemplateBank::new(&archive.config, scene.diagonal())?;
    let envelopes = signals
        .iter()
        .map(|z| envelope(z, &bank))
        .collect::<Result<Vec<_>>>()?;
    let echoes = envelopes
        .iter()
        .enumerate()
        .map(|(i, e)| {
            first_echo_distance(e, cfg.echo_threshold, cfg.echo_prominence)
                .map_err(|e| Error::invalid(format!("measurement {i}: {e}")))
        })
        .collect::<Result<Vec<f64>>>()?;

    let q = cfg
        .q
        .unwrap_or_else(|| default_q(polygon_perimeter(&scene.polygon), cfg.lengthscale));
    let state = MapState {
        virtual_points: init_virtual_points(&sensors, &echoes, q)?,
        reg_alpha: cfg.reg_alpha,
        kernel,
        sigma_n: cfg.sigma_n,
        field: cfg.field,
    };

    let (state, stage1) = if cfg.skip_stage1 {
        (state, None)
    } else {
        let (s, report) = solve_stage1(&sensors, &echoes, &state)?;
        (s, Some(report))
    };
    let (final_state, stage2) = solve_stage2(&sensors, &envelopes, &state)?;

    let field_csv_path = sibling(&args.out, "_field", "csv");
    let field = final_state.field_eval()?;
    let (lo, hi) = scene.bounds();
    let m = cfg.grid_margin;
    let [nx, ny] = cfg.grid;
    let mut csv = String::from("x,y,d_hat,fallback\n");
    for iy in 0..ny {
        let y = (lo[1] - m) + (hi[1] - lo[1] + 2.0 * m) * iy as f64 / (ny - 1).max(1) as f64;
        for ix in 0..nx {
            let x = (lo[0] - m) + (hi[0] - lo[0] + 2.0 * m) * ix as f64 / (nx - 1).max(1) as f64;
            let (d, fell_back) = field.distance([x, y])?;
            let _ = writeln!(csv, "{},{},{},{}", fmt_f64(x), fmt_f64(y), fmt_f64(d), fell_back as u8);
        }
    }
    write_text(&field_csv_path, &csv)?;
    println!("wrote {}", field_csv_path.display());

    let output = MapOutput {
        virtual_points: final_state.virtual_points.clone(),
        q,
        first_echoes: echoes,
        stage1,
        stage2,
        field_csv: field_csv_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    let body = serde_json::to_string_pretty(&output)
        .map_err(|e| Error::invalid(format!("map serialization: {e}")))?;
    write_text(&args.out, &(body + "\n"))?;
    println!("wrote {}", args.out.display());

    let manifest = write_manifest(&args.out, "map", archive.seed, &cfg)?;
    println!("wrote {}", manifest.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn run_cli(args: &[&str]) -> u8 {
        let argv = std::iter::once("revert-field").chain(args.iter().copied());
        run(argv)
    }

    #[test]
    fn grid_parser_accepts_nxn_and_rejects_garbage() {
        assert_eq!(parse_grid("200x200").unwrap(), [200, 200]);
        assert_eq!(parse_grid("9x12").unwrap(), [9, 12]);
        assert!(parse_grid("200").is_err());
        assert!(parse_grid("0x5").is_err());
        assert!(parse_grid("axb").is_err());
    }

    #[test]
    fn missing_config_file_argument_means_defaults() {
        let cfg: BenchConfig = load_config(None, "bench-distance").unwrap();
        assert_eq!(cfg.envs, BenchConfig::default().envs);
    }

    #[test]
    fn unknown_config_keys_are_hard_errors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        fs::write(&path, "envs = 3\ntypo_key = 1\n").unwrap();
        let err = load_config::<BenchConfig>(Some(&path), "bench-distance").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        assert!(err.to_string().contains("typo_key"), "{err}");
    }

    #[test]
    fn manifest_round_trips_as_config() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("report.json");
        let mut cfg = BenchConfig::default();
        cfg.envs = 7;
        cfg.seed = 99;
        write_manifest(&out, "bench-distance", cfg.seed, &cfg).unwrap();
        let path = manifest_path(&out);
        assert!(path.ends_with("report.manifest.toml"));
        let back: BenchConfig = load_config(Some(&path), "bench-distance").unwrap();
        assert_eq!(back.envs, 7);
        assert_eq!(back.seed, 99);
        let err = load_config::<BenchConfig>(Some(&path), "field-grid").unwrap_err();
        assert!(err.to_string().contains("bench-distance"), "{err}");
    }

    #[test]
    fn partial_config_fragment_overlays_defaults() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("sigma.toml");
        fs::write(&path, "sigma_n = 0.0042\n").unwrap();
        let cfg: BenchConfig = load_config(Some(&path), "bench-distance").unwrap();
        assert_eq!(cfg.sigma_n, 0.0042);
        assert_eq!(cfg.envs, BenchConfig::default().envs);
    }

    #[test]
    fn help_exits_zero_and_missing_required_flag_exits_two() {
        assert_eq!(run_cli(&["--help"]), 0);
        assert_eq!(run_cli(&["field-grid"]), 2); // no --out
        assert_eq!(run_cli(&["bench-distance", "--out", "x.json", "--queries", "1000"]), 2);
        assert_eq!(run_cli(&["no-such-command"]), 2);
    }

    #[test]
    fn field_grid_runs_and_is_byte_reproducible() {
        let dir = tempdir().unwrap();
        let cloud = dir.path().join("pts.csv");
        let mut body = String::from("x,y\n");
        for i in 0..15 {
            body.push_str(&format!("{},0.0\n", 0.04 * i as f64));
        }
        fs::write(&cloud, body).unwrap();
        let out1 = dir.path().join("grid1.csv");
        let out2 = dir.path().join("grid2.csv");
        let base = [
            "field-grid",
            "--cloud",
            cloud.to_str().unwrap(),
            "--kernel",
            "rq",
            "--lengthscale",
            "0.06",
            "--grid",
            "12x8",
        ];
        let mut args1: Vec<&str> = base.to_vec();
        args1.extend(["--out", out1.to_str().unwrap()]);
        assert_eq!(run_cli(&args1), 0);

        // Second run driven purely by the first run's manifest.
        let manifest = manifest_path(&out1);
        let args2 = ["field-grid", "--config", manifest.to_str().unwrap(), "--out", out2.to_str().unwrap()];
        assert_eq!(run_cli(&args2), 0);
        let a = fs::read(&out1).unwrap();
        let b = fs::read(&out2).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b);
        let header = String::from_utf8(a).unwrap();
        assert!(header.starts_with("x,y,d_hat,o_hat,grad_x,grad_y,uncertainty,status\n"));
    }

    #[test]
    fn calibrate_noise_emits_a_loadable_sigma_fragment() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("sigma.toml");
        let args = [
            "calibrate-noise",
            "--point-gap",
            "0.12",
            "--noise-sd",
            "0.0",
            "--kernel",
            "se",
            "--out",
            out.to_str().unwrap(),
        ];
        assert_eq!(run_cli(&args), 0);
        let cfg: BenchConfig = load_config(Some(&out), "bench-distance").unwrap();
        assert!(cfg.sigma_n > 0.0 && cfg.sigma_n <= 1.0);
    }

    #[test]
    fn ugw_sim_then_echoloc_and_map_run_end_to_end() {
        let dir = tempdir().unwrap();
        let archive = dir.path().join("archive");
        let args = [
            "ugw-sim",
            "--width",
            "0.6",
            "--height",
            "0.45",
            "--grid",
            "3x3",
            "--seed",
            "7",
            "--out",
            archive.to_str().unwrap(),
        ];
        assert_eq!(run_cli(&args), 0);
        assert!(archive.join("manifest.json").is_file());
        assert!(archive.join("meas_008.csv").is_file());

        // Small filter config to keep the test fast.
        let cfg_path = dir.path().join("echo.toml");
        fs::write(
            &cfg_path,
            "walk_grid = [3, 3]\nwalk_steps = 6\n[filter]\nn_particles = 40\ndistance_oracle = \"rect-analytic\"\n",
        )
        .unwrap();
        let errors = dir.path().join("errors.csv");
        let args = [
            "echoloc",
            "--config",
            cfg_path.to_str().unwrap(),
            "--measurements",
            archive.to_str().unwrap(),
            "--random-walks",
            "2",
            "--seed",
            "7",
            "--out",
            errors.to_str().unwrap(),
        ];
        assert_eq!(run_cli(&args), 0);
        let body = fs::read_to_string(&errors).unwrap();
        assert!(body.starts_with("traj,step,err_m\n"));
        assert_eq!(body.lines().count(), 1 + 2 * 6);

        let map_out = dir.path().join("map.json");
        let args = [
            "map",
            "--measurements",
            archive.to_str().unwrap(),
            "--kernel",
            "rq",
            "--alpha",
            "1e-3",
            "--q",
            "8",
            "--out",
            map_out.to_str().unwrap(),
        ];
        assert_eq!(run_cli(&args), 0);
        let body = fs::read_to_string(&map_out).unwrap();
        let output: MapOutput = serde_json::from_str(&body).unwrap();
        assert_eq!(output.virtual_points.len(), 8);
        assert!(output.stage1.is_some());
        assert!(dir.path().join("map_field.csv").is_file());
    }

    #[test]
    fn echoloc_rejects_conflicting_inputs() {
        let dir = tempdir().unwrap();
        let scene = dir.path().join("scene.json");
        fs::write(&scene, "{}").unwrap();
        let out = dir.path().join("e.csv");
        let args = [
            "echoloc",
            "--scene",
            scene.to_str().unwrap(),
            "--measurements",
            dir.path().to_str().unwrap(),
            "--random-walks",
            "1",
            "--out",
            out.to_str().unwrap(),
        ];
        assert_eq!(run_cli(&args), 2);
    }
}
