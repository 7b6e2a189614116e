//! Synthetic ultrasonic-guided-wave pipeline: Hann toneburst excitation,
//! first-order image-source echoes propagated through the cylindrical
//! transfer function g(r, w) = exp(-j k(w) r) / sqrt(k(w) r), normalized
//! correlation against distance-indexed templates, Hilbert envelope, and
//! first-echo peak extraction.

use std::fs;
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::lerp_uniform;
use crate::seed;

pub const DEFAULT_SAMPLE_RATE: f64 = 1.0e6;
pub const DEFAULT_DURATION: f64 = 1.0e-3;
pub const DEFAULT_CENTER_FREQ: f64 = 1.0e5;
/// "Two-tone burst" read as a two-cycle toneburst; longer bursts widen the
/// echo-overlap window until nearby-wall reflections merge past resolution.
pub const DEFAULT_BURST_CYCLES: u32 = 2;
pub const DEFAULT_GROUP_VELOCITY: f64 = 3000.0;
pub const DEFAULT_SNR_DB: f64 = 30.0;
pub const DEFAULT_PEAK_THRESHOLD: f64 = 0.4;
pub const DEFAULT_PEAK_PROMINENCE: f64 = 0.1;

/// Excitation and propagation parameters. `dispersion` optionally supplies
/// polynomial coefficients for k(w) = sum c_j w^j; the default is the
/// nondispersive k(w) = w / group_velocity. `snr_db: None` means noiseless.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UgwConfig {
    pub sample_rate: f64,
    pub duration: f64,
    pub center_freq: f64,
    pub burst_cycles: u32,
    pub group_velocity: f64,
    pub dispersion: Option<Vec<f64>>,
    pub snr_db: Option<f64>,
}

impl Default for UgwConfig {
    fn default() -> Self {
        UgwConfig {
            sample_rate: DEFAULT_SAMPLE_RATE,
            duration: DEFAULT_DURATION,
            center_freq: DEFAULT_CENTER_FREQ,
            burst_cycles: DEFAULT_BURST_CYCLES,
            group_velocity: DEFAULT_GROUP_VELOCITY,
            dispersion: None,
            snr_db: Some(DEFAULT_SNR_DB),
        }
    }
}

impl UgwConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sample_rate", self.sample_rate),
            ("duration", self.duration),
            ("center_freq", self.center_freq),
            ("group_velocity", self.group_velocity),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::invalid(format!("{name} must be positive and finite")));
            }
        }
        if self.burst_cycles == 0 {
            return Err(Error::invalid("burst_cycles must be >= 1"));
        }
        if self.sample_rate < 4.0 * self.center_freq {
            return Err(Error::invalid(format!(
                "sample_rate {} violates the Nyquist margin (need >= 4 x center_freq = {})",
                self.sample_rate,
                4.0 * self.center_freq
            )));
        }
        if self.burst_len() > self.samples() {
            return Err(Error::invalid("duration shorter than the excitation burst"));
        }
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                return Err(Error::invalid("snr_db must be finite (omit it for noiseless)"));
            }
        }
        Ok(())
    }

    /// Checks that the record is long enough to hold the farthest round-trip
    /// echo of `scene` plus the burst itself.
    pub fn validate_for_scene(&self, scene: &PlateScene) -> Result<()> {
        self.validate()?;
        let needed = 2.0 * scene.diagonal() / self.group_velocity
            + self.burst_cycles as f64 / self.center_freq;
        if self.duration < needed {
            return Err(Error::invalid(format!(
                "duration {} too short for the scene; farthest echo needs {needed}",
                self.duration
            )));
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        (self.duration * self.sample_rate).round() as usize
    }

    fn burst_len(&self) -> usize {
        (self.burst_cycles as f64 / self.center_freq * self.sample_rate).round() as usize
    }

    /// Envelope grid step: an eighth of the center-frequency wavelength.
    pub fn delta_d(&self) -> f64 {
        self.group_velocity / (8.0 * self.center_freq)
    }

    fn wavenumber(&self, omega: f64) -> f64 {
        match &self.dispersion {
            None => omega / self.group_velocity,
            Some(coeffs) => coeffs.iter().rev().fold(0.0, |acc, &c| acc * omega + c),
        }
    }

    /// Hann-windowed toneburst of `burst_cycles` periods at `center_freq`.
    pub fn burst(&self) -> Vec<f64> {
        let n = self.burst_len();
        let t_burst = self.burst_cycles as f64 / self.center_freq;
        (0..n)
            .map(|i| {
                let t = i as f64 / self.sample_rate;
                let window = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * t / t_burst).cos());
                window * (2.0 * std::f64::consts::PI * self.center_freq * t).sin()
            })
            .collect()
    }
}

/// Convex CCW boundary polygon plus the measurement positions inside it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateScene {
    pub polygon: Vec<[f64; 2]>,
    pub sources: Vec<[f64; 2]>,
}

impl PlateScene {
    /// Axis-aligned rectangle with its corner at the origin, no sources yet.
    pub fn rectangle(width: f64, height: f64) -> Self {
        PlateScene {
            polygon: vec![[0.0, 0.0], [width, 0.0], [width, height], [0.0, height]],
            sources: Vec::new(),
        }
    }

    /// Replaces the sources with an nx x ny grid of interior positions,
    /// inset from the boundary by one grid pitch on each side.
    pub fn with_source_grid(mut self, nx: usize, ny: usize) -> Self {
        let (lo, hi) = self.bounds();
        let mut sources = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                sources.push([
                    lo[0] + (hi[0] - lo[0]) * (i + 1) as f64 / (nx + 1) as f64,
                    lo[1] + (hi[1] - lo[1]) * (j + 1) as f64 / (ny + 1) as f64,
                ]);
            }
        }
        self.sources = sources;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.polygon.len() < 3 {
            return Err(Error::invalid("polygon needs at least 3 vertices"));
        }
        if self.polygon.iter().chain(self.sources.iter()).any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::invalid("scene coordinates must be finite"));
        }
        let n = self.polygon.len();
        for i in 0..n {
            let a = self.polygon[i];
            let b = self.polygon[(i + 1) % n];
            let c = self.polygon[(i + 2) % n];
            let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
            if cross <= 0.0 {
                return Err(Error::invalid("polygon must be convex with CCW winding"));
            }
        }
        for (i, s) in self.sources.iter().enumerate() {
            if !self.contains(*s) {
                return Err(Error::invalid(format!("source {i} is not strictly inside the polygon")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let n = self.polygon.len();
        (0..n).all(|i| {
            let a = self.polygon[i];
            let b = self.polygon[(i + 1) % n];
            (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) > 0.0
        })
    }

    /// Longest vertex-to-vertex distance; bounds every interior echo path.
    pub fn diagonal(&self) -> f64 {
        let mut best = 0.0f64;
        for (i, a) in self.polygon.iter().enumerate() {
            for b in &self.polygon[i + 1..] {
                best = best.max(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
            }
        }
        best
    }

    pub fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &self.polygon {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }
}

/// Reflects `p` across the supporting line of segment (a, b).
pub fn reflect_across(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> [f64; 2] {
    let ex = b[0] - a[0];
    let ey = b[1] - a[1];
    let t = ((p[0] - a[0]) * ex + (p[1] - a[1]) * ey) / (ex * ex + ey * ey);
    let foot = [a[0] + t * ex, a[1] + t * ey];
    [2.0 * foot[0] - p[0], 2.0 * foot[1] - p[1]]
}

/// First-order image sources of `p`: one reflection per polygon edge.
pub fn image_sources(scene: &PlateScene, p: [f64; 2]) -> Result<Vec<[f64; 2]>> {
    scene.validate()?;
    if !scene.contains(p) {
        return Err(Error::invalid("source position is not strictly inside the polygon"));
    }
    let n = scene.polygon.len();
    Ok((0..n)
        .map(|i| reflect_across(scene.polygon[i], scene.polygon[(i + 1) % n], p))
        .collect())
}

/// Correlation envelope over a uniform distance grid starting at 0.
#[derive(Clone, Debug)]
pub struct EnvelopeSignal {
    pub step: f64,
    pub values: Vec<f64>,
    /// Largest amount the analytic magnitude exceeded 1 before clamping;
    /// persistent overshoot indicates a broken normalization.
    pub clamp_overshoot: f64,
}

impl EnvelopeSignal {
    pub fn d_max(&self) -> f64 {
        self.step * (self.values.len() - 1) as f64
    }

    /// Linear interpolation, clamped at the grid ends.
    pub fn value_at(&self, d: f64) -> f64 {
        lerp_uniform(0.0, self.step, &self.values, d)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("d,e\n");
        for (i, v) in self.values.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i as f64 * self.step, v));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Precomputed unit-energy echo templates, one per grid distance. Immutable
/// after construction; share it read-only across measurements.
pub struct TemplateBank {
    step: f64,
    templates: Vec<Vec<f64>>,
}

impl TemplateBank {
    /// Templates for boundary distances 0, delta_d, ..., >= d_max.
    pub fn new(cfg: &UgwConfig, d_max: f64) -> Result<Self> {
        cfg.validate()?;
        if !d_max.is_finite() || d_max <= 0.0 {
            return Err(Error::invalid("template bank needs a positive distance range"));
        }
        let step = cfg.delta_d();
        let count = (d_max / step).ceil() as usize + 1;
        let spectrum = burst_spectrum(cfg);
        let mut templates = Vec::with_capacity(count);
        for j in 0..count {
            let r = (2.0 * j as f64 * step).max(step);
            let mut t = propagate_spectrum(cfg, &spectrum, &[r]);
            let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::invalid("degenerate template with no energy"));
            }
            for v in &mut t {
                *v /= norm;
            }
            templates.push(t);
        }
        Ok(TemplateBank { step, templates })
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn template(&self, j: usize) -> &[f64] {
        &self.templates[j]
    }
}

fn fft_forward(data: &mut [Complex64]) {
    FftPlanner::new().plan_fft_forward(data.len()).process(data);
}

fn fft_inverse(data: &mut [Complex64]) {
    FftPlanner::new().plan_fft_inverse(data.len()).process(data);
}

/// FFT of the excitation burst zero-padded to the record length.
fn burst_spectrum(cfg: &UgwConfig) -> Vec<Complex64> {
    let n = cfg.samples();
    let mut buf = vec![Complex64::default(); n];
    for (b, s) in buf.iter_mut().zip(cfg.burst()) {
        *b = Complex64::new(s, 0.0);
    }
    fft_forward(&mut buf);
    buf
}

/// Sums the burst propagated over the given path lengths in the frequency
/// domain and returns the real time series. DC and Nyquist bins carry no
/// band energy and are zeroed; nonpositive wavenumbers do not propagate.
fn propagate_spectrum(cfg: &UgwConfig, spectrum: &[Complex64], path_lengths: &[f64]) -> Vec<f64> {
    let n = spectrum.len();
    let mut out = vec![Complex64::default(); n];
    for m in 1..n.div_ceil(2) {
        let omega = 2.0 * std::f64::consts::PI * m as f64 * cfg.sample_rate / n as f64;
        let k = cfg.wavenumber(omega);
        if k <= 0.0 {
            continue;
        }
        let mut g = Complex64::default();
        for &r in path_lengths {
            let kr = k * r;
            g += Complex64::from_polar(1.0 / kr.sqrt(), -kr);
        }
        out[m] = g * spectrum[m];
        out[n - m] = out[m].conj();
    }
    fft_inverse(&mut out);
    out.iter().map(|c| c.re / n as f64).collect()
}

pub(crate) fn propagate_burst(cfg: &UgwConfig, path_lengths: &[f64]) -> Vec<f64> {
    propagate_spectrum(cfg, &burst_spectrum(cfg), path_lengths)
}

/// Synthesizes one measurement at source position `p`: first-order echoes
/// from every edge plus white Gaussian noise at `snr_db` relative to the
/// clean signal power. Path lengths are floored at one grid cell so a source
/// touching the boundary cannot produce a singular transfer function.
pub fn synthesize_measurement<R: Rng + ?Sized>(
    scene: &PlateScene,
    p: [f64; 2],
    cfg: &UgwConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    cfg.validate_for_scene(scene)?;
    let floor = cfg.delta_d();
    let paths: Vec<f64> = image_sources(scene, p)?
        .into_iter()
        .map(|img| ((img[0] - p[0]).powi(2) + (img[1] - p[1]).powi(2)).sqrt().max(floor))
        .collect();
    let mut z = propagate_burst(cfg, &paths);
    if let Some(snr_db) = cfg.snr_db {
        let power = z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64;
        let sd = (power * 10f64.powf(-snr_db / 10.0)).sqrt();
        if sd > 0.0 {
            let noise = Normal::new(0.0, sd).map_err(|e| Error::invalid(e.to_string()))?;
            for v in &mut z {
                *v += noise.sample(rng);
            }
        }
    }
    Ok(z)
}

/// Magnitude of the discrete analytic signal (frequency-domain Hilbert
/// construction with power-of-two zero padding).
pub fn analytic_envelope(x: &[f64]) -> Vec<f64> {
    let n = x.len().next_power_of_two().max(2);
    let mut buf = vec![Complex64::default(); n];
    for (b, &v) in buf.iter_mut().zip(x) {
        *b = Complex64::new(v, 0.0);
    }
    fft_forward(&mut buf);
    for (m, b) in buf.iter_mut().enumerate() {
        if m == 0 || (n % 2 == 0 && m == n / 2) {
            // pass through
        } else if m < n / 2 {
            *b *= 2.0;
        } else {
            *b = Complex64::default();
        }
    }
    fft_inverse(&mut buf);
    buf[..x.len()].iter().map(|c| c.norm() / n as f64).collect()
}

/// Normalized correlation of the measurement against every template (the
/// cosine similarity of Eq-7 form), enveloped over the distance axis and
/// clamped to [0, 1].
pub fn envelope(z: &[f64], bank: &TemplateBank) -> Result<EnvelopeSignal> {
    if z.len() < bank.template(0).len() {
        return Err(Error::invalid("measurement shorter than the template record"));
    }
    let z_norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if z_norm == 0.0 {
        return Err(Error::EmptyMeasurement);
    }
    let correlation: Vec<f64> = bank
        .templates
        .iter()
        .map(|t| t.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / z_norm)
        .collect();
    let magnitude = analytic_envelope(&correlation);
    let clamp_overshoot = magnitude.iter().fold(0.0f64, |acc, &v| acc.max(v - 1.0)).max(0.0);
    let values = magnitude.into_iter().map(|v| v.min(1.0)).collect();
    Ok(EnvelopeSignal { step: bank.step, values, clamp_overshoot })
}

/// Smallest-distance local maximum with value >= `threshold` and prominence
/// >= `prominence`, refined to sub-grid precision by a parabolic fit.
pub fn first_echo_distance(e: &EnvelopeSignal, threshold: f64, prominence: f64) -> Result<f64> {
    let v = &e.values;
    let n = v.len();
    if n < 2 {
        return Err(Error::NoEcho);
    }
    for i in 0..n {
        let left_lower = i == 0 || v[i] > v[i - 1];
        let right_lower = i + 1 == n || v[i] >= v[i + 1];
        if !(left_lower && right_lower) || v[i] < threshold {
            continue;
        }
        if peak_prominence(v, i) < prominence {
            continue;
        }
        let refined = if i == 0 || i + 1 == n {
            i as f64
        } else {
            let denom = v[i - 1] - 2.0 * v[i] + v[i + 1];
            if denom.abs() < 1e-30 {
                i as f64
            } else {
                i as f64 + 0.5 * (v[i - 1] - v[i + 1]) / denom
            }
        };
        return Ok(refined * e.step);
    }
    Err(Error::NoEcho)
}

/// Height above the higher of the two valleys separating the peak from the
/// nearest taller sample (or the grid end) on each side.
fn peak_prominence(v: &[f64], i: usize) -> f64 {
    let mut left_base = v[i];
    for j in (0..i).rev() {
        if v[j] > v[i] {
            break;
        }
        left_base = left_base.min(v[j]);
    }
    let mut right_base = v[i];
    for &val in &v[i + 1..] {
        if val > v[i] {
            break;
        }
        right_base = right_base.min(val);
    }
    v[i] - left_base.max(right_base)
}

/// Archive manifest: everything needed to regenerate the raw measurements.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveManifest {
    pub artifact_version: String,
    pub seed: u64,
    pub config: UgwConfig,
    pub scene: PlateScene,
}

const MEASUREMENT_STREAM: &str = "ugw-measurement";

/// Synthesizes one measurement per scene source into `dir`: a JSON manifest
/// plus one single-column CSV per position. Deterministic in `seed`.
pub fn write_archive(dir: &Path, scene: &PlateScene, cfg: &UgwConfig, seed: u64) -> Result<()> {
    cfg.validate_for_scene(scene)?;
    scene.validate()?;
    if scene.sources.is_empty() {
        return Err(Error::invalid("scene has no source positions to measure"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = ArchiveManifest {
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        config: cfg.clone(),
        scene: scene.clone(),
    };
    let manifest_path = dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::invalid(format!("manifest serialization: {e}")))?;
    fs::write(&manifest_path, body).map_err(|e| Error::io(&manifest_path, e))?;
    for (i, &p) in scene.sources.iter().enumerate() {
        let mut rng = seed::stream(seed, MEASUREMENT_STREAM, i as u64);
        let z = synthesize_measurement(scene, p, cfg, &mut rng)?;
        let mut out = String::from("z\n");
        for v in &z {
            out.push_str(&format!("{v}\n"));
        }
        let path = dir.join(format!("meas_{i:03}.csv"));
        fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Loads a measurement archive written by [`write_archive`].
pub fn read_archive(dir: &Path) -> Result<(ArchiveManifest, Vec<Vec<f64>>)> {
    let manifest_path = dir.join("manifest.json");
    let body = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: ArchiveManifest = serde_json::from_str(&body)
        .map_err(|e| Error::Config(format!("{}: {e}", manifest_path.display())))?;
    let mut signals = Vec::with_capacity(manifest.scene.sources.len());
    for i in 0..manifest.scene.sources.len() {
        let path = dir.join(format!("meas_{i:03}.csv"));
        let body = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut z = Vec::new();
        for (ln, line) in body.lines().enumerate() {
            if ln == 0 {
                if line.trim() != "z" {
                    return Err(Error::Config(format!("{}: expected header 'z'", path.display())));
                }
                continue;
            }
            let v: f64 = line
                .trim()
                .parse()
                .map_err(|e| Error::Config(format!("{} line {}: {e}", path.display(), ln + 1)))?;
            z.push(v);
        }
        signals.push(z);
    }
    Ok((manifest, signals))
}
