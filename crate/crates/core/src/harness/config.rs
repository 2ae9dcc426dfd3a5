//! Run configuration: a TOML file resolved into a fully explicit [`RunConfig`].
//!
//! Measures may list their component means inline, read them from a headerless
//! CSV file (`means_file`, one mean per row), or generate constant means with
//! `dim` + `constant_means` (component `k` has every coordinate equal to
//! `constant_means[k]`). Empirical measures use `points_file` instead. The
//! resolved configuration, with every file read and every default filled in, is
//! what gets hashed into reports.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::PathKind;
use crate::error::{Error, Result};
use crate::measures::GaussianMixture;
use crate::schedules::{Schedule, DEFAULT_BETA_MAX, DEFAULT_BETA_MIN};
use crate::sensitivity::Sign;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "default_beta_min")]
    pub beta_min: f64,
    #[serde(default = "default_beta_max")]
    pub beta_max: f64,
    #[serde(default)]
    pub t0: f64,
    #[serde(default = "default_t1")]
    pub t1: f64,
    /// Truncation time; defaults to one step before `t1` for each step size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t1_trunc: Option<f64>,
}

fn default_beta_min() -> f64 {
    DEFAULT_BETA_MIN
}
fn default_beta_max() -> f64 {
    DEFAULT_BETA_MAX
}
fn default_t1() -> f64 {
    1.0
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
            t0: 0.0,
            t1: 1.0,
            t1_trunc: None,
        }
    }
}

impl ScheduleConfig {
    /// Schedule used with step size `dt`.
    pub fn build(&self, dt: f64) -> Result<Schedule> {
        let trunc = self.t1_trunc.unwrap_or(self.t1 - dt);
        Schedule::new(self.beta_min, self.beta_max, self.t0, self.t1, trunc)
    }
}

/// A measure as written in the file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMeasure {
    weights: Option<Vec<f64>>,
    means: Option<Vec<Vec<f64>>>,
    means_file: Option<PathBuf>,
    dim: Option<usize>,
    constant_means: Option<Vec<f64>>,
    points_file: Option<PathBuf>,
    /// Per-component standard deviations; variances are their squares.
    std: Option<Vec<f64>>,
    variances: Option<Vec<f64>>,
}

/// A fully explicit mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureConfig {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
    /// Set when means came from `dim` + `constant_means`, so the dimension can be overridden.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub constant_means: Option<Vec<f64>>,
}

impl MeasureConfig {
    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn build(&self) -> Result<GaussianMixture> {
        let d = self.dim();
        let flat: Vec<f64> = self.means.iter().flatten().copied().collect();
        let means = Array2::from_shape_vec((self.means.len(), d), flat)
            .map_err(|_| Error::config("component means have different lengths"))?;
        GaussianMixture::new(self.weights.clone(), means, self.variances.clone())
    }

    fn with_dim(&self, dim: usize) -> Result<Self> {
        match &self.constant_means {
            Some(c) => Ok(Self {
                means: c.iter().map(|v| vec![*v; dim]).collect(),
                ..self.clone()
            }),
            None if self.dim() == dim => Ok(self.clone()),
            None => Err(Error::config(format!(
                "cannot change the dimension of a measure with explicit means ({} → {dim})",
                self.dim()
            ))),
        }
    }
}

fn read_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let row: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        rows.push(row.map_err(|e| Error::config(format!("{} line {}: {e}", path.display(), i + 1)))?);
    }
    Ok(rows)
}

impl RawMeasure {
    fn resolve(self, name: &str, base_dir: &Path) -> Result<MeasureConfig> {
        let err = |m: &str| Error::config(format!("[{name}] {m}"));
        let sources = [
            self.means.is_some(),
            self.means_file.is_some(),
            self.constant_means.is_some(),
            self.points_file.is_some(),
        ];
        if sources.iter().filter(|s| **s).count() != 1 {
            return Err(err("give exactly one of means, means_file, constant_means, points_file"));
        }
        if self.dim.is_some() != self.constant_means.is_some() {
            return Err(err("dim and constant_means go together"));
        }
        let mut constant = None;
        let (means, empirical) = if let Some(m) = self.means {
            (m, false)
        } else if let Some(f) = self.means_file {
            (read_rows(&base_dir.join(f))?, false)
        } else if let Some(f) = self.points_file {
            (read_rows(&base_dir.join(f))?, true)
        } else {
            let c = self.constant_means.expect("checked above");
            let d = self.dim.expect("checked above");
            constant = Some(c.clone());
            (c.iter().map(|v| vec![*v; d]).collect(), false)
        };
        let k = means.len();
        if k == 0 {
            return Err(err("no components"));
        }
        let variances = match (self.std, self.variances, empirical) {
            (_, _, true) => vec![0.0; k],
            (Some(s), None, false) => s.iter().map(|x| x * x).collect(),
            (None, Some(v), false) => v,
            (None, None, false) => return Err(err("give std or variances")),
            (Some(_), Some(_), false) => return Err(err("give std or variances, not both")),
        };
        let variances = if variances.len() == 1 && k > 1 {
            vec![variances[0]; k]
        } else {
            variances
        };
        let weights = match self.weights {
            Some(w) if empirical => return Err(err(&format!("points_file measures are uniform; drop weights {w:?}"))),
            Some(w) => w,
            None => vec![1.0 / k as f64; k],
        };
        let mc = MeasureConfig {
            weights,
            means,
            variances,
            constant_means: constant,
        };
        mc.build().map_err(|e| err(&e.to_string()))?;
        Ok(mc)
    }
}

/// Clamp on `ν_s/ρ_s`: `"auto"` (off for analytic scores, `[0.1, 10]` for external ones), `"off"`, or bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClampSetting {
    Bounds([f64; 2]),
    Keyword(ClampKeyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClampKeyword {
    Auto,
    Off,
}

pub const EXTERNAL_RATIO_CLAMP: (f64, f64) = (0.1, 10.0);

impl ClampSetting {
    pub fn resolve(&self, external: bool) -> Option<(f64, f64)> {
        match self {
            ClampSetting::Bounds([lo, hi]) => Some((*lo, *hi)),
            ClampSetting::Keyword(ClampKeyword::Off) => None,
            ClampSetting::Keyword(ClampKeyword::Auto) => external.then_some(EXTERNAL_RATIO_CLAMP),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationConfig {
    #[serde(default = "default_sign")]
    pub sign: Sign,
    #[serde(default = "default_clamp")]
    pub ratio_clamp: ClampSetting,
}

fn default_sign() -> Sign {
    Sign::Add
}
fn default_clamp() -> ClampSetting {
    ClampSetting::Keyword(ClampKeyword::Auto)
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            sign: default_sign(),
            ratio_clamp: default_clamp(),
        }
    }
}

/// How `log ρ_s` is obtained along sample paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum DensityConfig {
    /// Closed-form mixture density (analytic scores only).
    Exact,
    /// Change of variables with a Hutchinson divergence estimate.
    Hutchinson { n_probes: usize },
    /// Change of variables with the exact divergence.
    Trace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_dts")]
    pub dt: Vec<f64>,
    #[serde(default = "default_etas")]
    pub eta_bar: Vec<f64>,
    #[serde(default = "default_samplers")]
    pub samplers: Vec<PathKind>,
    #[serde(default = "default_probes")]
    pub probes: Vec<usize>,
    #[serde(default = "default_hutchinson_dt")]
    pub hutchinson_dt: f64,
}

fn default_dts() -> Vec<f64> {
    vec![5e-3, 1e-3]
}
fn default_etas() -> Vec<f64> {
    vec![1e-3, 1e-2, 1e-1, 1.0]
}
fn default_samplers() -> Vec<PathKind> {
    vec![PathKind::Ode, PathKind::Sde]
}
fn default_probes() -> Vec<usize> {
    vec![1, 10, 100]
}
fn default_hutchinson_dt() -> f64 {
    1e-3
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            dt: default_dts(),
            eta_bar: default_etas(),
            samplers: default_samplers(),
            probes: default_probes(),
            hutchinson_dt: default_hutchinson_dt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BackendConfig {
    Analytic,
    /// A child process speaking the score protocol; `command[0]` is the program.
    External { command: Vec<String> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationMode {
    /// Sensitivity and OT rays against the actual change of exact flows.
    Prediction,
    /// Sensitivities of a candidate backend against the analytic reference.
    Backend,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Pearson,
    Spearman,
    /// Uncentered correlation, for vectors whose coordinate mean carries the signal.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OtTargets {
    /// Samples of the perturbed target `ρ^η̄`.
    Perturbed,
    /// Samples of `ν` alone.
    Nu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OtConfig {
    #[serde(default = "default_reg")]
    pub reg: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub standardize: bool,
    #[serde(default = "default_targets")]
    pub targets: OtTargets,
}

fn default_reg() -> f64 {
    crate::baseline_ot::DEFAULT_REG
}
fn default_tol() -> f64 {
    crate::baseline_ot::DEFAULT_TOL
}
fn default_max_iter() -> usize {
    crate::baseline_ot::DEFAULT_MAX_ITER
}
fn default_targets() -> OtTargets {
    OtTargets::Perturbed
}

impl Default for OtConfig {
    fn default() -> Self {
        Self {
            reg: default_reg(),
            tol: default_tol(),
            max_iter: default_max_iter(),
            standardize: false,
            targets: default_targets(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelationConfig {
    #[serde(default = "default_mode")]
    pub mode: CorrelationMode,
    #[serde(default = "default_statistic")]
    pub statistic: Statistic,
    #[serde(default = "default_hutchinson_dt")]
    pub dt: f64,
    #[serde(default = "default_corr_eta")]
    pub eta_bar: f64,
    #[serde(default = "default_sampler")]
    pub sampler: PathKind,
    /// Density channel of the sensitivity run (prediction mode) or of the candidate (backend mode).
    #[serde(default = "default_density")]
    pub density: DensityConfig,
    /// Candidate score model in backend mode; the run's `[backend]` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<BackendConfig>,
    #[serde(default)]
    pub ot: OtConfig,
}

fn default_mode() -> CorrelationMode {
    CorrelationMode::Prediction
}
fn default_statistic() -> Statistic {
    Statistic::Pearson
}
fn default_corr_eta() -> f64 {
    0.1
}
fn default_sampler() -> PathKind {
    PathKind::Ode
}
fn default_density() -> DensityConfig {
    DensityConfig::Exact
}

impl Default for CorrelationConfig {
    fn default() -> Self {
        Self {
            mode: default_mode(),
            statistic: default_statistic(),
            dt: default_hutchinson_dt(),
            eta_bar: default_corr_eta(),
            sampler: default_sampler(),
            density: default_density(),
            candidate: None,
            ot: OtConfig::default(),
        }
    }
}

/// Settings applied by `--full`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FullConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_batch")]
    batch_size: usize,
    #[serde(default)]
    workers: usize,
    #[serde(default = "default_output")]
    output_dir: PathBuf,
    #[serde(default)]
    schedule: ScheduleConfig,
    rho: RawMeasure,
    nu: RawMeasure,
    #[serde(default)]
    perturbation: PerturbationConfig,
    #[serde(default)]
    sweep: SweepConfig,
    #[serde(default = "default_density")]
    density: DensityConfig,
    #[serde(default = "default_backend")]
    backend: BackendConfig,
    #[serde(default)]
    correlation: CorrelationConfig,
    full: Option<FullConfig>,
}

fn default_batch() -> usize {
    256
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}
fn default_backend() -> BackendConfig {
    BackendConfig::Analytic
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub batch_size: usize,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub output_dir: PathBuf,
    pub schedule: ScheduleConfig,
    pub rho: MeasureConfig,
    pub nu: MeasureConfig,
    pub perturbation: PerturbationConfig,
    pub sweep: SweepConfig,
    /// Density channel for `sensitivity` runs.
    pub density: DensityConfig,
    pub backend: BackendConfig,
    pub correlation: CorrelationConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub full: Option<FullConfig>,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub dt: Option<Vec<f64>>,
    pub eta_bar: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub batch_size: Option<usize>,
    pub workers: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub full: bool,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, dir)
    }

    /// Parse TOML text; relative file references resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        let cfg = Self {
            seed: raw.seed,
            batch_size: raw.batch_size,
            workers: raw.workers,
            output_dir: raw.output_dir,
            schedule: raw.schedule,
            rho: raw.rho.resolve("rho", base_dir)?,
            nu: raw.nu.resolve("nu", base_dir)?,
            perturbation: raw.perturbation,
            sweep: raw.sweep,
            density: raw.density,
            backend: raw.backend,
            correlation: raw.correlation,
            full: raw.full,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(mut self, o: &Overrides) -> Result<Self> {
        if o.full {
            let full = self.full.clone().unwrap_or(FullConfig {
                dim: None,
                batch_size: None,
            });
            if let Some(d) = full.dim {
                self.rho = self.rho.with_dim(d)?;
                self.nu = self.nu.with_dim(d)?;
            }
            if let Some(b) = full.batch_size {
                self.batch_size = b;
            }
        }
        if let Some(dt) = &o.dt {
            self.sweep.dt = dt.clone();
        }
        if let Some(eta) = &o.eta_bar {
            self.sweep.eta_bar = eta.clone();
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(b) = o.batch_size {
            self.batch_size = b;
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if let Some(dir) = &o.output_dir {
            self.output_dir = dir.clone();
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::config(m));
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".into());
        }
        if self.rho.dim() != self.nu.dim() {
            return err(format!("rho is {}-d but nu is {}-d", self.rho.dim(), self.nu.dim()));
        }
        let dts = self.sweep.dt.iter().chain([&self.sweep.hutchinson_dt, &self.correlation.dt]);
        for dt in dts {
            if !(dt.is_finite() && *dt > 0.0) {
                return err(format!("step sizes must be positive, got {dt}"));
            }
            self.schedule.build(*dt).map_err(|e| Error::config(e.to_string()))?;
        }
        for eta in self.sweep.eta_bar.iter().chain([&self.correlation.eta_bar]) {
            if !(*eta > 0.0 && *eta <= 1.0) {
                return err(format!("mixture weights must lie in (0, 1], got {eta}"));
            }
        }
        if self.sweep.probes.contains(&0) {
            return err("probe counts must be at least 1".into());
        }
        for d in [Some(&self.density), Some(&self.correlation.density)].into_iter().flatten() {
            if let DensityConfig::Hutchinson { n_probes: 0 } = d {
                return err("Hutchinson density needs at least one probe".into());
            }
        }
        if let ClampSetting::Bounds([lo, hi]) = self.perturbation.ratio_clamp {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return err(format!("ratio_clamp needs 0 < lo <= hi, got [{lo}, {hi}]"));
            }
        }
        for b in [Some(&self.backend), self.correlation.candidate.as_ref()].into_iter().flatten() {
            if let BackendConfig::External { command } = b {
                if command.is_empty() {
                    return err("external backend command is empty".into());
                }
            }
        }
        let external = |b: &BackendConfig| matches!(b, BackendConfig::External { .. });
        if external(&self.backend) && self.density == DensityConfig::Exact {
            return err("exact densities need the analytic backend; use hutchinson or trace".into());
        }
        let candidate = self.correlation.candidate.as_ref().unwrap_or(&self.backend);
        if self.correlation.mode == CorrelationMode::Backend
            && external(candidate)
            && self.correlation.density == DensityConfig::Exact
        {
            return err("an external candidate needs correlation.density hutchinson or trace".into());
        }
        let ot = &self.correlation.ot;
        if !(ot.reg > 0.0 && ot.tol > 0.0 && ot.max_iter > 0) {
            return err("ot needs reg > 0, tol > 0 and max_iter > 0".into());
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.rho.dim()
    }

    /// SHA-256 of the canonical JSON of the resolved configuration, hex encoded.
    /// The worker count and output directory do not affect results and are left out.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("configuration always serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("workers");
            map.remove("output_dir");
        }
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }
}
