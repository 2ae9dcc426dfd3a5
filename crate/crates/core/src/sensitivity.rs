//! Derivatives of scores and samples with respect to the mixture weight `η` of
//! the perturbed target `ρ^η = (1 − η)ρ + ην`, taken at `η = 0`.
//!
//! The score sensitivity is `g_s(z) = (ν_s(z)/ρ_s(z)) (s^ν_s(z) − s^ρ_s(z))`; the
//! sample sensitivity `ψ` solves the linearization of the sampler around the
//! base path, forced by the matching velocity sensitivity and started at zero.
//! Both are integrated with the same explicit scheme as the sampler, so `ψ` is
//! the exact derivative of the discrete flow map.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    advance, check_finite, check_initial, stored_steps, stride_for, IntegrationGrid, NoiseSource, PathKind, SamplePath,
    Storage,
};
use crate::error::{Error, Result};
use crate::likelihood::{divergence, log_density_step, DivergenceEstimator};
use crate::measures::{DiffusedMeasure, GaussianMixture, Marginal};
use crate::schedules::Schedule;
use crate::score_source::ScoreSource;

/// Whether mass is added (`+g`) or removed (`−g`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    Add,
    Remove,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Add => 1.0,
            Sign::Remove => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSpec {
    nu: GaussianMixture,
    sign: Sign,
    ratio_clamp: Option<(f64, f64)>,
}

impl PerturbationSpec {
    pub fn new(nu: GaussianMixture, sign: Sign, ratio_clamp: Option<(f64, f64)>) -> Result<Self> {
        if let Some((lo, hi)) = ratio_clamp {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::construction(format!("ratio clamp needs 0 < lo <= hi, got ({lo}, {hi})")));
            }
        }
        Ok(Self { nu, sign, ratio_clamp })
    }

    pub fn nu(&self) -> &GaussianMixture {
        &self.nu
    }

    pub fn sign(&self) -> Sign {
        self.sign
    }

    pub fn ratio_clamp(&self) -> Option<(f64, f64)> {
        self.ratio_clamp
    }
}

/// The density-ratio weighted difference plus the unclamped log ratio and whether the clamp bit.
fn weighted_difference(
    rho_logp: f64,
    rho_score: ArrayView1<f64>,
    nu_logp: f64,
    nu_score: ArrayView1<f64>,
    sign: f64,
    clamp: Option<(f64, f64)>,
) -> Result<(Array1<f64>, f64, bool)> {
    if rho_score.len() != nu_score.len() {
        return Err(Error::domain("score vectors differ in length"));
    }
    let finite = rho_logp.is_finite()
        && !nu_logp.is_nan()
        && nu_logp != f64::INFINITY
        && rho_score.iter().chain(nu_score.iter()).all(|x| x.is_finite());
    if !finite {
        return Err(Error::domain("non-finite input to the score sensitivity"));
    }
    let log_ratio = nu_logp - rho_logp;
    let (clamped_log, clamped) = match clamp {
        Some((lo, hi)) => {
            let c = log_ratio.clamp(lo.ln(), hi.ln());
            (c, c != log_ratio)
        }
        None => (log_ratio, false),
    };
    let weight = sign * clamped_log.exp();
    let g = (&nu_score - &rho_score) * weight;
    Ok((g, log_ratio, clamped))
}

/// Score sensitivity `sign · exp(clamp(log ν − log ρ)) · (s^ν − s^ρ)` at one point.
pub fn score_sensitivity(
    rho_logp: f64,
    rho_score: ArrayView1<f64>,
    nu_logp: f64,
    nu_score: ArrayView1<f64>,
    spec: &PerturbationSpec,
) -> Result<Array1<f64>> {
    weighted_difference(rho_logp, rho_score, nu_logp, nu_score, spec.sign.value(), spec.ratio_clamp).map(|r| r.0)
}

/// How much the velocity moves per unit change of the score.
fn forcing_coefficient(schedule: &Schedule, kind: PathKind, s: f64) -> Result<f64> {
    Ok(match kind {
        PathKind::Ode => schedule.ode_coefficients(s)?.b,
        PathKind::Sde => schedule.sde_coefficients(s)?.drift_score,
    })
}

/// Velocity sensitivity `b(s)·g` (ODE) or `drift_score(s)·g` (SDE).
pub fn velocity_sensitivity(schedule: &Schedule, kind: PathKind, s: f64, g: ArrayView1<f64>) -> Result<Array1<f64>> {
    let c = forcing_coefficient(schedule, kind, s)?;
    Ok(&g * c)
}

/// Per-step summary of the density ratios seen while forcing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    /// Largest `|log ν − log ρ|` over the batch, before clamping.
    pub max_abs_log_ratio: f64,
    /// Fraction of rows whose ratio was clamped.
    pub clamp_fraction: f64,
}

/// Where `log ρ_s` along the path comes from.
#[derive(Debug, Clone, Copy)]
pub enum DensityChannel<'a> {
    /// Closed-form marginals of this measure.
    Analytic(&'a DiffusedMeasure),
    /// Log-densities at every grid point, `(n_steps+1)×B`, e.g. from change of variables.
    Precomputed(ArrayView2<'a, f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityPath {
    grid: IntegrationGrid,
    kind: PathKind,
    stride: usize,
    psi: Array3<f64>,
    diagnostics: Vec<StepDiagnostics>,
}

impl SensitivityPath {
    pub fn grid(&self) -> &IntegrationGrid {
        &self.grid
    }

    pub fn kind(&self) -> PathKind {
        self.kind
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn stored_steps(&self) -> Vec<usize> {
        stored_steps(self.grid.n_steps(), self.stride)
    }

    /// Stored sensitivity states, `n_stored×B×d`.
    pub fn psi(&self) -> ndarray::ArrayView3<'_, f64> {
        self.psi.view()
    }

    pub fn terminal(&self) -> ArrayView2<'_, f64> {
        self.psi.slice(s![self.psi.shape()[0] - 1, .., ..])
    }

    pub fn diagnostics(&self) -> &[StepDiagnostics] {
        &self.diagnostics
    }
}

/// Forcing `g` at every row of `z`, from ρ-side quantities and the closed-form `ν_s`.
fn batch_forcing(
    spec: &PerturbationSpec,
    nu_s: &Marginal,
    z: ArrayView2<f64>,
    rho_logp: ArrayView1<f64>,
    rho_score: &Array2<f64>,
    step: usize,
) -> Result<(Array2<f64>, StepDiagnostics)> {
    let sign = spec.sign.value();
    let rows: Vec<(Array1<f64>, f64, bool)> = (0..z.nrows())
        .into_par_iter()
        .map(|i| {
            let (nu_logp, nu_score) = nu_s.log_density_and_score(z.row(i))?;
            weighted_difference(rho_logp[i], rho_score.row(i), nu_logp, nu_score.view(), sign, spec.ratio_clamp)
        })
        .collect::<Result<_>>()
        .map_err(|e| Error::Integration {
            step,
            message: format!("score sensitivity failed: {e}"),
        })?;
    let mut g = Array2::zeros(z.dim());
    let mut max_abs = 0.0f64;
    let mut n_clamped = 0usize;
    for (mut dst, (row, log_ratio, clamped)) in g.rows_mut().into_iter().zip(&rows) {
        dst.assign(row);
        max_abs = max_abs.max(log_ratio.abs());
        n_clamped += usize::from(*clamped);
    }
    let diag = StepDiagnostics {
        step,
        max_abs_log_ratio: max_abs,
        clamp_fraction: n_clamped as f64 / z.nrows() as f64,
    };
    Ok((g, diag))
}

/// One Euler step of the sensitivity equation:
/// `ψ += dt · (c_f·g + c_z·ψ + c_s·J_score(z)ψ)`.
fn psi_step(
    src: &ScoreSource,
    schedule: &Schedule,
    kind: PathKind,
    s: f64,
    dt: f64,
    z: ArrayView2<f64>,
    psi: &mut Array2<f64>,
    g: &Array2<f64>,
) -> Result<()> {
    let (cf, cz, cs) = match kind {
        PathKind::Ode => {
            let c = schedule.ode_coefficients(s)?;
            (c.b, c.a, c.b)
        }
        PathKind::Sde => {
            let c = schedule.sde_coefficients(s)?;
            (c.drift_score, c.drift_z, c.drift_score)
        }
    };
    let jpsi = src.score_jvp_batch(s, z, psi.view())?;
    let increment = g * cf + &*psi * cz + jpsi * cs;
    psi.scaled_add(dt, &increment);
    Ok(())
}

fn analytic_log_density(measure: &DiffusedMeasure, s: f64, z: ArrayView2<f64>) -> Result<Array1<f64>> {
    let m = measure.at(s)?;
    let v: Vec<f64> = (0..z.nrows()).into_par_iter().map(|i| m.log_density(z.row(i))).collect::<Result<_>>()?;
    Ok(Array1::from(v))
}

pub fn integrate_sample_sensitivity(
    src: &ScoreSource,
    schedule: &Schedule,
    path: &SamplePath,
    spec: &PerturbationSpec,
    density: DensityChannel<'_>,
) -> Result<SensitivityPath> {
    integrate_sample_sensitivity_with(src, schedule, path, spec, density, Storage::Full)
}

/// Integrate `ψ` along a dense sample path, keeping the states selected by `storage`.
pub fn integrate_sample_sensitivity_with(
    src: &ScoreSource,
    schedule: &Schedule,
    path: &SamplePath,
    spec: &PerturbationSpec,
    density: DensityChannel<'_>,
    storage: Storage,
) -> Result<SensitivityPath> {
    integrate_scaled(src, schedule, path, spec, density, storage, 1.0)
}

pub(crate) fn integrate_scaled(
    src: &ScoreSource,
    schedule: &Schedule,
    path: &SamplePath,
    spec: &PerturbationSpec,
    density: DensityChannel<'_>,
    storage: Storage,
    forcing_scale: f64,
) -> Result<SensitivityPath> {
    if !path.is_dense() {
        return Err(Error::usage("sensitivity integration needs every grid state of the sample path"));
    }
    if spec.nu.dim() != path.dim() || src.dim() != path.dim() {
        return Err(Error::usage("perturbation, score source and path dimensions differ"));
    }
    let grid = *path.grid();
    grid.check_within(schedule)?;
    if let DensityChannel::Precomputed(logp) = density {
        if path.kind() == PathKind::Sde {
            return Err(Error::usage(
                "precomputed log-densities come from change of variables, which is only valid on ODE paths; \
                 SDE paths need an analytic density channel",
            ));
        }
        if logp.dim() != (grid.n_steps() + 1, path.batch_size()) {
            return Err(Error::usage("precomputed log-densities do not match the path shape"));
        }
    }
    let nu = DiffusedMeasure::new(spec.nu.clone(), *schedule);
    let stride = stride_for(storage, grid.n_steps())?;
    let kept = stored_steps(grid.n_steps(), stride);
    let (b, d) = (path.batch_size(), path.dim());
    let mut stored = Array3::zeros((kept.len(), b, d));
    let mut psi = Array2::zeros((b, d));
    let mut diagnostics = Vec::with_capacity(grid.n_steps());
    let mut slot = 1;
    for i in 0..grid.n_steps() {
        let s = grid.time(i);
        let z = path.states().slice_move(s![i, .., ..]);
        let rho_score = src.score_batch(s, z)?;
        let rho_logp = match density {
            DensityChannel::Analytic(m) => analytic_log_density(m, s, z)?,
            DensityChannel::Precomputed(logp) => logp.row(i).to_owned(),
        };
        let (mut g, diag) = batch_forcing(spec, &nu.at(s)?, z, rho_logp.view(), &rho_score, i)?;
        if forcing_scale != 1.0 {
            g *= forcing_scale;
        }
        diagnostics.push(diag);
        psi_step(src, schedule, path.kind(), s, grid.dt(), z, &mut psi, &g)?;
        check_finite(&psi, i, "sample sensitivity")?;
        if slot < kept.len() && kept[slot] == i + 1 {
            stored.slice_mut(s![slot, .., ..]).assign(&psi);
            slot += 1;
        }
    }
    Ok(SensitivityPath {
        grid,
        kind: path.kind(),
        stride,
        psi: stored,
        diagnostics,
    })
}

/// Sampler driving a fused run.
#[derive(Debug, Clone, Copy)]
pub enum Sampler<'a> {
    Ode,
    Sde(NoiseSource<'a>),
}

/// Where a fused run gets `log ρ_s`.
#[derive(Debug, Clone, Copy)]
pub enum JointDensity<'a> {
    Analytic(&'a DiffusedMeasure),
    /// Integrate change of variables alongside the ODE, from `initial_logp` at the first grid point.
    ChangeOfVariables {
        estimator: DivergenceEstimator,
        initial_logp: ArrayView1<'a, f64>,
    },
}

/// Terminal values of a fused run.
#[derive(Debug, Clone, PartialEq)]
pub struct JointOutcome {
    pub terminal: Array2<f64>,
    pub psi: Array2<f64>,
    /// Terminal `log ρ` when integrated by change of variables.
    pub log_density: Option<Array1<f64>>,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// Sample, log-density and sensitivity integrated in one pass, keeping only the
/// terminal values. Produces the same numbers as the separate sampler,
/// [`crate::likelihood::integrate_log_density`] and [`integrate_sample_sensitivity`].
pub fn integrate_joint(
    src: &ScoreSource,
    schedule: &Schedule,
    z0: ArrayView2<f64>,
    grid: &IntegrationGrid,
    sampler: Sampler<'_>,
    spec: &PerturbationSpec,
    density: JointDensity<'_>,
) -> Result<JointOutcome> {
    check_initial(src, z0)?;
    grid.check_within(schedule)?;
    if spec.nu.dim() != src.dim() {
        return Err(Error::usage("perturbation and score source dimensions differ"));
    }
    let kind = match sampler {
        Sampler::Ode => PathKind::Ode,
        Sampler::Sde(_) => PathKind::Sde,
    };
    let mut logp = match density {
        JointDensity::ChangeOfVariables { initial_logp, .. } => {
            if kind == PathKind::Sde {
                return Err(Error::usage(
                    "change of variables is only valid on ODE paths; SDE runs need an analytic density channel",
                ));
            }
            if initial_logp.len() != z0.nrows() {
                return Err(Error::usage("initial log-densities do not match the batch size"));
            }
            Some(initial_logp.to_owned())
        }
        JointDensity::Analytic(_) => None,
    };
    let nu = DiffusedMeasure::new(spec.nu.clone(), *schedule);
    let (b, d) = z0.dim();
    let mut z = z0.to_owned();
    let mut psi = Array2::zeros((b, d));
    let mut diagnostics = Vec::with_capacity(grid.n_steps());
    for i in 0..grid.n_steps() {
        let s = grid.time(i);
        let dt = grid.dt();
        let score = src.score_batch(s, z.view())?;
        let rho_logp = match (&density, &logp) {
            (JointDensity::Analytic(m), _) => analytic_log_density(m, s, z.view())?,
            (_, Some(lp)) => lp.clone(),
            _ => unreachable!("change of variables always carries a log-density"),
        };
        let (g, diag) = batch_forcing(spec, &nu.at(s)?, z.view(), rho_logp.view(), &score, i)?;
        diagnostics.push(diag);
        if let (JointDensity::ChangeOfVariables { estimator, .. }, Some(lp)) = (&density, &mut logp) {
            let div = divergence(src, schedule, s, z.view(), estimator, i)?;
            log_density_step(lp, &div, dt);
            if lp.iter().any(|x| !x.is_finite()) {
                return Err(Error::Integration {
                    step: i,
                    message: "non-finite log-density".into(),
                });
            }
        }
        psi_step(src, schedule, kind, s, dt, z.view(), &mut psi, &g)?;
        check_finite(&psi, i, "sample sensitivity")?;
        let dw = match sampler {
            Sampler::Ode => None,
            Sampler::Sde(noise) => Some(noise.increment(i, b, d, dt)?),
        };
        advance(schedule, kind, s, dt, &mut z, &score, dw.as_ref())?;
        check_finite(&z, i, "state")?;
    }
    Ok(JointOutcome {
        terminal: z,
        psi,
        log_density: logp,
        diagnostics,
    })
}

/// First-order prediction of perturbed samples: `base + η̄ ψ`.
pub fn first_order_samples(base_terminal: ArrayView2<f64>, psi_terminal: ArrayView2<f64>, eta_bar: f64) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&eta_bar) {
        return Err(Error::domain(format!("mixture weight {eta_bar} outside [0, 1]")));
    }
    if base_terminal.dim() != psi_terminal.dim() {
        return Err(Error::domain("base samples and sensitivities differ in shape"));
    }
    Ok(&base_terminal + &(&psi_terminal * eta_bar))
}

/// Per-row `‖R‖` and `‖R‖/η̄` for `R = (perturbed − base) − η̄ ψ`.
pub fn taylor_remainder(
    perturbed_terminal: ArrayView2<f64>,
    base_terminal: ArrayView2<f64>,
    psi_terminal: ArrayView2<f64>,
    eta_bar: f64,
) -> Result<(Array1<f64>, Array1<f64>)> {
    if !(eta_bar > 0.0 && eta_bar.is_finite()) {
        return Err(Error::domain(format!("mixture weight {eta_bar} must be positive")));
    }
    if perturbed_terminal.dim() != base_terminal.dim() || psi_terminal.dim() != base_terminal.dim() {
        return Err(Error::domain("remainder inputs differ in shape"));
    }
    let r = &(&perturbed_terminal - &base_terminal) - &(&psi_terminal * eta_bar);
    let norms: Array1<f64> = r.rows().into_iter().map(|row| row.dot(&row).sqrt()).collect();
    let scaled = &norms / eta_bar;
    Ok((norms, scaled))
}
