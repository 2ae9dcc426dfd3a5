//! The experiments behind the CLI subcommands.
//!
//! All randomness derives from the config seed through named streams:
//! `base_samples` (initial noise), `path_noise` (Wiener increments),
//! `hutchinson_probes` and `ot_targets`.

use ndarray::{Array1, Array2, ArrayView2};
use rand_distr::{Distribution, StandardNormal};

use super::config::{BackendConfig, CorrelationMode, DensityConfig, OtTargets, RunConfig, Statistic};
use super::report::{Record, Report};
use crate::baseline_ot::{sinkhorn_log, standardize, transport_rays, Coupling};
use crate::dynamics::{
    sample_ode_with, sample_sde_with, IntegrationGrid, NoiseSource, PathKind, SamplePath, Storage,
};
use crate::error::{Error, Result};
use crate::likelihood::{integrate_log_density, standard_normal_log_density, DivergenceEstimator};
use crate::measures::{DiffusedMeasure, GaussianMixture};
use crate::rng;
use crate::schedules::Schedule;
use crate::score_source::{ExternalScoreModel, ScoreSource};
use crate::sensitivity::{
    integrate_joint, integrate_sample_sensitivity_with, taylor_remainder, DensityChannel, JointDensity, JointOutcome,
    PerturbationSpec, Sampler, SensitivityPath,
};
use crate::stats::{cosine, median, pearson, spearman};

pub const REMAINDER: &str = "remainder_sweep";
pub const HUTCHINSON: &str = "hutchinson_sweep";
pub const CORRELATION: &str = "correlation";

/// Run `f` on a pool with `workers` threads (0: all cores).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::usage(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

fn sampler_name(kind: PathKind) -> &'static str {
    match kind {
        PathKind::Ode => "ode",
        PathKind::Sde => "sde",
    }
}

fn density_name(d: DensityConfig) -> (&'static str, Option<usize>) {
    match d {
        DensityConfig::Exact => ("exact", None),
        DensityConfig::Hutchinson { n_probes } => ("hutchinson", Some(n_probes)),
        DensityConfig::Trace => ("trace", None),
    }
}

/// Measures and seeds shared by every experiment of a run.
pub struct Setup {
    pub rho: GaussianMixture,
    pub nu: GaussianMixture,
    pub z0: Array2<f64>,
    pub noise_seed: u64,
    pub probe_seed: u64,
}

impl Setup {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let rho = cfg.rho.build()?;
        let nu = cfg.nu.build()?;
        let mut g = rng::stream(rng::named_seed(cfg.seed, "base_samples"), 0);
        let z0 = Array2::from_shape_simple_fn((cfg.batch_size, cfg.dim()), || StandardNormal.sample(&mut g));
        Ok(Self {
            rho,
            nu,
            z0,
            noise_seed: rng::named_seed(cfg.seed, "path_noise"),
            probe_seed: rng::named_seed(cfg.seed, "hutchinson_probes"),
        })
    }

    fn spec(&self, cfg: &RunConfig, external: bool) -> Result<PerturbationSpec> {
        PerturbationSpec::new(
            self.nu.clone(),
            cfg.perturbation.sign,
            cfg.perturbation.ratio_clamp.resolve(external),
        )
    }

    /// Exact perturbed target `ρ^{±η}`, the sign following the perturbation direction.
    pub fn perturbed(&self, cfg: &RunConfig, eta: f64) -> Result<GaussianMixture> {
        GaussianMixture::perturbed(&self.rho, &self.nu, cfg.perturbation.sign.value() * eta)
    }

    fn sampler(&self, kind: PathKind) -> Sampler<'static> {
        match kind {
            PathKind::Ode => Sampler::Ode,
            PathKind::Sde => Sampler::Sde(NoiseSource::Seeded(self.noise_seed)),
        }
    }
}

fn grid_for(cfg: &RunConfig, dt: f64) -> Result<(Schedule, IntegrationGrid)> {
    let sched = cfg.schedule.build(dt)?;
    let grid = IntegrationGrid::covering(&sched, dt)?;
    Ok((sched, grid))
}

/// Terminal states of the exact flow for target `target`.
fn analytic_terminal(
    target: &GaussianMixture,
    sched: &Schedule,
    grid: &IntegrationGrid,
    setup: &Setup,
    kind: PathKind,
) -> Result<Array2<f64>> {
    let src = ScoreSource::Analytic(DiffusedMeasure::new(target.clone(), *sched));
    sample_path(&src, sched, grid, setup, kind, Storage::Endpoints).map(|p| p.terminal().to_owned())
}

fn sample_path(
    src: &ScoreSource,
    sched: &Schedule,
    grid: &IntegrationGrid,
    setup: &Setup,
    kind: PathKind,
    storage: Storage,
) -> Result<SamplePath> {
    match kind {
        PathKind::Ode => sample_ode_with(src, sched, setup.z0.view(), grid, storage),
        PathKind::Sde => sample_sde_with(src, sched, setup.z0.view(), grid, NoiseSource::Seeded(setup.noise_seed), storage),
    }
}

/// Fused sample + sensitivity run with the requested density channel.
fn sensitivity_run(
    src: &ScoreSource,
    sched: &Schedule,
    grid: &IntegrationGrid,
    setup: &Setup,
    kind: PathKind,
    spec: &PerturbationSpec,
    density: DensityConfig,
) -> Result<JointOutcome> {
    let initial = standard_normal_log_density(setup.z0.view());
    let joint = match density {
        DensityConfig::Exact => JointDensity::Analytic(
            src.analytic()
                .ok_or_else(|| Error::usage("exact densities need the analytic backend"))?,
        ),
        DensityConfig::Hutchinson { n_probes } => JointDensity::ChangeOfVariables {
            estimator: DivergenceEstimator::hutchinson(n_probes, setup.probe_seed)?,
            initial_logp: initial.view(),
        },
        DensityConfig::Trace => JointDensity::ChangeOfVariables {
            estimator: DivergenceEstimator::Exact,
            initial_logp: initial.view(),
        },
    };
    integrate_joint(src, sched, setup.z0.view(), grid, setup.sampler(kind), spec, joint)
}

fn require_analytic(cfg: &RunConfig, what: &str) -> Result<()> {
    match cfg.backend {
        BackendConfig::Analytic => Ok(()),
        BackendConfig::External { .. } => Err(Error::usage(format!("{what} needs the analytic backend"))),
    }
}

/// Base flow, ψ and perturbed flows for one sampler and step size.
struct Flows {
    dt: f64,
    kind: PathKind,
    sched: Schedule,
    grid: IntegrationGrid,
    perturbed: Vec<(f64, Array2<f64>)>,
}

impl Flows {
    fn new(cfg: &RunConfig, setup: &Setup, kind: PathKind, dt: f64) -> Result<Self> {
        let (sched, grid) = grid_for(cfg, dt)?;
        let perturbed = cfg
            .sweep
            .eta_bar
            .iter()
            .map(|&eta| Ok((eta, analytic_terminal(&setup.perturbed(cfg, eta)?, &sched, &grid, setup, kind)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            dt,
            kind,
            sched,
            grid,
            perturbed,
        })
    }

    /// One `median_scaled_remainder` record per η̄.
    fn remainder_records(
        &self,
        cfg: &RunConfig,
        setup: &Setup,
        experiment: &str,
        density: DensityConfig,
    ) -> Result<Vec<Record>> {
        let src = ScoreSource::Analytic(DiffusedMeasure::new(setup.rho.clone(), self.sched));
        let spec = setup.spec(cfg, false)?;
        let out = sensitivity_run(&src, &self.sched, &self.grid, setup, self.kind, &spec, density)?;
        let (dname, probes) = density_name(density);
        self.perturbed
            .iter()
            .map(|(eta, pert)| {
                let (_, scaled) = taylor_remainder(pert.view(), out.terminal.view(), out.psi.view(), *eta)?;
                Ok(Record::new(experiment, "median_scaled_remainder", median(scaled.as_slice().expect("contiguous")))
                    .sampler(sampler_name(self.kind))
                    .density(dname)
                    .n_probes(probes)
                    .dt(self.dt)
                    .eta_bar(*eta))
            })
            .collect()
    }
}

/// Median `‖R(η̄)‖/η̄` for every sampler × step size × η̄, with exact densities.
pub fn run_remainder_sweep(cfg: &RunConfig) -> Result<Report> {
    require_analytic(cfg, "the remainder sweep")?;
    let setup = Setup::new(cfg)?;
    let mut report = Report::new(cfg);
    for &kind in &cfg.sweep.samplers {
        for &dt in &cfg.sweep.dt {
            let flows = Flows::new(cfg, &setup, kind, dt)?;
            report.records.extend(flows.remainder_records(cfg, &setup, REMAINDER, DensityConfig::Exact)?);
        }
    }
    Ok(report)
}

/// Remainder curves with Hutchinson change-of-variables densities for each probe
/// count, plus the exact-density reference, along ODE paths at `hutchinson_dt`.
pub fn run_hutchinson_sweep(cfg: &RunConfig) -> Result<Report> {
    require_analytic(cfg, "the Hutchinson sweep")?;
    let setup = Setup::new(cfg)?;
    let mut report = Report::new(cfg);
    let flows = Flows::new(cfg, &setup, PathKind::Ode, cfg.sweep.hutchinson_dt)?;
    report.records.extend(flows.remainder_records(cfg, &setup, HUTCHINSON, DensityConfig::Exact)?);
    for &n in &cfg.sweep.probes {
        let density = DensityConfig::Hutchinson { n_probes: n };
        report.records.extend(flows.remainder_records(cfg, &setup, HUTCHINSON, density)?);
    }
    Ok(report)
}

fn correlate(stat: Statistic, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Vec<f64> {
    (0..x.nrows())
        .map(|i| match stat {
            Statistic::Pearson => pearson(x.row(i), y.row(i)),
            Statistic::Spearman => spearman(x.row(i), y.row(i)),
            Statistic::Cosine => cosine(x.row(i), y.row(i)),
        })
        .collect()
}

fn push_correlations(report: &mut Report, base: Record, name: &str, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        let mut r = base.clone().sample(i);
        r.statistic = name.to_string();
        r.value = *v;
        report.push(r);
    }
    let mut r = base;
    r.statistic = format!("median_{name}");
    r.value = median(values);
    report.push(r);
}

fn spawn_source(backend: &BackendConfig, rho: &GaussianMixture, sched: &Schedule) -> Result<ScoreSource> {
    match backend {
        BackendConfig::Analytic => Ok(ScoreSource::Analytic(DiffusedMeasure::new(rho.clone(), *sched))),
        BackendConfig::External { command } => Ok(ScoreSource::External(ExternalScoreModel::spawn(
            command,
            rho.dim(),
            sched.t0(),
        )?)),
    }
}

fn finish(src: ScoreSource) -> Result<()> {
    match src {
        ScoreSource::External(e) => e.shutdown(),
        _ => Ok(()),
    }
}

/// OT targets for the run: samples of the perturbed target or of `ν`.
fn ot_targets(cfg: &RunConfig, setup: &Setup) -> Result<Array2<f64>> {
    let mut g = rng::stream(rng::named_seed(cfg.seed, "ot_targets"), 0);
    let measure = match cfg.correlation.ot.targets {
        OtTargets::Perturbed => setup.perturbed(cfg, cfg.correlation.eta_bar)?,
        OtTargets::Nu => setup.nu.clone(),
    };
    Ok(measure.sample(cfg.batch_size, &mut g))
}

/// Entropic coupling from `sources` to the configured targets, and the rays it induces.
pub fn ot_rays(cfg: &RunConfig, setup: &Setup, sources: ArrayView2<f64>) -> Result<(Coupling, Array2<f64>)> {
    let targets = ot_targets(cfg, setup)?;
    let ot = &cfg.correlation.ot;
    let coupling = if ot.standardize {
        let (a, b) = standardize(sources, targets.view());
        sinkhorn_log(a.view(), b.view(), ot.reg, ot.max_iter, ot.tol)?
    } else {
        sinkhorn_log(sources, targets.view(), ot.reg, ot.max_iter, ot.tol)?
    };
    let rays = transport_rays(&coupling, sources, targets.view())?;
    Ok((coupling, rays))
}

fn push_coupling(report: &mut Report, base: &Record, c: &Coupling) {
    for (name, v) in [
        ("ot_iterations", c.iterations_used as f64),
        ("ot_converged", f64::from(u8::from(c.converged))),
        ("ot_max_violation", c.max_violation),
    ] {
        let mut r = base.clone();
        r.statistic = name.to_string();
        r.value = v;
        report.push(r);
    }
}

/// Per-sample correlations: sensitivities against actual change and OT rays
/// (prediction mode), or candidate against analytic sensitivities (backend mode).
pub fn run_correlation_experiment(cfg: &RunConfig) -> Result<Report> {
    let setup = Setup::new(cfg)?;
    let c = &cfg.correlation;
    let (sched, grid) = grid_for(cfg, c.dt)?;
    let mut report = Report::new(cfg);
    let (dname, probes) = density_name(c.density);
    let base = Record::new(CORRELATION, "", 0.0)
        .sampler(sampler_name(c.sampler))
        .density(dname)
        .n_probes(probes)
        .dt(c.dt)
        .eta_bar(c.eta_bar);
    match c.mode {
        CorrelationMode::Prediction => {
            require_analytic(cfg, "prediction-mode correlation")?;
            let src = ScoreSource::Analytic(DiffusedMeasure::new(setup.rho.clone(), sched));
            let out = sensitivity_run(&src, &sched, &grid, &setup, c.sampler, &setup.spec(cfg, false)?, c.density)?;
            let perturbed = analytic_terminal(&setup.perturbed(cfg, c.eta_bar)?, &sched, &grid, &setup, c.sampler)?;
            let actual = &perturbed - &out.terminal;
            let (coupling, rays) = ot_rays(cfg, &setup, out.terminal.view())?;
            push_correlations(&mut report, base.clone(), "corr_psi_actual", &correlate(c.statistic, out.psi.view(), actual.view()));
            push_correlations(&mut report, base.clone(), "corr_ot_actual", &correlate(c.statistic, rays.view(), actual.view()));
            push_coupling(&mut report, &base, &coupling);
        }
        CorrelationMode::Backend => {
            let reference_src = ScoreSource::Analytic(DiffusedMeasure::new(setup.rho.clone(), sched));
            let reference = sensitivity_run(
                &reference_src,
                &sched,
                &grid,
                &setup,
                c.sampler,
                &setup.spec(cfg, false)?,
                DensityConfig::Exact,
            )?;
            let candidate_cfg = c.candidate.as_ref().unwrap_or(&cfg.backend);
            let external = matches!(candidate_cfg, BackendConfig::External { .. });
            let candidate_src = spawn_source(candidate_cfg, &setup.rho, &sched)?;
            if candidate_src.dim() != reference_src.dim() {
                return Err(Error::usage("candidate and reference backends differ in dimension"));
            }
            let candidate = sensitivity_run(
                &candidate_src,
                &sched,
                &grid,
                &setup,
                c.sampler,
                &setup.spec(cfg, external)?,
                c.density,
            )?;
            finish(candidate_src)?;
            push_correlations(
                &mut report,
                base,
                "corr_reference_candidate",
                &correlate(c.statistic, reference.psi.view(), candidate.psi.view()),
            );
        }
    }
    Ok(report)
}

/// Sample with the configured backend at the first sweep step size.
pub fn run_sample(cfg: &RunConfig, kind: PathKind, storage: Storage) -> Result<(Report, SamplePath)> {
    let setup = Setup::new(cfg)?;
    let dt = first_dt(cfg)?;
    let (sched, grid) = grid_for(cfg, dt)?;
    let src = spawn_source(&cfg.backend, &setup.rho, &sched)?;
    let path = sample_path(&src, &sched, &grid, &setup, kind, storage)?;
    finish(src)?;
    let mut report = Report::new(cfg);
    let norms: Vec<f64> = path.terminal().rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let base = Record::new("sample", "", 0.0).sampler(sampler_name(kind)).dt(dt);
    for (i, n) in norms.iter().enumerate() {
        let mut r = base.clone().sample(i);
        r.statistic = "terminal_norm".into();
        r.value = *n;
        report.push(r);
    }
    let mut r = base;
    r.statistic = "median_terminal_norm".into();
    r.value = median(&norms);
    report.push(r);
    Ok((report, path))
}

fn first_dt(cfg: &RunConfig) -> Result<f64> {
    cfg.sweep
        .dt
        .first()
        .copied()
        .ok_or_else(|| Error::config("sweep.dt is empty"))
}

/// Sample path and sensitivity path with the configured backend and density channel.
pub fn run_sensitivity(cfg: &RunConfig, kind: PathKind, storage: Storage) -> Result<(Report, SamplePath, SensitivityPath)> {
    let setup = Setup::new(cfg)?;
    let dt = first_dt(cfg)?;
    let (sched, grid) = grid_for(cfg, dt)?;
    let src = spawn_source(&cfg.backend, &setup.rho, &sched)?;
    let external = matches!(cfg.backend, BackendConfig::External { .. });
    let spec = setup.spec(cfg, external)?;
    let path = sample_path(&src, &sched, &grid, &setup, kind, Storage::Full)?;
    let initial = standard_normal_log_density(setup.z0.view());
    let (psi, logp) = match cfg.density {
        DensityConfig::Exact => {
            let m = src
                .analytic()
                .ok_or_else(|| Error::usage("exact densities need the analytic backend"))?;
            (integrate_sample_sensitivity_with(&src, &sched, &path, &spec, DensityChannel::Analytic(m), storage)?, None)
        }
        DensityConfig::Hutchinson { .. } | DensityConfig::Trace => {
            let est = match cfg.density {
                DensityConfig::Hutchinson { n_probes } => DivergenceEstimator::hutchinson(n_probes, setup.probe_seed)?,
                _ => DivergenceEstimator::Exact,
            };
            let logp = integrate_log_density(&src, &sched, &path, &est, initial.view())?;
            let psi = integrate_sample_sensitivity_with(
                &src,
                &sched,
                &path,
                &spec,
                DensityChannel::Precomputed(logp.view()),
                storage,
            )?;
            (psi, Some(logp))
        }
    };
    finish(src)?;
    let (dname, probes) = density_name(cfg.density);
    let base = Record::new("sensitivity", "", 0.0)
        .sampler(sampler_name(kind))
        .density(dname)
        .n_probes(probes)
        .dt(dt);
    let mut report = Report::new(cfg);
    let norms: Vec<f64> = psi.terminal().rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    for (i, n) in norms.iter().enumerate() {
        let mut r = base.clone().sample(i);
        r.statistic = "psi_norm".into();
        r.value = *n;
        report.push(r);
    }
    let diag = psi.diagnostics();
    let max_log_ratio = diag.iter().map(|d| d.max_abs_log_ratio).fold(0.0, f64::max);
    let clamp = if diag.is_empty() {
        0.0
    } else {
        diag.iter().map(|d| d.clamp_fraction).sum::<f64>() / diag.len() as f64
    };
    let mut summary = vec![
        ("median_psi_norm", median(&norms)),
        ("max_abs_log_ratio", max_log_ratio),
        ("mean_clamp_fraction", clamp),
    ];
    if let Some(logp) = logp {
        let last: Array1<f64> = logp.row(logp.nrows() - 1).to_owned();
        summary.push(("median_terminal_log_density", median(last.as_slice().expect("contiguous"))));
    }
    for (name, v) in summary {
        let mut r = base.clone();
        r.statistic = name.into();
        r.value = v;
        report.push(r);
    }
    Ok((report, path, psi))
}

/// Entropic OT rays from base samples to the configured targets.
pub fn run_ot_baseline(cfg: &RunConfig, kind: PathKind) -> Result<Report> {
    let setup = Setup::new(cfg)?;
    let dt = cfg.correlation.dt;
    let (sched, grid) = grid_for(cfg, dt)?;
    let src = spawn_source(&cfg.backend, &setup.rho, &sched)?;
    let path = sample_path(&src, &sched, &grid, &setup, kind, Storage::Endpoints)?;
    finish(src)?;
    let (coupling, rays) = ot_rays(cfg, &setup, path.terminal())?;
    let mut report = Report::new(cfg);
    let base = Record::new("ot_baseline", "", 0.0)
        .sampler(sampler_name(kind))
        .dt(dt)
        .eta_bar(cfg.correlation.eta_bar);
    let norms: Vec<f64> = rays.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    for (i, n) in norms.iter().enumerate() {
        let mut r = base.clone().sample(i);
        r.statistic = "ray_norm".into();
        r.value = *n;
        report.push(r);
    }
    push_coupling(&mut report, &base, &coupling);
    Ok(report)
}
