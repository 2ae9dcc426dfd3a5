#![allow(dead_code)]

use diffsens::dynamics::{sample_ode, sample_ode_with, sample_sde_with, IntegrationGrid, NoiseSource, Storage};
use diffsens::likelihood::{integrate_log_density, DivergenceEstimator};
use diffsens::measures::{DiffusedMeasure, GaussianMixture};
use diffsens::schedules::Schedule;
use diffsens::sensitivity::{integrate_joint, JointDensity, PerturbationSpec, Sampler, Sign};
use diffsens::stats::{cosine, median, relative_l2};
use diffsens::score_source::ScoreSource;
use ndarray::{s, Array1, Array2, ArrayView2};
use rand_distr::{Distribution, StandardNormal};

/// ρ = ½N(−1, 0.01 I) + ½N(+1, 0.01 I), ν = N(+1, 0.01 I) in `d` dimensions.
pub fn two_bumps(d: usize) -> (GaussianMixture, GaussianMixture) {
    let mut means = Array2::from_elem((2, d), 1.0);
    means.row_mut(0).fill(-1.0);
    let rho = GaussianMixture::new(vec![0.5, 0.5], means, vec![0.1 * 0.1; 2]).unwrap();
    let nu = GaussianMixture::isotropic_gaussian(Array1::from_elem(d, 1.0), 0.1 * 0.1).unwrap();
    (rho, nu)
}

pub fn standard_normal(seed: u64, b: usize, d: usize) -> Array2<f64> {
    let mut g = diffsens::rng::stream(seed, 0);
    Array2::from_shape_simple_fn((b, d), || StandardNormal.sample(&mut g))
}

pub fn analytic(m: &GaussianMixture, sched: Schedule) -> ScoreSource {
    ScoreSource::Analytic(DiffusedMeasure::new(m.clone(), sched))
}

/// Terminal states of the flow for target `m`; `noise_seed` selects an SDE run.
pub fn flow(m: &GaussianMixture, sched: &Schedule, z0: ArrayView2<f64>, grid: &IntegrationGrid, noise_seed: Option<u64>) -> Array2<f64> {
    let src = analytic(m, *sched);
    let path = match noise_seed {
        None => sample_ode_with(&src, sched, z0, grid, Storage::Endpoints).unwrap(),
        Some(seed) => sample_sde_with(&src, sched, z0, grid, NoiseSource::Seeded(seed), Storage::Endpoints).unwrap(),
    };
    path.terminal().to_owned()
}

/// Median cosine and relative L2 error of terminal ψ against the two-sided
/// flow-map difference quotient (h = 1e-4) at d = 10, B = 256, dt = 1e-3.
pub fn oracle_agreement(sde: bool) -> (f64, f64) {
    let (rho, nu) = two_bumps(10);
    oracle_agreement_for(&rho, &nu, sde)
}

pub fn oracle_agreement_for(rho: &GaussianMixture, nu: &GaussianMixture, sde: bool) -> (f64, f64) {
    let (b, dt, h) = (256, 1e-3, 1e-4);
    let d = rho.dim();
    let sched = Schedule::linear(dt).unwrap();
    let (rho, nu) = (rho.clone(), nu.clone());
    let grid = IntegrationGrid::covering(&sched, dt).unwrap();
    let z0 = standard_normal(1, b, d);
    let noise = if sde { Some(7) } else { None };
    let measure = DiffusedMeasure::new(rho.clone(), sched);
    let src = ScoreSource::Analytic(measure.clone());
    let sampler = match noise {
        Some(seed) => Sampler::Sde(NoiseSource::Seeded(seed)),
        None => Sampler::Ode,
    };
    let spec = PerturbationSpec::new(nu.clone(), Sign::Add, None).unwrap();
    let out = integrate_joint(&src, &sched, z0.view(), &grid, sampler, &spec, JointDensity::Analytic(&measure)).unwrap();
    // η = −h needs ν to be a component of ρ; otherwise center the quotient at η = h
    let (lo, hi) = match GaussianMixture::perturbed(&rho, &nu, -h) {
        Ok(m) => (m, GaussianMixture::perturbed(&rho, &nu, h).unwrap()),
        Err(_) => (rho.clone(), GaussianMixture::perturbed(&rho, &nu, 2.0 * h).unwrap()),
    };
    let plus = flow(&hi, &sched, z0.view(), &grid, noise);
    let minus = flow(&lo, &sched, z0.view(), &grid, noise);
    let fd = (&plus - &minus) / (2.0 * h);
    let cos: Vec<f64> = (0..b).map(|i| cosine(out.psi.row(i), fd.row(i))).collect();
    let rel: Vec<f64> = (0..b).map(|i| relative_l2(out.psi.row(i), fd.row(i))).collect();
    (median(&cos), median(&rel))
}

/// Least-squares slope of `ln ys` against `ln xs`.
pub fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = (xs.iter().map(|x| x.ln()).collect(), ys.iter().map(|y| y.ln()).collect());
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / lx.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>()
}

/// Largest |CCoV log-density − analytic log-density| over every grid point and row,
/// along ODE paths of the d=10 two-bump target.
pub fn max_ccov_error(dt: f64, b: usize) -> f64 {
    let d = 10;
    let sched = Schedule::linear(dt).unwrap();
    let (rho, _) = two_bumps(d);
    let measure = DiffusedMeasure::new(rho, sched);
    let src = ScoreSource::Analytic(measure.clone());
    let grid = IntegrationGrid::covering(&sched, dt).unwrap();
    let z0 = standard_normal(2, b, d);
    let path = sample_ode(&src, &sched, z0.view(), &grid).unwrap();
    let init: Array1<f64> = z0.rows().into_iter().map(|r| measure.log_density(0.0, r).unwrap()).collect();
    let logp = integrate_log_density(&src, &sched, &path, &DivergenceEstimator::Exact, init.view()).unwrap();
    let mut worst = 0.0f64;
    for i in 0..=grid.n_steps() {
        let m = measure.at(grid.time(i)).unwrap();
        for (j, z) in path.states().slice(s![i, .., ..]).rows().into_iter().enumerate() {
            worst = worst.max((logp[[i, j]] - m.log_density(z).unwrap()).abs());
        }
    }
    worst
}

/// Terminal RMSE of Hutchinson CCoV against the exact divergence for each probe count.
/// Probes are shared across rows, so squared errors are pooled over 10 seeds.
pub fn hutchinson_rmse(probes: &[usize]) -> Vec<f64> {
    let (d, b, dt) = (10, 16, 1e-2);
    let sched = Schedule::linear(dt).unwrap();
    let (rho, _) = two_bumps(d);
    let src = ScoreSource::Analytic(DiffusedMeasure::new(rho, sched));
    let grid = IntegrationGrid::covering(&sched, dt).unwrap();
    let z0 = standard_normal(3, b, d);
    let path = sample_ode(&src, &sched, z0.view(), &grid).unwrap();
    let init = Array1::zeros(b);
    let exact = integrate_log_density(&src, &sched, &path, &DivergenceEstimator::Exact, init.view()).unwrap();
    let last = grid.n_steps();
    probes
        .iter()
        .map(|&n| {
            let seeds = 10u64;
            let mse: f64 = (0..seeds)
                .map(|seed| {
                    let est = DivergenceEstimator::hutchinson(n, seed).unwrap();
                    let h = integrate_log_density(&src, &sched, &path, &est, init.view()).unwrap();
                    let diff = &h.row(last) - &exact.row(last);
                    diff.mapv(|x| x * x).sum() / b as f64
                })
                .sum::<f64>()
                / seeds as f64;
            mse.sqrt()
        })
        .collect()
}
