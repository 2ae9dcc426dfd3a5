mod common;

use common::{hutchinson_rmse, max_ccov_error, slope, standard_normal, two_bumps};
use diffsens::dynamics::{sample_ode, IntegrationGrid};
use diffsens::likelihood::{integrate_log_density, DivergenceEstimator};
use diffsens::measures::DiffusedMeasure;
use diffsens::schedules::Schedule;
use diffsens::score_source::ScoreSource;
use ndarray::Array1;

#[test]
fn change_of_variables_error_is_first_order_in_dt() {
    let dts = [4e-3, 2e-3, 1e-3];
    let errs: Vec<f64> = dts.iter().map(|&dt| max_ccov_error(dt, 32)).collect();
    let k = slope(&dts, &errs);
    assert!((0.7..=1.3).contains(&k), "slope {k}, errors {errs:?}");
}

#[test]
fn hutchinson_error_shrinks_like_inverse_root_probes() {
    let probes = [1usize, 10, 100, 1000];
    let rmse = hutchinson_rmse(&probes);
    let xs: Vec<f64> = probes.iter().map(|&n| n as f64).collect();
    let k = slope(&xs, &rmse);
    assert!((-0.65..=-0.35).contains(&k), "slope {k}, rmse {rmse:?}");
}

#[test]
fn hutchinson_terminal_discrepancy_is_centered() {
    let (d, b, dt) = (10, 128, 1e-2);
    let sched = Schedule::linear(dt).unwrap();
    let (rho, _) = two_bumps(d);
    let src = ScoreSource::Analytic(DiffusedMeasure::new(rho, sched));
    let grid = IntegrationGrid::covering(&sched, dt).unwrap();
    let z0 = standard_normal(4, b, d);
    let path = sample_ode(&src, &sched, z0.view(), &grid).unwrap();
    let init = Array1::zeros(b);
    let exact = integrate_log_density(&src, &sched, &path, &DivergenceEstimator::Exact, init.view()).unwrap();
    // different seeds per row would be needed for independent rows; average over seeds instead
    let diffs: Vec<f64> = (0..40u64)
        .map(|seed| {
            let est = DivergenceEstimator::hutchinson(100, seed).unwrap();
            let h = integrate_log_density(&src, &sched, &path, &est, init.view()).unwrap();
            (&h.row(grid.n_steps()) - &exact.row(grid.n_steps())).mean().unwrap()
        })
        .collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let se = (diffs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0) / n).sqrt();
    assert!(mean.abs() < 3.0 * se + 1e-12, "mean {mean} se {se}");
}
