//! Log-densities along probability-flow paths from the continuous change of
//! variables: `d/ds log p_s(z_s) = -div v_s(z_s)`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{PathKind, SamplePath};
use crate::error::{Error, Result};
use crate::rng;
use crate::schedules::Schedule;
use crate::score_source::ScoreSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum DivergenceEstimator {
    /// `d·a + b·tr J_score`. Closed form for analytic sources; `d` JVPs per row otherwise.
    Exact,
    /// Mean of `εᵀ J_v ε` over `n_probes` standard-normal probes shared by all rows at a step.
    Hutchinson { n_probes: usize, seed: u64 },
}

impl DivergenceEstimator {
    pub fn hutchinson(n_probes: usize, seed: u64) -> Result<Self> {
        if n_probes == 0 {
            return Err(Error::construction("Hutchinson estimator needs at least one probe"));
        }
        Ok(Self::Hutchinson { n_probes, seed })
    }
}

/// Probes for integration step `step`: `n_probes×d`, row `k` is probe `k`.
pub fn hutchinson_probes(seed: u64, step: usize, n_probes: usize, dim: usize) -> Array2<f64> {
    let mut g = rng::stream(seed, step as u64);
    Array2::from_shape_simple_fn((n_probes, dim), || StandardNormal.sample(&mut g))
}

/// Velocity divergence at every row of `z`. `step` selects the probe stream.
pub fn divergence(
    src: &ScoreSource,
    schedule: &Schedule,
    s: f64,
    z: ArrayView2<f64>,
    est: &DivergenceEstimator,
    step: usize,
) -> Result<Array1<f64>> {
    let c = schedule.ode_coefficients(s)?;
    let d = z.ncols() as f64;
    match est {
        DivergenceEstimator::Exact => {
            let tr = src.score_trace_batch(s, z)?;
            Ok(tr.mapv(|t| d * c.a + c.b * t))
        }
        DivergenceEstimator::Hutchinson { n_probes, seed } => {
            if *n_probes == 0 {
                return Err(Error::usage("Hutchinson estimator needs at least one probe"));
            }
            let probes = hutchinson_probes(*seed, step, *n_probes, z.ncols());
            let sq_norms: Array1<f64> = probes.rows().into_iter().map(|p| p.dot(&p)).collect();
            let q = src.score_quadratic_forms(s, z, probes.view())?;
            let n = *n_probes as f64;
            Ok(Array1::from_shape_fn(z.nrows(), |i| {
                q.row(i)
                    .iter()
                    .zip(sq_norms.iter())
                    .map(|(qk, nk)| c.a * nk + c.b * qk)
                    .sum::<f64>()
                    / n
            }))
        }
    }
}

/// `log N(z; 0, I)` per row.
pub fn standard_normal_log_density(z: ArrayView2<f64>) -> Array1<f64> {
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    z.rows()
        .into_iter()
        .map(|r| -0.5 * r.dot(&r) - z.ncols() as f64 * half_log_2pi)
        .collect()
}

/// One Euler step of the CCoV equation.
pub(crate) fn log_density_step(logp: &mut Array1<f64>, div: &Array1<f64>, dt: f64) {
    logp.scaled_add(-dt, div);
}

/// Log-densities at every grid point of a dense ODE path, `(n_steps+1)×B`.
pub fn integrate_log_density(
    src: &ScoreSource,
    schedule: &Schedule,
    path: &SamplePath,
    est: &DivergenceEstimator,
    initial_logp: ArrayView1<f64>,
) -> Result<Array2<f64>> {
    if path.kind() != PathKind::Ode {
        return Err(Error::usage(
            "log-densities by change of variables are only defined along probability-flow ODE paths",
        ));
    }
    if !path.is_dense() {
        return Err(Error::usage("change of variables needs every grid state; resample with full storage"));
    }
    if initial_logp.len() != path.batch_size() {
        return Err(Error::usage("initial log-densities do not match the batch size"));
    }
    let grid = path.grid();
    let mut out = Array2::zeros((grid.n_steps() + 1, path.batch_size()));
    let mut logp = initial_logp.to_owned();
    out.row_mut(0).assign(&logp);
    let states = path.states();
    for i in 0..grid.n_steps() {
        let div = divergence(src, schedule, grid.time(i), states.slice(s![i, .., ..]), est, i)?;
        log_density_step(&mut logp, &div, grid.dt());
        if logp.iter().any(|x| !x.is_finite()) {
            return Err(Error::Integration {
                step: i,
                message: "non-finite log-density".into(),
            });
        }
        out.row_mut(i + 1).assign(&logp);
    }
    Ok(out)
}
