//! Fixed-step samplers: forward Euler for the probability-flow ODE and
//! Euler–Maruyama for the reverse VP-SDE.
//!
//! Wiener increments are drawn from a stream keyed by `(seed, step)`, so a
//! perturbed model can be driven by exactly the same noise realization as the
//! base model, either by reusing the seed or by replaying a recorded path.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::schedules::{Schedule, TIME_SLACK};
use crate::score_source::ScoreSource;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrationGrid {
    s_start: f64,
    dt: f64,
    n_steps: usize,
}

impl IntegrationGrid {
    /// Grid from `s_start` towards `s_end` with `round((s_end - s_start) / dt)` steps.
    pub fn new(s_start: f64, s_end: f64, dt: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::construction(format!("step size must be positive, got {dt}")));
        }
        if !(s_start.is_finite() && s_end.is_finite() && s_end >= s_start) {
            return Err(Error::construction(format!("invalid grid span [{s_start}, {s_end}]")));
        }
        let n_steps = ((s_end - s_start) / dt).round() as usize;
        Ok(Self { s_start, dt, n_steps })
    }

    /// The full sampling interval `[t0, t1_trunc]` of `schedule`.
    pub fn covering(schedule: &Schedule, dt: f64) -> Result<Self> {
        Self::new(schedule.t0(), schedule.t1_trunc(), dt)
    }

    pub fn s_start(&self) -> f64 {
        self.s_start
    }

    pub fn s_end(&self) -> f64 {
        self.time(self.n_steps)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn time(&self, i: usize) -> f64 {
        self.s_start + i as f64 * self.dt
    }

    pub(crate) fn check_within(&self, schedule: &Schedule) -> Result<()> {
        if self.s_start < schedule.t0() - TIME_SLACK || self.s_end() > schedule.t1_trunc() + 1e-9 {
            return Err(Error::usage(format!(
                "grid [{}, {}] leaves the sampling interval [{}, {}]",
                self.s_start,
                self.s_end(),
                schedule.t0(),
                schedule.t1_trunc()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathKind {
    Ode,
    Sde,
}

/// Which states a sampler keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Storage {
    /// Every state and every noise increment.
    Full,
    /// Every `k`-th state plus the terminal one, and every noise increment.
    Strided(usize),
    /// Initial and terminal states only; no noise.
    Endpoints,
}

/// Wiener realization driving an SDE path.
#[derive(Debug, Clone, Copy)]
pub enum NoiseSource<'a> {
    /// Increments regenerated from the `(seed, step)` stream.
    Seeded(u64),
    /// Increments replayed from a recorded `n_steps×B×d` array.
    Recorded(ArrayView3<'a, f64>),
}

/// Wiener increments for one step: `sqrt(dt) * ξ`, `ξ` standard normal, row-major draw order.
pub fn wiener_increments(seed: u64, step: usize, batch: usize, dim: usize, dt: f64) -> Array2<f64> {
    let mut g = rng::stream(seed, step as u64);
    let scale = dt.sqrt();
    Array2::from_shape_simple_fn((batch, dim), || {
        let xi: f64 = StandardNormal.sample(&mut g);
        scale * xi
    })
}

impl NoiseSource<'_> {
    pub(crate) fn increment(&self, step: usize, batch: usize, dim: usize, dt: f64) -> Result<Array2<f64>> {
        match self {
            NoiseSource::Seeded(seed) => Ok(wiener_increments(*seed, step, batch, dim, dt)),
            NoiseSource::Recorded(noise) => {
                if step >= noise.shape()[0] || noise.shape()[1] != batch || noise.shape()[2] != dim {
                    return Err(Error::usage(format!(
                        "recorded noise of shape {:?} cannot drive step {step} of a {batch}×{dim} batch",
                        noise.shape()
                    )));
                }
                Ok(noise.slice(s![step, .., ..]).to_owned())
            }
        }
    }

    fn seed(&self) -> Option<u64> {
        match self {
            NoiseSource::Seeded(seed) => Some(*seed),
            NoiseSource::Recorded(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    grid: IntegrationGrid,
    kind: PathKind,
    seed: Option<u64>,
    stride: usize,
    states: Array3<f64>,
    noise: Option<Array3<f64>>,
}

/// Step indices kept under a given stride.
pub(crate) fn stored_steps(n_steps: usize, stride: usize) -> Vec<usize> {
    let mut steps: Vec<usize> = (0..=n_steps).step_by(stride.max(1)).collect();
    if *steps.last().expect("step 0 always stored") != n_steps {
        steps.push(n_steps);
    }
    steps
}

impl SamplePath {
    pub(crate) fn from_parts(
        grid: IntegrationGrid,
        kind: PathKind,
        seed: Option<u64>,
        stride: usize,
        states: Array3<f64>,
        noise: Option<Array3<f64>>,
    ) -> Result<Self> {
        let expected = stored_steps(grid.n_steps(), stride).len();
        if states.shape()[0] != expected {
            return Err(Error::construction(format!(
                "path stores {} states, stride {stride} over {} steps needs {expected}",
                states.shape()[0],
                grid.n_steps()
            )));
        }
        if let Some(noise) = &noise {
            if noise.shape() != [grid.n_steps(), states.shape()[1], states.shape()[2]] {
                return Err(Error::construction("noise array does not match the path shape"));
            }
        }
        Ok(Self {
            grid,
            kind,
            seed,
            stride,
            states,
            noise,
        })
    }

    pub fn grid(&self) -> &IntegrationGrid {
        &self.grid
    }

    pub fn kind(&self) -> PathKind {
        self.kind
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn batch_size(&self) -> usize {
        self.states.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.states.shape()[2]
    }

    /// All stored states, `n_stored×B×d`.
    pub fn states(&self) -> ArrayView3<'_, f64> {
        self.states.view()
    }

    pub fn noise(&self) -> Option<ArrayView3<'_, f64>> {
        self.noise.as_ref().map(|n| n.view())
    }

    /// True when every grid state is stored.
    pub fn is_dense(&self) -> bool {
        self.stride == 1
    }

    pub fn stored_steps(&self) -> Vec<usize> {
        stored_steps(self.grid.n_steps(), self.stride)
    }

    /// State at grid step `step`, if it was stored.
    pub fn state(&self, step: usize) -> Option<ArrayView2<'_, f64>> {
        let idx = if step == self.grid.n_steps() {
            self.states.shape()[0] - 1
        } else if step.is_multiple_of(self.stride) {
            step / self.stride
        } else {
            return None;
        };
        (step <= self.grid.n_steps()).then(|| self.states.slice(s![idx, .., ..]))
    }

    pub fn initial(&self) -> ArrayView2<'_, f64> {
        self.states.slice(s![0, .., ..])
    }

    pub fn terminal(&self) -> ArrayView2<'_, f64> {
        self.states.slice(s![self.states.shape()[0] - 1, .., ..])
    }
}

/// Probability-flow velocity `a(s) z + b(s) score(s, z)` for each row.
pub fn velocity(src: &ScoreSource, schedule: &Schedule, s: f64, z: ArrayView2<f64>) -> Result<Array2<f64>> {
    let c = schedule.ode_coefficients(s)?;
    let score = src.score_batch(s, z)?;
    Ok(&z * c.a + &score * c.b)
}

/// Reverse-SDE drift `drift_z(s) z + drift_score(s) score(s, z)` for each row.
pub fn sde_drift(src: &ScoreSource, schedule: &Schedule, s: f64, z: ArrayView2<f64>) -> Result<Array2<f64>> {
    let c = schedule.sde_coefficients(s)?;
    let score = src.score_batch(s, z)?;
    Ok(&z * c.drift_z + &score * c.drift_score)
}

pub(crate) fn check_finite(z: &Array2<f64>, step: usize, what: &str) -> Result<()> {
    if z.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Integration {
            step,
            message: format!("non-finite {what}"),
        })
    }
}

pub(crate) fn check_initial(src: &ScoreSource, z0: ArrayView2<f64>) -> Result<()> {
    if z0.nrows() == 0 {
        return Err(Error::usage("initial batch is empty"));
    }
    if z0.ncols() != src.dim() {
        return Err(Error::usage(format!(
            "initial batch has dimension {}, score source has {}",
            z0.ncols(),
            src.dim()
        )));
    }
    if z0.iter().any(|x| !x.is_finite()) {
        return Err(Error::Integration {
            step: 0,
            message: "non-finite initial state".into(),
        });
    }
    Ok(())
}

pub(crate) fn stride_for(storage: Storage, n_steps: usize) -> Result<usize> {
    match storage {
        Storage::Full => Ok(1),
        Storage::Strided(0) => Err(Error::usage("stride must be at least 1")),
        Storage::Strided(k) => Ok(k),
        Storage::Endpoints => Ok(n_steps.max(1)),
    }
}

struct Recorder {
    stride: usize,
    n_steps: usize,
    states: Vec<Array2<f64>>,
    noise: Option<Vec<Array2<f64>>>,
}

impl Recorder {
    fn new(storage: Storage, n_steps: usize, z0: &Array2<f64>, with_noise: bool) -> Result<Self> {
        let stride = stride_for(storage, n_steps)?;
        let keep_noise = with_noise && storage != Storage::Endpoints;
        Ok(Self {
            stride,
            n_steps,
            states: vec![z0.clone()],
            noise: keep_noise.then(Vec::new),
        })
    }

    fn push(&mut self, step: usize, z: &Array2<f64>) {
        if step.is_multiple_of(self.stride) || step == self.n_steps {
            self.states.push(z.clone());
        }
    }

    fn push_noise(&mut self, dw: Array2<f64>) {
        if let Some(noise) = &mut self.noise {
            noise.push(dw);
        }
    }

    fn finish(self, grid: IntegrationGrid, kind: PathKind, seed: Option<u64>) -> Result<SamplePath> {
        let stack = |items: &[Array2<f64>], shape: (usize, usize)| -> Array3<f64> {
            let mut out = Array3::zeros((items.len(), shape.0, shape.1));
            for (i, item) in items.iter().enumerate() {
                out.slice_mut(s![i, .., ..]).assign(item);
            }
            out
        };
        let shape = self.states[0].dim();
        let states = stack(&self.states, shape);
        let noise = self.noise.map(|n| stack(&n, shape));
        SamplePath::from_parts(grid, kind, seed, self.stride, states, noise)
    }
}

pub fn sample_ode(src: &ScoreSource, schedule: &Schedule, z0: ArrayView2<f64>, grid: &IntegrationGrid) -> Result<SamplePath> {
    sample_ode_with(src, schedule, z0, grid, Storage::Full)
}

/// Forward Euler on the probability-flow ODE: `z_{i+1} = z_i + dt * v(s_i, z_i)`.
pub fn sample_ode_with(
    src: &ScoreSource,
    schedule: &Schedule,
    z0: ArrayView2<f64>,
    grid: &IntegrationGrid,
    storage: Storage,
) -> Result<SamplePath> {
    check_initial(src, z0)?;
    grid.check_within(schedule)?;
    let mut z = z0.to_owned();
    let mut rec = Recorder::new(storage, grid.n_steps(), &z, false)?;
    for i in 0..grid.n_steps() {
        let s = grid.time(i);
        let score = src.score_batch(s, z.view())?;
        advance(schedule, PathKind::Ode, s, grid.dt(), &mut z, &score, None)?;
        check_finite(&z, i, "state")?;
        rec.push(i + 1, &z);
    }
    rec.finish(*grid, PathKind::Ode, None)
}

pub fn sample_sde(
    src: &ScoreSource,
    schedule: &Schedule,
    z0: ArrayView2<f64>,
    grid: &IntegrationGrid,
    seed: u64,
) -> Result<SamplePath> {
    sample_sde_with(src, schedule, z0, grid, NoiseSource::Seeded(seed), Storage::Full)
}

/// Euler–Maruyama on the reverse SDE: `z_{i+1} = z_i + dt * f(s_i, z_i) + g(s_i) * ΔW_i`.
pub fn sample_sde_with(
    src: &ScoreSource,
    schedule: &Schedule,
    z0: ArrayView2<f64>,
    grid: &IntegrationGrid,
    noise: NoiseSource<'_>,
    storage: Storage,
) -> Result<SamplePath> {
    check_initial(src, z0)?;
    grid.check_within(schedule)?;
    let (b, d) = z0.dim();
    let mut z = z0.to_owned();
    let mut rec = Recorder::new(storage, grid.n_steps(), &z, true)?;
    for i in 0..grid.n_steps() {
        let s = grid.time(i);
        let dw = noise.increment(i, b, d, grid.dt())?;
        let score = src.score_batch(s, z.view())?;
        advance(schedule, PathKind::Sde, s, grid.dt(), &mut z, &score, Some(&dw))?;
        check_finite(&z, i, "state")?;
        rec.push(i + 1, &z);
        rec.push_noise(dw);
    }
    rec.finish(*grid, PathKind::Sde, noise.seed())
}

/// One explicit step given the score at the current state. Shared by every
/// integrator so that fused and split runs agree bit for bit.
pub(crate) fn advance(
    schedule: &Schedule,
    kind: PathKind,
    s: f64,
    dt: f64,
    z: &mut Array2<f64>,
    score: &Array2<f64>,
    dw: Option<&Array2<f64>>,
) -> Result<()> {
    match kind {
        PathKind::Ode => {
            let c = schedule.ode_coefficients(s)?;
            let v = &*z * c.a + score * c.b;
            z.scaled_add(dt, &v);
        }
        PathKind::Sde => {
            let c = schedule.sde_coefficients(s)?;
            let drift = &*z * c.drift_z + score * c.drift_score;
            z.scaled_add(dt, &drift);
            let dw = dw.ok_or_else(|| Error::usage("SDE step without a noise increment"))?;
            z.scaled_add(c.diffusion, dw);
        }
    }
    Ok(())
}
