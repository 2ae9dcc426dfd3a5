//! Where scores come from: closed-form mixtures, a linear test model, or an
//! external process speaking the [`protocol`] wire format.
//!
//! All entry points are batch-first: one call evaluates every row of a `B×d`
//! array, so a remote model sees one round trip per integration step.

mod external;
pub mod protocol;
mod server;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::measures::{DiffusedMeasure, Marginal};

pub use external::ExternalScoreModel;
pub use server::serve;

/// Score `s(z) = M z`, independent of time. Used to check estimators against a
/// velocity field whose Jacobian is known exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearScore {
    matrix: Array2<f64>,
}

impl LinearScore {
    pub fn new(matrix: Array2<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() || matrix.nrows() == 0 {
            return Err(Error::construction("linear score needs a non-empty square matrix"));
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        self.matrix.view()
    }
}

#[derive(Debug)]
pub enum ScoreSource {
    Analytic(DiffusedMeasure),
    Linear(LinearScore),
    External(ExternalScoreModel),
}

/// Map rows in parallel, keeping row order so results do not depend on thread count.
fn par_rows<F>(rows: usize, d: usize, f: F) -> Result<Array2<f64>>
where
    F: Fn(usize) -> Result<Array1<f64>> + Sync + Send,
{
    let out: Vec<Array1<f64>> = (0..rows).into_par_iter().map(f).collect::<Result<_>>()?;
    let mut arr = Array2::zeros((rows, d));
    for (mut dst, src) in arr.rows_mut().into_iter().zip(&out) {
        dst.assign(src);
    }
    Ok(arr)
}

fn finite_difference_step(z: ArrayView1<f64>, u: ArrayView1<f64>) -> f64 {
    let znorm = z.dot(&z).sqrt();
    let unorm = u.dot(&u).sqrt();
    f64::EPSILON.sqrt() * (1.0 + znorm) / unorm.max(f64::MIN_POSITIVE)
}

impl ScoreSource {
    pub fn dim(&self) -> usize {
        match self {
            ScoreSource::Analytic(m) => m.dim(),
            ScoreSource::Linear(l) => l.matrix.nrows(),
            ScoreSource::External(e) => e.dim(),
        }
    }

    /// The closed-form measure behind this source, if there is one.
    pub fn analytic(&self) -> Option<&DiffusedMeasure> {
        match self {
            ScoreSource::Analytic(m) => Some(m),
            _ => None,
        }
    }

    fn check_batch(&self, z: ArrayView2<f64>) -> Result<()> {
        if z.nrows() == 0 {
            return Err(Error::domain("empty batch"));
        }
        if z.ncols() != self.dim() {
            return Err(Error::domain(format!(
                "batch has dimension {}, score source has {}",
                z.ncols(),
                self.dim()
            )));
        }
        Ok(())
    }

    fn marginal(&self, s: f64) -> Option<Result<Marginal>> {
        self.analytic().map(|m| m.at(s))
    }

    pub fn score_batch(&self, s: f64, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(z)?;
        match self {
            ScoreSource::Analytic(_) => {
                let m = self.marginal(s).expect("analytic")?;
                par_rows(z.nrows(), z.ncols(), |i| m.score(z.row(i)))
            }
            ScoreSource::Linear(l) => Ok(z.dot(&l.matrix.t())),
            ScoreSource::External(e) => e.score_batch(s, z),
        }
    }

    /// Row-wise products of the score Jacobian at `z[i]` with `u[i]`.
    ///
    /// External models get a central difference with step
    /// `sqrt(eps) * (1 + ‖z‖) / ‖u‖`, batched into a single request.
    pub fn score_jvp_batch(&self, s: f64, z: ArrayView2<f64>, u: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(z)?;
        if u.dim() != z.dim() {
            return Err(Error::domain("direction batch shape differs from point batch"));
        }
        if u.iter().any(|x| !x.is_finite()) {
            return Err(Error::domain("direction has non-finite entries"));
        }
        match self {
            ScoreSource::Analytic(_) => {
                let m = self.marginal(s).expect("analytic")?;
                par_rows(z.nrows(), z.ncols(), |i| m.score_jvp(z.row(i), u.row(i)))
            }
            ScoreSource::Linear(l) => Ok(u.dot(&l.matrix.t())),
            ScoreSource::External(e) => {
                let active: Vec<usize> = (0..z.nrows()).filter(|&i| u.row(i).iter().any(|x| *x != 0.0)).collect();
                let mut out = Array2::zeros(z.dim());
                if active.is_empty() {
                    return Ok(out);
                }
                let d = z.ncols();
                let n = active.len();
                let mut stacked = Array2::zeros((2 * n, d));
                let mut steps = Vec::with_capacity(n);
                for (k, &i) in active.iter().enumerate() {
                    let h = finite_difference_step(z.row(i), u.row(i));
                    steps.push(h);
                    let zi = z.row(i);
                    let ui = u.row(i);
                    stacked.row_mut(k).assign(&(&zi + &(&ui * h)));
                    stacked.row_mut(n + k).assign(&(&zi - &(&ui * h)));
                }
                let values = e.score_batch(s, stacked.view())?;
                for (k, &i) in active.iter().enumerate() {
                    let diff = (&values.row(k) - &values.row(n + k)) / (2.0 * steps[k]);
                    out.row_mut(i).assign(&diff);
                }
                Ok(out)
            }
        }
    }

    pub fn score_jvp(&self, s: f64, z: ArrayView1<f64>, u: ArrayView1<f64>) -> Result<Array1<f64>> {
        let out = self.score_jvp_batch(s, z.insert_axis(Axis(0)), u.insert_axis(Axis(0)))?;
        Ok(out.row(0).to_owned())
    }

    /// Exact trace of the score Jacobian for each row. External models pay `d`
    /// finite-difference JVPs per row.
    pub fn score_trace_batch(&self, s: f64, z: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.check_batch(z)?;
        match self {
            ScoreSource::Analytic(_) => {
                let m = self.marginal(s).expect("analytic")?;
                let traces: Vec<f64> = (0..z.nrows())
                    .into_par_iter()
                    .map(|i| m.divergence_of_score(z.row(i)))
                    .collect::<Result<_>>()?;
                Ok(Array1::from(traces))
            }
            ScoreSource::Linear(l) => Ok(Array1::from_elem(z.nrows(), l.matrix.diag().sum())),
            ScoreSource::External(_) => {
                let (b, d) = z.dim();
                let mut zs = Array2::zeros((b * d, d));
                let mut us = Array2::zeros((b * d, d));
                for i in 0..b {
                    for j in 0..d {
                        zs.row_mut(i * d + j).assign(&z.row(i));
                        us[[i * d + j, j]] = 1.0;
                    }
                }
                let jvps = self.score_jvp_batch(s, zs.view(), us.view())?;
                Ok(Array1::from_shape_fn(b, |i| (0..d).map(|j| jvps[[i * d + j, j]]).sum()))
            }
        }
    }

    /// `εᵀ J(z_i) ε` for every row `z_i` and every probe `ε` (rows of `probes`); result is `B×P`.
    pub fn score_quadratic_forms(&self, s: f64, z: ArrayView2<f64>, probes: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(z)?;
        if probes.ncols() != self.dim() {
            return Err(Error::domain("probe dimension differs from score dimension"));
        }
        let p = probes.nrows();
        match self {
            ScoreSource::Analytic(_) => {
                let m = self.marginal(s).expect("analytic")?;
                par_rows(z.nrows(), p, |i| m.score_quadratic_forms(z.row(i), probes))
            }
            ScoreSource::Linear(l) => {
                let mp = probes.dot(&l.matrix.t());
                let q = Array1::from_shape_fn(p, |k| probes.row(k).dot(&mp.row(k)));
                Ok(Array2::from_shape_fn((z.nrows(), p), |(_, k)| q[k]))
            }
            ScoreSource::External(_) => {
                let (b, d) = z.dim();
                let mut zs = Array2::zeros((b * p, d));
                let mut us = Array2::zeros((b * p, d));
                for i in 0..b {
                    for k in 0..p {
                        zs.row_mut(i * p + k).assign(&z.row(i));
                        us.row_mut(i * p + k).assign(&probes.row(k));
                    }
                }
                let jvps = self.score_jvp_batch(s, zs.view(), us.view())?;
                Ok(Array2::from_shape_fn((b, p), |(i, k)| probes.row(k).dot(&jvps.row(i * p + k))))
            }
        }
    }
}
