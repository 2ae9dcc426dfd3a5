//! Isotropic Gaussian mixtures and their pushforward through the diffusion.
//!
//! A [`GaussianMixture`] may carry point masses (variance 0). Those cannot be
//! evaluated directly; they become ordinary Gaussians once diffused to any time
//! `s < t1`, which is the only way they enter the sensitivity formulas.
//!
//! All responsibilities and density ratios are formed in log space.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::schedules::Schedule;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Array2<f64>,
    variances: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Array2<f64>, variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::construction("mixture needs at least one component"));
        }
        if means.nrows() != k || variances.len() != k {
            return Err(Error::construction(format!(
                "component count mismatch: {k} weights, {} means, {} variances",
                means.nrows(),
                variances.len()
            )));
        }
        if means.ncols() == 0 {
            return Err(Error::construction("mixture dimension must be positive"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::construction("weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::construction(format!("weights sum to {total}, not 1")));
        }
        if variances.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::construction("variances must be finite and nonnegative"));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::construction("means must be finite"));
        }
        Ok(Self {
            weights,
            means,
            variances,
        })
    }

    pub fn isotropic_gaussian(mean: Array1<f64>, variance: f64) -> Result<Self> {
        let d = mean.len();
        let means = mean
            .into_shape_with_order((1, d))
            .map_err(|e| Error::construction(e.to_string()))?;
        Self::new(vec![1.0], means, vec![variance])
    }

    /// Uniform point masses on the rows of `points`.
    pub fn from_empirical(points: ArrayView2<f64>) -> Result<Self> {
        let n = points.nrows();
        if n == 0 {
            return Err(Error::construction("empirical measure needs at least one point"));
        }
        Self::new(vec![1.0 / n as f64; n], points.to_owned(), vec![0.0; n])
    }

    /// The mixture `(1 - eta) * rho + eta * nu`.
    ///
    /// Components with bit-identical mean and variance are merged, so a slightly
    /// negative `eta` is accepted whenever the merged weights stay nonnegative
    /// (as happens when `nu` coincides with a component of `rho`).
    pub fn perturbed(rho: &Self, nu: &Self, eta: f64) -> Result<Self> {
        if rho.dim() != nu.dim() {
            return Err(Error::construction(format!(
                "dimension mismatch: rho is {}-d, nu is {}-d",
                rho.dim(),
                nu.dim()
            )));
        }
        if !eta.is_finite() {
            return Err(Error::construction("eta must be finite"));
        }
        let d = rho.dim();
        let mut weights: Vec<f64> = Vec::with_capacity(rho.n_components() + nu.n_components());
        let mut rows: Vec<ArrayView1<f64>> = Vec::new();
        let mut variances: Vec<f64> = Vec::new();
        let sources = rho
            .components()
            .map(|(w, m, v)| ((1.0 - eta) * w, m, v))
            .chain(nu.components().map(|(w, m, v)| (eta * w, m, v)));
        for (w, m, v) in sources {
            let existing = rows
                .iter()
                .zip(&variances)
                .position(|(row, var)| *var == v && row == m);
            match existing {
                Some(idx) => weights[idx] += w,
                None => {
                    weights.push(w);
                    rows.push(m);
                    variances.push(v);
                }
            }
        }
        if weights.iter().any(|w| *w < -1e-15) {
            return Err(Error::construction(format!(
                "eta = {eta} leaves a negative component weight"
            )));
        }
        for w in &mut weights {
            if *w < 0.0 {
                *w = 0.0;
            }
        }
        let mut means = Array2::zeros((rows.len(), d));
        for (mut dst, src) in means.rows_mut().into_iter().zip(&rows) {
            dst.assign(src);
        }
        Self::new(weights, means, variances)
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> ArrayView2<'_, f64> {
        self.means.view()
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn has_point_masses(&self) -> bool {
        self.variances.iter().zip(&self.weights).any(|(v, w)| *v == 0.0 && *w > 0.0)
    }

    fn components(&self) -> impl Iterator<Item = (f64, ArrayView1<'_, f64>, f64)> {
        self.weights
            .iter()
            .zip(self.means.rows())
            .zip(&self.variances)
            .map(|((w, m), v)| (*w, m, *v))
    }

    /// Draw `n` independent samples.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        let d = self.dim();
        let picker = WeightedIndex::new(&self.weights).expect("weights validated at construction");
        let mut out = Array2::zeros((n, d));
        for mut row in out.rows_mut() {
            let k = picker.sample(rng);
            let sd = self.variances[k].sqrt();
            for (x, m) in row.iter_mut().zip(self.means.row(k)) {
                let e: f64 = StandardNormal.sample(rng);
                *x = m + sd * e;
            }
        }
        out
    }

    /// Evaluation handle; fails if any weighted component is a point mass.
    pub fn evaluator(&self) -> Result<Marginal> {
        if self.has_point_masses() {
            return Err(Error::domain(
                "mixture has point masses; diffuse it to some s < t1 before evaluating",
            ));
        }
        Ok(Marginal::from_parts(
            self.components().map(|(w, m, v)| (w, m.to_owned(), v)),
            self.dim(),
        ))
    }
}

/// A mixture pushed forward through the diffusion: at time `s` it is the mixture
/// with means `alpha(s) * mu_k` and variances `alpha(s)^2 * var_k + sigma(s)^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusedMeasure {
    base: GaussianMixture,
    schedule: Schedule,
}

impl DiffusedMeasure {
    pub fn new(base: GaussianMixture, schedule: Schedule) -> Self {
        Self { base, schedule }
    }

    pub fn base(&self) -> &GaussianMixture {
        &self.base
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    /// Marginal at sampling time `s`.
    pub fn at(&self, s: f64) -> Result<Marginal> {
        let (alpha, sigma) = self.schedule.alpha_sigma(s)?;
        let sigma2 = sigma * sigma;
        let parts = self.base.components().map(|(w, m, v)| {
            let mean = m.mapv(|x| alpha * x);
            (w, mean, alpha * alpha * v + sigma2)
        });
        let marginal = Marginal::from_parts(parts, self.dim());
        if marginal.variances.iter().any(|v| *v <= 0.0) {
            return Err(Error::domain(format!(
                "point-mass component has zero variance at s = {s}; evaluate at s < t1"
            )));
        }
        Ok(marginal)
    }

    pub fn log_density(&self, s: f64, z: ArrayView1<f64>) -> Result<f64> {
        self.at(s)?.log_density(z)
    }

    pub fn score(&self, s: f64, z: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.at(s)?.score(z)
    }

    pub fn score_jacobian(&self, s: f64, z: ArrayView1<f64>) -> Result<Array2<f64>> {
        self.at(s)?.score_jacobian(z)
    }

    pub fn divergence_of_score(&self, s: f64, z: ArrayView1<f64>) -> Result<f64> {
        self.at(s)?.divergence_of_score(z)
    }
}

/// A mixture with strictly positive component variances, ready for pointwise evaluation.
#[derive(Debug, Clone)]
pub struct Marginal {
    log_weights: Vec<f64>,
    means: Array2<f64>,
    variances: Vec<f64>,
    log_norms: Vec<f64>,
}

/// Responsibilities and log-density at one point.
struct Local {
    log_density: f64,
    resp: Vec<f64>,
}

impl Marginal {
    fn from_parts<I>(parts: I, d: usize) -> Self
    where
        I: Iterator<Item = (f64, Array1<f64>, f64)>,
    {
        let mut log_weights = Vec::new();
        let mut rows = Vec::new();
        let mut variances = Vec::new();
        for (w, m, v) in parts.filter(|(w, _, _)| *w > 0.0) {
            log_weights.push(w.ln());
            rows.push(m);
            variances.push(v);
        }
        let mut means = Array2::zeros((rows.len(), d));
        for (mut dst, src) in means.rows_mut().into_iter().zip(&rows) {
            dst.assign(src);
        }
        let log_norms = variances
            .iter()
            .map(|v| -0.5 * d as f64 * (LN_2PI + v.ln()))
            .collect();
        Self {
            log_weights,
            means,
            variances,
            log_norms,
        }
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn means(&self) -> ArrayView2<'_, f64> {
        self.means.view()
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    fn check_point(&self, z: ArrayView1<f64>) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::domain(format!(
                "point has dimension {}, measure has {}",
                z.len(),
                self.dim()
            )));
        }
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::domain("point has non-finite coordinates"));
        }
        Ok(())
    }

    fn local(&self, z: ArrayView1<f64>) -> Result<Local> {
        self.check_point(z)?;
        let mut logc: Vec<f64> = Vec::with_capacity(self.log_weights.len());
        for (k, m) in self.means.rows().into_iter().enumerate() {
            let sq: f64 = m.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
            logc.push(self.log_weights[k] + self.log_norms[k] - 0.5 * sq / self.variances[k]);
        }
        let max = logc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for c in logc.iter_mut() {
            *c = (*c - max).exp();
            total += *c;
        }
        for c in logc.iter_mut() {
            *c /= total;
        }
        Ok(Local {
            log_density: max + total.ln(),
            resp: logc,
        })
    }

    pub fn log_density(&self, z: ArrayView1<f64>) -> Result<f64> {
        Ok(self.local(z)?.log_density)
    }

    fn score_from(&self, local: &Local, z: ArrayView1<f64>) -> Array1<f64> {
        let mut out = Array1::zeros(self.dim());
        for (k, m) in self.means.rows().into_iter().enumerate() {
            let c = local.resp[k] / self.variances[k];
            if c == 0.0 {
                continue;
            }
            for ((o, mi), zi) in out.iter_mut().zip(m).zip(z) {
                *o += c * (mi - zi);
            }
        }
        out
    }

    pub fn score(&self, z: ArrayView1<f64>) -> Result<Array1<f64>> {
        let local = self.local(z)?;
        Ok(self.score_from(&local, z))
    }

    pub fn log_density_and_score(&self, z: ArrayView1<f64>) -> Result<(f64, Array1<f64>)> {
        let local = self.local(z)?;
        let score = self.score_from(&local, z);
        Ok((local.log_density, score))
    }

    /// Per-component score terms `u_k = (m_k - z) / v_k`.
    fn component_scores(&self, z: ArrayView1<f64>) -> Array2<f64> {
        let mut u = &self.means - &z.insert_axis(Axis(0));
        for (mut row, v) in u.rows_mut().into_iter().zip(&self.variances) {
            row.mapv_inplace(|x| x / v);
        }
        u
    }

    /// Hessian of the log-density: `-Σ r_k I / v_k + Cov_r[u_k]`.
    pub fn score_jacobian(&self, z: ArrayView1<f64>) -> Result<Array2<f64>> {
        let local = self.local(z)?;
        let d = self.dim();
        let u = self.component_scores(z);
        let mean_u = self.score_from(&local, z);
        let mut jac = Array2::zeros((d, d));
        let mut diag = 0.0;
        for (k, uk) in u.rows().into_iter().enumerate() {
            let r = local.resp[k];
            if r == 0.0 {
                continue;
            }
            diag += r / self.variances[k];
            let centered = &uk - &mean_u;
            for i in 0..d {
                let ri = r * centered[i];
                for j in 0..d {
                    jac[[i, j]] += ri * centered[j];
                }
            }
        }
        for i in 0..d {
            jac[[i, i]] -= diag;
        }
        Ok(jac)
    }

    /// Hessian-vector product without forming the Hessian.
    pub fn score_jvp(&self, z: ArrayView1<f64>, w: ArrayView1<f64>) -> Result<Array1<f64>> {
        let local = self.local(z)?;
        if w.len() != self.dim() {
            return Err(Error::domain("direction has wrong dimension"));
        }
        let u = self.component_scores(z);
        let mean_u = self.score_from(&local, z);
        let mean_uw = mean_u.dot(&w);
        let mut out = Array1::zeros(self.dim());
        let mut diag = 0.0;
        for (k, uk) in u.rows().into_iter().enumerate() {
            let r = local.resp[k];
            if r == 0.0 {
                continue;
            }
            diag += r / self.variances[k];
            let coeff = r * (uk.dot(&w) - mean_uw);
            out.scaled_add(coeff, &uk);
        }
        out.scaled_add(-diag, &w);
        Ok(out)
    }

    /// Quadratic forms `εᵀ H ε` for each row of `probes`.
    pub fn score_quadratic_forms(&self, z: ArrayView1<f64>, probes: ArrayView2<f64>) -> Result<Array1<f64>> {
        let local = self.local(z)?;
        let u = self.component_scores(z);
        let mean_u = self.score_from(&local, z);
        let diag: f64 = local
            .resp
            .iter()
            .zip(&self.variances)
            .map(|(r, v)| r / v)
            .sum();
        let proj = u.dot(&probes.t());
        let mean_proj = probes.dot(&mean_u);
        let mut out = Array1::zeros(probes.nrows());
        for (p, eps) in probes.rows().into_iter().enumerate() {
            let mut acc = -diag * eps.dot(&eps);
            for (k, r) in local.resp.iter().enumerate() {
                let c = proj[[k, p]] - mean_proj[p];
                acc += r * c * c;
            }
            out[p] = acc;
        }
        Ok(out)
    }

    /// Trace of the score Jacobian: `-d Σ r_k / v_k + Σ r_k ‖u_k - ū‖²`.
    pub fn divergence_of_score(&self, z: ArrayView1<f64>) -> Result<f64> {
        let local = self.local(z)?;
        let d = self.dim() as f64;
        let u = self.component_scores(z);
        let mean_u = self.score_from(&local, z);
        let mut acc = 0.0;
        for (k, uk) in u.rows().into_iter().enumerate() {
            let r = local.resp[k];
            if r == 0.0 {
                continue;
            }
            let spread: f64 = uk.iter().zip(&mean_u).map(|(a, b)| (a - b) * (a - b)).sum();
            acc += r * (spread - d / self.variances[k]);
        }
        Ok(acc)
    }
}
