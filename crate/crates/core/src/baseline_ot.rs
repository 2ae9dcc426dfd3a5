//! Entropic optimal transport between two point clouds and the transport rays it
//! induces, used as a baseline predictor of how samples move.
//!
//! Sinkhorn runs on dual potentials in the log domain. Both potentials are
//! updated simultaneously from the previous iterate, which amounts to two
//! interleaved alternating chains; the returned plan averages the two chains'
//! latest plans. This makes the result exactly transpose-symmetric in the two
//! point clouds.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};

pub const DEFAULT_REG: f64 = 0.05;
pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 10_000;
/// Convergence is tested every this many iterations.
const CHECK_EVERY: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub plan: Array2<f64>,
    pub marginal_a: Array1<f64>,
    pub marginal_b: Array1<f64>,
    pub reg: f64,
    pub iterations_used: usize,
    pub converged: bool,
    /// Largest absolute deviation of the returned plan's row or column sums.
    pub max_violation: f64,
}

/// `‖a_i − b_j‖²` for every pair.
pub fn squared_distances(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let rows: Vec<Array1<f64>> = (0..a.nrows())
        .into_par_iter()
        .map(|i| {
            b.rows()
                .into_iter()
                .map(|bj| a.row(i).iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum())
                .collect()
        })
        .collect();
    let mut out = Array2::zeros((a.nrows(), b.nrows()));
    for (mut dst, src) in out.rows_mut().into_iter().zip(&rows) {
        dst.assign(src);
    }
    out
}

fn log_sum_exp<I: Iterator<Item = f64> + Clone>(xs: I) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `reg·log w_i − reg·LSE_j((pot_j − C_ij)/reg)` along the rows of `cost`.
fn update(cost: ArrayView2<f64>, pot: &Array1<f64>, log_w: f64, reg: f64) -> Array1<f64> {
    let v: Vec<f64> = (0..cost.nrows())
        .into_par_iter()
        .map(|i| {
            let row = cost.row(i);
            let inv = 1.0 / reg;
            let lse = log_sum_exp(row.iter().zip(pot.iter()).map(|(c, p)| (p - c) * inv));
            reg * log_w - reg * lse
        })
        .collect();
    Array1::from(v)
}

fn plan_from(cost: ArrayView2<f64>, f: &Array1<f64>, g: &Array1<f64>, reg: f64) -> Array2<f64> {
    Array2::from_shape_fn(cost.dim(), |(i, j)| ((f[i] + g[j] - cost[[i, j]]) / reg).exp())
}

fn violation(plan: &Array2<f64>, a: f64, b: f64) -> f64 {
    let rows = plan.sum_axis(Axis(1)).iter().fold(0.0f64, |m, r| m.max((r - a).abs()));
    let cols = plan.sum_axis(Axis(0)).iter().fold(0.0f64, |m, c| m.max((c - b).abs()));
    rows.max(cols)
}

/// Entropic OT plan between uniform measures on the rows of `a` and of `b`,
/// squared Euclidean cost. Non-convergence is reported in the result, not as an error.
pub fn sinkhorn_log(a: ArrayView2<f64>, b: ArrayView2<f64>, reg: f64, max_iter: usize, tol: f64) -> Result<Coupling> {
    if !(reg > 0.0 && reg.is_finite()) {
        return Err(Error::domain(format!("regularization must be positive, got {reg}")));
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::domain("point clouds must be non-empty"));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::domain("point clouds differ in dimension"));
    }
    if a.iter().chain(b.iter()).any(|x| !x.is_finite()) {
        return Err(Error::domain("point clouds contain non-finite coordinates"));
    }
    let (n, m) = (a.nrows(), b.nrows());
    let (wa, wb) = (1.0 / n as f64, 1.0 / m as f64);
    let cost = squared_distances(a, b);
    let cost_t = cost.t().as_standard_layout().into_owned();
    let mut f = Array1::zeros(n);
    let mut g = Array1::zeros(m);
    let mut iterations = 0;
    let mut converged = false;
    let mut plan = plan_from(cost.view(), &f, &g, reg);
    while iterations < max_iter {
        let f_next = update(cost.view(), &g, wa.ln(), reg);
        let g_next = update(cost_t.view(), &f, wb.ln(), reg);
        iterations += 1;
        if iterations % CHECK_EVERY == 0 || iterations == max_iter {
            let p_rows = plan_from(cost.view(), &f_next, &g, reg);
            let p_cols = plan_from(cost.view(), &f, &g_next, reg);
            converged = violation(&p_rows, wa, wb) < tol && violation(&p_cols, wa, wb) < tol;
            plan = (&p_rows + &p_cols) * 0.5;
        }
        f = f_next;
        g = g_next;
        if converged {
            break;
        }
    }
    let max_violation = violation(&plan, wa, wb);
    Ok(Coupling {
        plan,
        marginal_a: Array1::from_elem(n, wa),
        marginal_b: Array1::from_elem(m, wb),
        reg,
        iterations_used: iterations,
        converged,
        max_violation,
    })
}

/// Barycentric image of each source under the row-normalized plan, minus the source.
pub fn transport_rays(c: &Coupling, sources: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<Array2<f64>> {
    if c.plan.dim() != (sources.nrows(), targets.nrows()) || sources.ncols() != targets.ncols() {
        return Err(Error::domain("coupling, sources and targets have inconsistent shapes"));
    }
    let mut rays = Array2::zeros(sources.dim());
    for (i, mut ray) in rays.rows_mut().into_iter().enumerate() {
        let row = c.plan.row(i);
        let mass = row.sum();
        if !(mass > 0.0) {
            return Err(Error::domain(format!("coupling row {i} carries no mass")));
        }
        let image = row.dot(&targets) / mass;
        ray.assign(&(&image - &sources.row(i)));
    }
    Ok(rays)
}

/// Standardize every feature by the pooled mean and standard deviation of both
/// clouds. Constant features are only centered.
pub fn standardize(a: ArrayView2<f64>, b: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
    let n = (a.nrows() + b.nrows()) as f64;
    let mean = (a.sum_axis(Axis(0)) + b.sum_axis(Axis(0))) / n;
    let sq = |x: ArrayView2<f64>| (&x - &mean).mapv(|v| v * v).sum_axis(Axis(0));
    let std = ((sq(a) + sq(b)) / n).mapv(|v| if v > 0.0 { v.sqrt() } else { 1.0 });
    ((&a - &mean) / &std, (&b - &mean) / &std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Plain Sinkhorn–Knopp scaling on `K = exp(−C/reg)`, independent of the log-domain code.
    fn dense_reference(a: &Array2<f64>, b: &Array2<f64>, reg: f64) -> Array2<f64> {
        let (n, m) = (a.nrows(), b.nrows());
        let mut k = Array2::zeros((n, m));
        for i in 0..n {
            for j in 0..m {
                let mut c = 0.0;
                for t in 0..a.ncols() {
                    c += (a[[i, t]] - b[[j, t]]).powi(2);
                }
                k[[i, j]] = (-c / reg).exp();
            }
        }
        let mut u = vec![1.0; n];
        let mut v = vec![1.0; m];
        for _ in 0..100_000 {
            for i in 0..n {
                u[i] = (1.0 / n as f64) / (0..m).map(|j| k[[i, j]] * v[j]).sum::<f64>();
            }
            for j in 0..m {
                v[j] = (1.0 / m as f64) / (0..n).map(|i| k[[i, j]] * u[i]).sum::<f64>();
            }
        }
        Array2::from_shape_fn((n, m), |(i, j)| u[i] * k[[i, j]] * v[j])
    }

    fn three_by_three() -> (Array2<f64>, Array2<f64>) {
        (
            array![[0.0, 0.1], [0.2, 0.0], [0.1, 0.25]],
            array![[0.05, 0.05], [0.3, 0.1], [0.15, 0.3]],
        )
    }

    #[test]
    fn single_points_couple_fully() {
        let c = sinkhorn_log(array![[1.0, 2.0]].view(), array![[-3.0, 0.5]].view(), DEFAULT_REG, 100, 1e-12).unwrap();
        assert_eq!(c.plan, array![[1.0]]);
        assert!(c.converged);
    }

    #[test]
    fn matches_dense_scaling_on_three_points() {
        let (a, b) = three_by_three();
        let c = sinkhorn_log(a.view(), b.view(), DEFAULT_REG, DEFAULT_MAX_ITER, 1e-14).unwrap();
        let reference = dense_reference(&a, &b, DEFAULT_REG);
        for (x, y) in c.plan.iter().zip(reference.iter()) {
            assert!((x - y).abs() < 1e-8, "{x} vs {y}");
        }
        assert!(c.max_violation < 1e-6);
        let rays = transport_rays(&c, a.view(), b.view()).unwrap();
        for i in 0..3 {
            let row = reference.row(i);
            let bary = row.dot(&b) / row.sum();
            for t in 0..2 {
                assert!((rays[[i, t]] - (bary[t] - a[[i, t]])).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn small_regularization_recovers_the_identity_matching() {
        let pts = array![[0.0, 0.0], [3.0, 0.0], [0.0, 3.0], [3.0, 3.0]];
        let c = sinkhorn_log(pts.view(), pts.view(), 0.05, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        for i in 0..4 {
            assert!(c.plan[[i, i]] / c.plan.row(i).sum() > 0.9);
        }
        let rays = transport_rays(&c, pts.view(), pts.view()).unwrap();
        assert!(rays.iter().all(|x| x.abs() < 1e-6));
    }

    #[test]
    fn swapping_the_clouds_transposes_the_plan_exactly() {
        let a = array![[0.0, 0.3], [1.0, -0.2], [0.4, 0.9], [-0.5, 0.1]];
        let b = array![[0.2, 0.2], [0.8, 0.0], [-0.3, 0.7]];
        let ab = sinkhorn_log(a.view(), b.view(), 0.05, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        let ba = sinkhorn_log(b.view(), a.view(), 0.05, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        assert_eq!(ab.plan.t(), ba.plan.view());
        assert_eq!(ab.iterations_used, ba.iterations_used);
        assert!(ab.converged && ab.max_violation < 1e-6);
    }

    #[test]
    fn translation_leaves_the_plan_unchanged() {
        let a = array![[0.0, 0.3], [1.0, -0.2], [0.4, 0.9]];
        let b = array![[0.2, 0.2], [0.8, 0.0], [-0.3, 0.7]];
        let shift = array![5.0, -2.0];
        let c = sinkhorn_log(a.view(), b.view(), 0.05, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        let (a2, b2) = (&a + &shift, &b + &shift);
        let c2 = sinkhorn_log(a2.view(), b2.view(), 0.05, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        for (x, y) in c.plan.iter().zip(c2.plan.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
        let r = transport_rays(&c, a.view(), b.view()).unwrap();
        let r2 = transport_rays(&c2, a2.view(), b2.view()).unwrap();
        for (x, y) in r.iter().zip(r2.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn rays_to_a_single_target() {
        let a = array![[0.0, 0.0], [1.0, 2.0]];
        let t = array![[3.0, -1.0]];
        let c = sinkhorn_log(a.view(), t.view(), 0.05, 100, 1e-12).unwrap();
        let rays = transport_rays(&c, a.view(), t.view()).unwrap();
        for i in 0..2 {
            for k in 0..2 {
                assert!((rays[[i, k]] - (t[[0, k]] - a[[i, k]])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_rows_and_bad_inputs_are_errors() {
        let c = Coupling {
            plan: array![[0.0], [1.0]],
            marginal_a: array![0.5, 0.5],
            marginal_b: array![1.0],
            reg: 0.05,
            iterations_used: 0,
            converged: false,
            max_violation: 0.5,
        };
        assert!(transport_rays(&c, array![[0.0], [1.0]].view(), array![[2.0]].view()).is_err());
        assert!(sinkhorn_log(array![[0.0]].view(), array![[1.0]].view(), 0.0, 10, 1e-9).is_err());
    }

    #[test]
    fn non_convergence_is_flagged() {
        let a = array![[0.0], [1.0], [2.0]];
        let b = array![[0.5], [1.5], [4.0]];
        let c = sinkhorn_log(a.view(), b.view(), 0.05, 2, 1e-15).unwrap();
        assert!(!c.converged);
        assert_eq!(c.iterations_used, 2);
    }

    #[test]
    fn standardization_uses_pooled_statistics() {
        let a = array![[0.0, 5.0], [2.0, 5.0]];
        let b = array![[4.0, 5.0], [6.0, 5.0]];
        let (sa, sb) = standardize(a.view(), b.view());
        let all = ndarray::concatenate![Axis(0), sa, sb];
        assert!(all.column(0).sum().abs() < 1e-12);
        assert!((all.column(0).mapv(|x| x * x).sum() / 4.0 - 1.0).abs() < 1e-12);
        assert!(all.column(1).iter().all(|x| *x == 0.0));
    }
}
