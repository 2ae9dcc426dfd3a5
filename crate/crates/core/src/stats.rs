//! Summary statistics used by the experiments.

use ndarray::ArrayView1;

/// Median of the finite values, or NaN if there are none.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Pearson correlation; NaN when either vector is constant up to rounding
/// (spread below `1e-10` of its norm).
pub fn pearson(x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
    assert_eq!(x.len(), y.len(), "pearson: length mismatch");
    let n = x.len() as f64;
    let mx = x.sum() / n;
    let my = y.sum() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 1e-20 * x.dot(&x) || syy <= 1e-20 * y.dot(&y) {
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

/// Average ranks (ties share the mean rank).
fn ranks(x: ArrayView1<f64>) -> ndarray::Array1<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = ndarray::Array1::zeros(x.len());
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let rank = 0.5 * (i + j) as f64;
        for k in i..=j {
            out[idx[k]] = rank;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
    pearson(ranks(x).view(), ranks(y).view())
}

/// Cosine similarity; NaN if either vector is zero.
pub fn cosine(x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
    let nx = x.dot(&x).sqrt();
    let ny = y.dot(&y).sqrt();
    if nx == 0.0 || ny == 0.0 {
        return f64::NAN;
    }
    x.dot(&y) / (nx * ny)
}

/// `‖x − reference‖ / ‖reference‖`.
pub fn relative_l2(x: ArrayView1<f64>, reference: ArrayView1<f64>) -> f64 {
    let diff = &x - &reference;
    diff.dot(&diff).sqrt() / reference.dot(&reference).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[f64::NAN, 1.0]), 1.0);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn correlations() {
        let x = array![1.0, 2.0, 3.0, 4.0];
        let y = array![2.0, 4.0, 6.0, 8.5];
        assert!((pearson(x.view(), x.view()) - 1.0).abs() < 1e-15);
        assert!(pearson(x.view(), y.view()) > 0.99);
        assert!((pearson(x.view(), (-&x).view()) + 1.0).abs() < 1e-15);
        assert_eq!(spearman(x.view(), y.mapv(f64::exp).view()), 1.0);
        assert!(pearson(x.view(), array![1.0, 1.0, 1.0, 1.0].view()).is_nan());
        let rounding = array![0.1, 0.1 + 1e-17, 0.1 - 1e-17, 0.1];
        assert!(pearson(x.view(), rounding.view()).is_nan());
        assert_eq!(ranks(array![1.0, 5.0, 1.0].view()), array![0.5, 2.0, 0.5]);
        assert!((cosine(array![1.0, 0.0].view(), array![1.0, 1.0].view()) - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((relative_l2(array![1.0, 1.0].view(), array![1.0, 0.0].view()) - 1.0).abs() < 1e-15);
    }
}
