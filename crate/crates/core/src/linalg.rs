//! Dense vector helpers on plain slices.

use rand::Rng;
use rand_distr::StandardNormal;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale(a: &mut [f64], s: f64) {
    for v in a {
        *v *= s;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Modified Gram-Schmidt with one re-orthogonalization pass, in place on
/// `rows` (each of equal length). Returns false if a row loses more than
/// `rel_tol` of its original norm, i.e. the input was numerically rank
/// deficient.
pub fn orthonormalize_rows(rows: &mut [Vec<f64>], rel_tol: f64) -> bool {
    for i in 0..rows.len() {
        let (done, rest) = rows.split_at_mut(i);
        let row = &mut rest[0];
        let original = norm(row);
        if original == 0.0 || !original.is_finite() {
            return false;
        }
        for _pass in 0..2 {
            for q in done.iter() {
                let c = dot(q, row);
                axpy(-c, q, row);
            }
        }
        let n = norm(row);
        if n <= rel_tol * original {
            return false;
        }
        scale(row, 1.0 / n);
    }
    true
}

/// Largest absolute entry of `Q Qᵀ − I` for row-stacked `q`.
pub fn orthonormality_error(q: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..q.len() {
        for j in i..q.len() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot(&q[i], &q[j]) - target).abs());
        }
    }
    worst
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Log-softmax of `logits`.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|z| z - lse).collect()
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
