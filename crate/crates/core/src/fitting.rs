//! Sigmoid-in-log-d fits of probe outcomes and critical dimensions.
//!
//! The curve is `p(d) = a + b / (1 + exp(−ln(d/c)/s))`. Fitting runs in the
//! coordinates `(a, b, ln c, s)`, and the reported covariance uses the same
//! coordinates.

use nalgebra::{Matrix4, SymmetricEigen, Vector4};
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::PROB_FLOOR;
use crate::linalg::logistic;
use crate::rng::{derive_seed, rng_from_seed};

const MAX_LM_ITERS: usize = 500;
const BAND_SAMPLES: usize = 200;
const BAND_QUANTILE: f64 = 0.05;
const START_SLOPES: [f64; 6] = [0.1, -0.1, 0.3, -0.3, 1.0, -1.0];
const START_MIDPOINTS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FitParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub s: f64,
}

impl FitParams {
    pub fn eval(&self, d: f64) -> f64 {
        self.a + self.b * logistic((d / self.c).ln() / self.s)
    }

    fn to_vec(self) -> Vector4<f64> {
        Vector4::new(self.a, self.b, self.c.ln(), self.s)
    }

    fn from_vec(v: &Vector4<f64>) -> Self {
        Self { a: v[0], b: v[1], c: v[2].exp(), s: v[3] }
    }

    /// The `d` at which the curve equals `threshold`, if it ever does.
    ///
    /// `a + b·σ(z) = p*` gives `σ(z) = (p*−a)/b`, hence
    /// `d* = c · (b/(p*−a) − 1)^(−s)`.
    pub fn crossing(&self, threshold: f64) -> Option<f64> {
        if self.b == 0.0 || self.s == 0.0 {
            return None;
        }
        let q = (threshold - self.a) / self.b;
        if !(q > 0.0 && q < 1.0) {
            return None;
        }
        let d = self.c * (1.0 / q - 1.0).powf(-self.s);
        (d.is_finite() && d > 0.0).then_some(d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    Probability,
    /// `L(d) = −ln(p(d))`, with `p` floored at the probability floor.
    Loss,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitResult {
    pub kind: CurveKind,
    pub params: FitParams,
    /// Row-major 4×4 covariance of `(a, b, ln c, s)`.
    pub covariance: [[f64; 4]; 4],
    pub residual_rms: f64,
    pub n_points: usize,
    /// Constant data: `a` is the constant, `b = 0`, and no curve shape exists.
    pub degenerate: bool,
    /// Smallest and largest `d` in the fitted data.
    pub d_range: (f64, f64),
}

impl FitResult {
    /// Fitted inner probability curve at `d`.
    pub fn eval(&self, d: f64) -> f64 {
        self.params.eval(d)
    }

    /// Fitted value in the data's own units (loss for loss fits).
    pub fn predict(&self, d: f64) -> f64 {
        match self.kind {
            CurveKind::Probability => self.params.eval(d),
            CurveKind::Loss => -self.params.eval(d).max(PROB_FLOOR).ln(),
        }
    }

    fn covariance_matrix(&self) -> Matrix4<f64> {
        Matrix4::from_fn(|i, j| self.covariance[i][j])
    }
}

fn validate_points(points: &[(f64, f64)]) -> Result<()> {
    if points.len() < 6 {
        return Err(Error::InsufficientData(format!("{} points, need at least 6", points.len())));
    }
    let mut ds: Vec<f64> = points.iter().map(|p| p.0).collect();
    ds.sort_by(f64::total_cmp);
    ds.dedup();
    if ds.len() < 4 {
        return Err(Error::InsufficientData(format!("{} distinct d values, need at least 4", ds.len())));
    }
    if let Some(&(d, y)) = points.iter().find(|(d, y)| !(d.is_finite() && *d > 0.0) || !y.is_finite()) {
        return Err(Error::InvalidParameter(format!("bad fit point (d={d}, y={y})")));
    }
    Ok(())
}

/// Least-squares fit of the probability curve to raw `(d, p)` points.
pub fn fit_prob_curve(points: &[(f64, f64)]) -> Result<FitResult> {
    validate_points(points)?;
    if let Some(&(_, p)) = points.iter().find(|(_, p)| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidParameter(format!("probability {p} outside [0, 1]")));
    }
    fit(points, CurveKind::Probability)
}

/// Least-squares fit of `L = −ln(a + b·σ(ln(d/c)/s))` to raw `(d, L)` points.
pub fn fit_loss_curve(points: &[(f64, f64)]) -> Result<FitResult> {
    validate_points(points)?;
    if let Some(&(_, l)) = points.iter().find(|(_, l)| *l < 0.0) {
        return Err(Error::InvalidParameter(format!("loss {l} is negative")));
    }
    fit(points, CurveKind::Loss)
}

/// Residuals `y − ŷ` and the Jacobian of `ŷ` at `v`.
fn model(points: &[(f64, f64)], kind: CurveKind, v: &Vector4<f64>) -> (Vec<f64>, Vec<[f64; 4]>) {
    let (a, b, u, s) = (v[0], v[1], v[2], v[3]);
    let mut res = Vec::with_capacity(points.len());
    let mut jac = Vec::with_capacity(points.len());
    for &(d, y) in points {
        let z = (d.ln() - u) / s;
        let sig = logistic(z);
        let slope = b * sig * (1.0 - sig);
        let dq = [1.0, sig, -slope / s, -slope * z / s];
        let q = a + b * sig;
        match kind {
            CurveKind::Probability => {
                res.push(y - q);
                jac.push(dq);
            }
            CurveKind::Loss => {
                if q > PROB_FLOOR {
                    res.push(y + q.ln());
                    jac.push(dq.map(|g| -g / q));
                } else {
                    res.push(y + PROB_FLOOR.ln());
                    jac.push([0.0; 4]);
                }
            }
        }
    }
    (res, jac)
}

fn normal_equations(res: &[f64], jac: &[[f64; 4]]) -> (Matrix4<f64>, Vector4<f64>) {
    let mut jtj = Matrix4::zeros();
    let mut jtr = Vector4::zeros();
    for (r, row) in res.iter().zip(jac) {
        let j = Vector4::from(*row);
        jtj += j * j.transpose();
        jtr += j * *r;
    }
    (jtj, jtr)
}

fn sse(res: &[f64]) -> f64 {
    res.iter().map(|r| r * r).sum()
}

struct LmOutcome {
    v: Vector4<f64>,
    sse: f64,
    converged: bool,
}

/// Levenberg–Marquardt with Marquardt's diagonal scaling.
fn levenberg_marquardt(points: &[(f64, f64)], kind: CurveKind, start: Vector4<f64>) -> LmOutcome {
    let mut v = start;
    let (mut res, mut jac) = model(points, kind, &v);
    let mut cost = sse(&res);
    let mut lambda = 1e-3;
    let scale = points.iter().map(|p| p.1 * p.1).sum::<f64>().max(1e-300);
    for _ in 0..MAX_LM_ITERS {
        let (jtj, jtr) = normal_equations(&res, &jac);
        if jtr.amax() <= 1e-15 * scale.sqrt() {
            return LmOutcome { v, sse: cost, converged: true };
        }
        let mut improved = false;
        while lambda < 1e16 {
            let mut a = jtj;
            for i in 0..4 {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let trial = v + step;
            if trial[3].abs() < 1e-6 || !trial.iter().all(|x| x.is_finite()) || trial[2].abs() > 50.0 {
                lambda *= 10.0;
                continue;
            }
            let (r2, j2) = model(points, kind, &trial);
            let c2 = sse(&r2);
            if c2.is_finite() && c2 <= cost {
                let rel = (cost - c2) / cost.max(1e-300);
                let small_step = step.norm() <= 1e-12 * (v.norm() + 1e-12);
                v = trial;
                res = r2;
                jac = j2;
                cost = c2;
                lambda = (lambda / 10.0).max(1e-12);
                improved = true;
                if rel < 1e-14 || small_step || cost <= 1e-30 * scale {
                    return LmOutcome { v, sse: cost, converged: true };
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // No downhill step at any damping: a stationary point.
            return LmOutcome { v, sse: cost, converged: true };
        }
    }
    LmOutcome { v, sse: cost, converged: false }
}

fn starts(points: &[(f64, f64)], kind: CurveKind) -> Vec<Vector4<f64>> {
    let to_prob = |y: f64| match kind {
        CurveKind::Probability => y,
        CurveKind::Loss => (-y).exp(),
    };
    let (d_min, d_max) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    let mean_near = |target: f64| {
        let closest = points
            .iter()
            .map(|p| (p.0.ln() - target.ln()).abs())
            .fold(f64::INFINITY, f64::min);
        let vals: Vec<f64> = points
            .iter()
            .filter(|p| (p.0.ln() - target.ln()).abs() == closest)
            .map(|p| to_prob(p.1))
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let (y_lo, y_hi) = (mean_near(d_min), mean_near(d_max));
    let mut out = Vec::with_capacity(START_MIDPOINTS * START_SLOPES.len());
    for i in 0..START_MIDPOINTS {
        let frac = (i as f64 + 0.5) / START_MIDPOINTS as f64;
        let u = d_min.ln() + frac * (d_max.ln() - d_min.ln());
        for &s in &START_SLOPES {
            // Both orientations describe the same family; pick a and b so the
            // start curve runs from the low-d level to the high-d level.
            let (a, b) = if s > 0.0 { (y_lo, y_hi - y_lo) } else { (y_hi, y_lo - y_hi) };
            let b = if b.abs() < 1e-3 { 1e-3f64.copysign(b) } else { b };
            out.push(Vector4::new(a, b, u, s));
        }
    }
    out
}

fn fit(points: &[(f64, f64)], kind: CurveKind) -> Result<FitResult> {
    let n = points.len();
    let d_range = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    let (y_min, y_max) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    if y_max - y_min <= 1e-12 * y_max.abs().max(1.0) {
        let level = match kind {
            CurveKind::Probability => y_min,
            CurveKind::Loss => (-y_min).exp(),
        };
        return Ok(FitResult {
            kind,
            params: FitParams { a: level, b: 0.0, c: (d_range.0 * d_range.1).sqrt(), s: 1.0 },
            covariance: [[0.0; 4]; 4],
            residual_rms: 0.0,
            n_points: n,
            degenerate: true,
            d_range,
        });
    }

    let outcomes: Vec<LmOutcome> =
        starts(points, kind).into_iter().map(|s| levenberg_marquardt(points, kind, s)).collect();
    let best = outcomes
        .iter()
        .filter(|o| o.sse.is_finite())
        .min_by(|x, y| x.sse.total_cmp(&y.sse))
        .ok_or(Error::FitFailed { best_rms: f64::NAN })?;
    let rms = (best.sse / n as f64).sqrt();
    if !outcomes.iter().any(|o| o.converged) {
        return Err(Error::FitFailed { best_rms: rms });
    }
    let v = best.v;
    let (res, jac) = model(points, kind, &v);
    let (jtj, _) = normal_equations(&res, &jac);
    let sigma2 = if n > 4 { sse(&res) / (n - 4) as f64 } else { 0.0 };
    let cov = pseudo_inverse(&jtj) * sigma2;
    let cov = (cov + cov.transpose()) * 0.5;
    let mut covariance = [[0.0; 4]; 4];
    for (i, row) in covariance.iter_mut().enumerate() {
        for (j, c) in row.iter_mut().enumerate() {
            *c = cov[(i, j)];
        }
    }
    Ok(FitResult {
        kind,
        params: FitParams::from_vec(&v),
        covariance,
        residual_rms: rms,
        n_points: n,
        degenerate: false,
        d_range,
    })
}

fn pseudo_inverse(m: &Matrix4<f64>) -> Matrix4<f64> {
    let eig = SymmetricEigen::new(*m);
    let cutoff = eig.eigenvalues.amax() * 1e-12;
    let mut out = Matrix4::zeros();
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > cutoff {
            let col = eig.eigenvectors.column(i);
            out += col * col.transpose() / lam;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CriticalDim {
    pub threshold: f64,
    pub d_star: f64,
    /// Central 90% of crossings within the probed `d` range over parameter
    /// draws, widened to contain `d_star`.
    pub band: (f64, f64),
    /// `D − d_star`.
    pub manifold_dim: f64,
    /// Fraction of parameter draws whose curve crosses the threshold inside
    /// the probed range; small values flag an ill-conditioned fit.
    pub crossing_fraction: f64,
}

/// Critical dimension where the fitted inner curve crosses `threshold`.
///
/// Crossings beyond the ambient dimension count as no crossing: no cut of the
/// input space reaches the threshold there.
pub fn extract_dstar(fit: &FitResult, threshold: f64, ambient_dim: usize) -> Result<CriticalDim> {
    let p = fit.params;
    let no_crossing = || {
        let (lo, hi) = if p.b >= 0.0 { (p.a, p.a + p.b) } else { (p.a + p.b, p.a) };
        Error::NoCrossing { threshold, lo, hi }
    };
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidParameter(format!("threshold {threshold} not in (0, 1)")));
    }
    let d_star = p.crossing(threshold).ok_or_else(no_crossing)?;
    let big_d = ambient_dim as f64;
    if d_star > big_d {
        return Err(no_crossing());
    }

    let cov = fit.covariance_matrix();
    let eig = SymmetricEigen::new(cov);
    let root: Vec<(Vector4<f64>, f64)> = (0..4)
        .map(|i| (eig.eigenvectors.column(i).into_owned(), eig.eigenvalues[i].max(0.0).sqrt()))
        .collect();
    let mut rng = rng_from_seed(derive_seed(threshold.to_bits(), &[p.c.to_bits(), p.s.to_bits()]));
    let mean = p.to_vec();
    // Draws crossing outside the probed range are extrapolations the data
    // say nothing about.
    let (lo_d, hi_d) = (fit.d_range.0, fit.d_range.1.min(big_d));
    let mut crossings = Vec::with_capacity(BAND_SAMPLES);
    for _ in 0..BAND_SAMPLES {
        let mut v = mean;
        for (vec, sd) in &root {
            let z: f64 = StandardNormal.sample(&mut rng);
            v += vec * (sd * z);
        }
        if let Some(d) = FitParams::from_vec(&v).crossing(threshold).filter(|&d| d >= lo_d && d <= hi_d) {
            crossings.push(d);
        }
    }
    let crossing_fraction = crossings.len() as f64 / BAND_SAMPLES as f64;
    let band = if crossings.is_empty() {
        (d_star, d_star)
    } else {
        crossings.sort_by(f64::total_cmp);
        let lo = quantile(&crossings, BAND_QUANTILE);
        let hi = quantile(&crossings, 1.0 - BAND_QUANTILE);
        (lo.min(d_star), hi.max(d_star))
    };
    Ok(CriticalDim { threshold, d_star, band, manifold_dim: big_d - d_star, crossing_fraction })
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    sorted[i] + (pos - i as f64) * (sorted[j] - sorted[i])
}

pub const REPORT_THRESHOLDS: [f64; 4] = [0.25, 0.5, 0.75, 0.9];

/// `d*` at each of [`REPORT_THRESHOLDS`]; thresholds the curve never reaches
/// carry the error text.
pub fn dstar_table(fit: &FitResult, ambient_dim: usize) -> Vec<(f64, std::result::Result<CriticalDim, String>)> {
    REPORT_THRESHOLDS
        .iter()
        .map(|&t| (t, extract_dstar(fit, t, ambient_dim).map_err(|e| e.to_string())))
        .collect()
}
