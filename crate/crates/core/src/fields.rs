//! Confidence fields: maps from inputs to class probabilities that can also
//! report the input gradient of a cross-entropy loss.
//!
//! Besides the trait, this module holds analytic fields whose high-confidence
//! regions are known exactly. They are the ground truth the tomography
//! pipeline is validated against.

use crate::error::{Error, Result};
use crate::geometry::{AffineCut, CapSupport};
use crate::linalg::{dot, log_softmax, logistic, norm, softplus, sub};

/// Floor applied to raw probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Anything that maps `X ∈ R^D` to a point on the probability simplex and
/// can differentiate `L = −p_target · log p(X)` with respect to `X`.
///
/// Implementations compute log-probabilities directly, so the loss and its
/// gradient stay finite and informative even where a probability would
/// underflow.
pub trait ConfidenceField: Sync {
    fn class_count(&self) -> usize;

    fn ambient_dim(&self) -> usize;

    fn log_probabilities(&self, x: &[f64]) -> Result<Vec<f64>>;

    fn loss_and_input_gradient(&self, x: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Short human-readable description used in provenance records.
    fn describe(&self) -> String;

    fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.log_probabilities(x)?.into_iter().map(f64::exp).collect())
    }

    fn loss(&self, x: &[f64], target: &[f64]) -> Result<f64> {
        check_target(target, self.class_count())?;
        let logp = self.log_probabilities(x)?;
        Ok(cross_entropy_from_log(&logp, target))
    }
}

/// `−Σ t_i log max(p_i, PROB_FLOOR)`.
pub fn cross_entropy(probs: &[f64], target: &[f64]) -> f64 {
    probs
        .iter()
        .zip(target)
        .filter(|(_, t)| **t > 0.0)
        .map(|(p, t)| -t * p.max(PROB_FLOOR).ln())
        .sum()
}

pub(crate) fn cross_entropy_from_log(logp: &[f64], target: &[f64]) -> f64 {
    logp.iter()
        .zip(target)
        .filter(|(_, t)| **t > 0.0)
        .map(|(l, t)| -t * l)
        .sum()
}

pub(crate) fn check_input(x: &[f64], dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: x.len() });
    }
    match x.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

pub(crate) fn check_target(target: &[f64], class_count: usize) -> Result<()> {
    if target.len() != class_count {
        return Err(Error::DimensionMismatch { expected: class_count, got: target.len() });
    }
    if target.iter().any(|t| !(*t >= 0.0)) {
        return Err(Error::InvalidTarget("target has negative or NaN entries".into()));
    }
    let sum: f64 = target.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidTarget(format!("target sums to {sum}, not 1")));
    }
    Ok(())
}

/// Two-level field shared by the slab and the cap: one positive class with
/// probability `σ(z)` and the remaining mass spread evenly over the others.
/// Returns the loss and `dL/dz`.
fn binary_split_loss(z: f64, target: &[f64], positive: usize) -> (f64, f64) {
    let others = (target.len() - 1) as f64;
    let t_pos = target[positive];
    let t_rest: f64 = target.iter().enumerate().filter(|(i, _)| *i != positive).map(|(_, t)| t).sum();
    let loss = t_pos * softplus(-z) + t_rest * (softplus(z) + others.ln());
    let dz = -t_pos * logistic(-z) + t_rest * logistic(z);
    (loss, dz)
}

fn binary_split_logp(z: f64, class_count: usize, positive: usize) -> Vec<f64> {
    let rest = -softplus(z) - ((class_count - 1) as f64).ln();
    let mut out = vec![rest; class_count];
    out[positive] = -softplus(-z);
    out
}

/// High-confidence region = the `ε`-neighbourhood of a planted affine
/// subspace: `p_pos(X) = σ((ε − dist(X, planted))/τ)`.
#[derive(Clone, Debug)]
pub struct SlabField {
    planted: AffineCut,
    half_width: f64,
    temperature: f64,
    positive_class: usize,
    class_count: usize,
}

impl SlabField {
    pub fn new(
        planted: AffineCut,
        half_width: f64,
        temperature: f64,
        positive_class: usize,
        class_count: usize,
    ) -> Result<Self> {
        if !(half_width > 0.0) || !(temperature > 0.0) {
            return Err(Error::InvalidParameter("slab half-width and temperature must be positive".into()));
        }
        if class_count < 2 {
            return Err(Error::InvalidParameter("need at least two classes".into()));
        }
        if positive_class >= class_count {
            return Err(Error::ClassOutOfRange { class: positive_class, class_count });
        }
        Ok(Self { planted, half_width, temperature, positive_class, class_count })
    }

    /// Temperature defaults to `ε/8`.
    pub fn with_default_temperature(
        planted: AffineCut,
        half_width: f64,
        positive_class: usize,
        class_count: usize,
    ) -> Result<Self> {
        Self::new(planted, half_width, half_width / 8.0, positive_class, class_count)
    }

    pub fn planted(&self) -> &AffineCut {
        &self.planted
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn positive_class(&self) -> usize {
        self.positive_class
    }

    pub fn distance(&self, x: &[f64]) -> f64 {
        self.planted.distance_to(x)
    }

    fn logit(&self, dist: f64) -> f64 {
        (self.half_width - dist) / self.temperature
    }
}

impl ConfidenceField for SlabField {
    fn class_count(&self) -> usize {
        self.class_count
    }

    fn ambient_dim(&self) -> usize {
        self.planted.ambient_dim()
    }

    fn log_probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_input(x, self.ambient_dim())?;
        let z = self.logit(self.distance(x));
        Ok(binary_split_logp(z, self.class_count, self.positive_class))
    }

    fn loss_and_input_gradient(&self, x: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_input(x, self.ambient_dim())?;
        check_target(target, self.class_count)?;
        let r = self.planted.orthogonal_residual(x);
        let dist = norm(&r);
        let (loss, dz) = binary_split_loss(self.logit(dist), target, self.positive_class);
        // dz/ddist = −1/τ, ddist/dX = r/‖r‖; on the planted subspace itself
        // the distance has a kink and we return the zero subgradient.
        let grad = if dist > 0.0 {
            let c = -dz / (self.temperature * dist);
            r.iter().map(|v| c * v).collect()
        } else {
            vec![0.0; x.len()]
        };
        Ok((loss, grad))
    }

    fn describe(&self) -> String {
        format!(
            "slab(D={}, n={}, eps={}, tau={}, class={}/{})",
            self.ambient_dim(),
            self.planted.cut_dim(),
            self.half_width,
            self.temperature,
            self.positive_class,
            self.class_count
        )
    }
}

/// High-confidence region = a cone around `axis` with apex at `center`, so
/// its projection onto the unit sphere around `center` is the spherical cap
/// of half-angle `angle`: `p_pos(X) = σ((cos∠(X − X0, axis) − cos α)/τ)`.
#[derive(Clone, Debug)]
pub struct SphericalCapField {
    center: Vec<f64>,
    axis: Vec<f64>,
    angle: f64,
    sharpness: f64,
    positive_class: usize,
    class_count: usize,
}

impl SphericalCapField {
    pub fn new(
        center: Vec<f64>,
        axis: Vec<f64>,
        angle: f64,
        sharpness: f64,
        positive_class: usize,
        class_count: usize,
    ) -> Result<Self> {
        if center.len() != axis.len() {
            return Err(Error::DimensionMismatch { expected: center.len(), got: axis.len() });
        }
        let n = norm(&axis);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::InvalidParameter("cap axis must be non-zero".into()));
        }
        if !(0.0..=std::f64::consts::PI).contains(&angle) || !(sharpness > 0.0) {
            return Err(Error::InvalidParameter("cap angle must be in [0, π], sharpness positive".into()));
        }
        if class_count < 2 {
            return Err(Error::InvalidParameter("need at least two classes".into()));
        }
        if positive_class >= class_count {
            return Err(Error::ClassOutOfRange { class: positive_class, class_count });
        }
        let axis = axis.iter().map(|v| v / n).collect();
        Ok(Self { center, axis, angle, sharpness, positive_class, class_count })
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn axis(&self) -> &[f64] {
        &self.axis
    }

    pub fn angle(&self) -> f64 {
        self.angle
    }

    /// Half-angle of the cap where `p_pos > threshold`.
    pub fn superlevel_angle(&self, threshold: f64) -> f64 {
        let logit = (threshold / (1.0 - threshold)).ln();
        (self.angle.cos() + self.sharpness * logit).clamp(-1.0, 1.0).acos()
    }

    /// Support function of the `p_pos > threshold` superlevel set projected
    /// onto the unit sphere around the center.
    pub fn support_oracle(&self, threshold: f64) -> Result<CapSupport> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::InvalidParameter(format!("threshold {threshold} not in (0, 1)")));
        }
        CapSupport::new(self.axis.clone(), self.superlevel_angle(threshold))
    }

    fn cos_angle(&self, v: &[f64]) -> f64 {
        let r = norm(v);
        if r == 0.0 {
            0.0
        } else {
            dot(v, &self.axis) / r
        }
    }
}

impl ConfidenceField for SphericalCapField {
    fn class_count(&self) -> usize {
        self.class_count
    }

    fn ambient_dim(&self) -> usize {
        self.center.len()
    }

    fn log_probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_input(x, self.ambient_dim())?;
        let v = sub(x, &self.center);
        let z = (self.cos_angle(&v) - self.angle.cos()) / self.sharpness;
        Ok(binary_split_logp(z, self.class_count, self.positive_class))
    }

    fn loss_and_input_gradient(&self, x: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_input(x, self.ambient_dim())?;
        check_target(target, self.class_count)?;
        let v = sub(x, &self.center);
        let r = norm(&v);
        let cos = self.cos_angle(&v);
        let z = (cos - self.angle.cos()) / self.sharpness;
        let (loss, dz) = binary_split_loss(z, target, self.positive_class);
        let grad = if r > 0.0 {
            // ∇ cos = u/r − cos · v/r²
            let c = dz / self.sharpness;
            v.iter()
                .zip(&self.axis)
                .map(|(vi, ui)| c * (ui / r - cos * vi / (r * r)))
                .collect()
        } else {
            vec![0.0; x.len()]
        };
        Ok((loss, grad))
    }

    fn describe(&self) -> String {
        format!(
            "cap(D={}, angle={}, sharpness={}, class={}/{})",
            self.ambient_dim(),
            self.angle,
            self.sharpness,
            self.positive_class,
            self.class_count
        )
    }
}

/// `p(X) = softmax(W X + b)`.
#[derive(Clone, Debug)]
pub struct LinearSoftmaxField {
    weights: Vec<Vec<f64>>,
    biases: Vec<f64>,
}

impl LinearSoftmaxField {
    pub fn new(weights: Vec<Vec<f64>>, biases: Vec<f64>) -> Result<Self> {
        if weights.len() < 2 || weights.len() != biases.len() {
            return Err(Error::InvalidParameter("need ≥2 classes with one bias per weight row".into()));
        }
        let dim = weights[0].len();
        if dim == 0 {
            return Err(Error::InvalidDimension("empty weight rows".into()));
        }
        if let Some(r) = weights.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, got: r.len() });
        }
        Ok(Self { weights, biases })
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights.iter().zip(&self.biases).map(|(w, b)| dot(w, x) + b).collect()
    }
}

impl ConfidenceField for LinearSoftmaxField {
    fn class_count(&self) -> usize {
        self.weights.len()
    }

    fn ambient_dim(&self) -> usize {
        self.weights[0].len()
    }

    fn log_probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_input(x, self.ambient_dim())?;
        Ok(log_softmax(&self.logits(x)))
    }

    fn loss_and_input_gradient(&self, x: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_input(x, self.ambient_dim())?;
        check_target(target, self.class_count())?;
        let logp = log_softmax(&self.logits(x));
        let loss = cross_entropy_from_log(&logp, target);
        // g = Wᵀ (p − t)
        let mut grad = vec![0.0; self.ambient_dim()];
        for ((w, l), t) in self.weights.iter().zip(&logp).zip(target) {
            let c = l.exp() - t;
            for (g, wi) in grad.iter_mut().zip(w) {
                *g += c * wi;
            }
        }
        Ok((loss, grad))
    }

    fn describe(&self) -> String {
        format!("linear_softmax(D={}, C={})", self.ambient_dim(), self.class_count())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sample_cut;
    use crate::linalg::gaussian_vec;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn fd_gradient<F: ConfidenceField>(field: &F, x: &[f64], target: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                (field.loss(&xp, target).unwrap() - field.loss(&xm, target).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        diff / norm(a).max(norm(b)).max(1e-12)
    }

    fn random_target<R: Rng>(rng: &mut R, c: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..c).map(|_| rng.random::<f64>()).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }

    fn slab(seed: u64) -> SlabField {
        let mut rng = rng_from_seed(seed);
        let planted = sample_cut(12, 5, 12, &mut rng).unwrap().with_offset(gaussian_vec(&mut rng, 12)).unwrap();
        SlabField::with_default_temperature(planted, 1.5, 2, 4).unwrap()
    }

    #[test]
    fn slab_threshold_values() {
        let f = slab(1);
        let on = f.planted().embed(&[0.3, -1.0, 2.0, 0.0, 0.5]).unwrap();
        let p = f.evaluate(&on).unwrap();
        assert!((p[2] - logistic(8.0)).abs() < 1e-12);
        // Step exactly ε away in a direction orthogonal to the planted span.
        let mut rng = rng_from_seed(2);
        let mut dir = f.planted().orthogonal_residual(&gaussian_vec(&mut rng, 12));
        let offset_part = f.planted().orthogonal_residual(f.planted().offset());
        for (d, o) in dir.iter_mut().zip(&offset_part) {
            *d -= o;
        }
        let n = norm(&dir);
        let x: Vec<f64> = on.iter().zip(&dir).map(|(a, d)| a + 1.5 * d / n).collect();
        let p = f.evaluate(&x).unwrap();
        assert!((p[2] - 0.5).abs() < 1e-12);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p[0] - p[1]).abs() < 1e-15 && (p[1] - p[3]).abs() < 1e-15);
    }

    #[test]
    fn slab_probability_decreases_with_distance() {
        let f = slab(3);
        let mut rng = rng_from_seed(4);
        let mut pts: Vec<(f64, f64)> = (0..50)
            .map(|_| {
                let x: Vec<f64> = gaussian_vec(&mut rng, 12).iter().map(|v| v * 2.0).collect();
                (f.distance(&x), f.evaluate(&x).unwrap()[2])
            })
            .collect();
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in pts.windows(2) {
            assert!(w[1].1 <= w[0].1);
            assert_eq!(w[0].1 > 0.5, w[0].0 < 1.5);
        }
    }

    #[test]
    fn linear_zero_weights_uniform() {
        let f = LinearSoftmaxField::new(vec![vec![0.0; 3]; 5], vec![0.0; 5]).unwrap();
        let p = f.evaluate(&[1.0, -2.0, 3.0]).unwrap();
        assert!(p.iter().all(|v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn non_finite_input_rejected() {
        let f = LinearSoftmaxField::new(vec![vec![0.0; 2]; 2], vec![0.0; 2]).unwrap();
        assert!(matches!(f.evaluate(&[1.0, f64::NAN]), Err(Error::NonFinite { index: 1 })));
        assert!(matches!(f.evaluate(&[1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(f.loss_and_input_gradient(&[1.0, 1.0], &[0.7, 0.7]).is_err());
    }

    #[test]
    fn cross_entropy_at_match_is_entropy() {
        let t = [0.2, 0.3, 0.5];
        let h: f64 = t.iter().map(|v: &f64| -v * v.ln()).sum();
        assert!((cross_entropy(&t, &t) - h).abs() < 1e-15);
        assert!((cross_entropy(&[0.0, 1.0], &[1.0, 0.0]) + PROB_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn linear_gradient_closed_form() {
        let mut rng = rng_from_seed(5);
        let w: Vec<Vec<f64>> = (0..4).map(|_| gaussian_vec(&mut rng, 7)).collect();
        let f = LinearSoftmaxField::new(w.clone(), gaussian_vec(&mut rng, 4)).unwrap();
        for _ in 0..20 {
            let x = gaussian_vec(&mut rng, 7);
            let t = random_target(&mut rng, 4);
            let (_, g) = f.loss_and_input_gradient(&x, &t).unwrap();
            let p = f.evaluate(&x).unwrap();
            let mut expected = vec![0.0; 7];
            for c in 0..4 {
                for i in 0..7 {
                    expected[i] += w[c][i] * (p[c] - t[c]);
                }
            }
            assert!(rel_err(&g, &expected) < 1e-12);
            assert!(rel_err(&g, &fd_gradient(&f, &x, &t, 1e-5)) < 1e-6);
        }
    }

    #[test]
    fn analytic_fields_match_finite_differences() {
        let mut rng = rng_from_seed(6);
        let s = slab(7);
        let cap = SphericalCapField::new(gaussian_vec(&mut rng, 12), gaussian_vec(&mut rng, 12), 0.8, 0.1, 1, 3).unwrap();
        for _ in 0..100 {
            let x: Vec<f64> = gaussian_vec(&mut rng, 12).iter().map(|v| v * 1.5).collect();
            let t = random_target(&mut rng, 4);
            let (_, g) = s.loss_and_input_gradient(&x, &t).unwrap();
            assert!(rel_err(&g, &fd_gradient(&s, &x, &t, 1e-4)) <= 1e-4);

            let x = gaussian_vec(&mut rng, 12);
            let t = random_target(&mut rng, 3);
            let (_, g) = cap.loss_and_input_gradient(&x, &t).unwrap();
            assert!(rel_err(&g, &fd_gradient(&cap, &x, &t, 1e-4)) <= 1e-4);
        }
    }

    #[test]
    fn cap_superlevel_set_is_the_cap() {
        let mut rng = rng_from_seed(8);
        let center = gaussian_vec(&mut rng, 9);
        let axis = gaussian_vec(&mut rng, 9);
        let cap = SphericalCapField::new(center.clone(), axis, 0.6, 0.05, 0, 2).unwrap();
        assert!((cap.superlevel_angle(0.5) - 0.6).abs() < 1e-12);
        for _ in 0..200 {
            let v = gaussian_vec(&mut rng, 9);
            let angle = (dot(&v, cap.axis()) / norm(&v)).clamp(-1.0, 1.0).acos();
            let x: Vec<f64> = center.iter().zip(&v).map(|(c, d)| c + 3.0 * d).collect();
            let p = cap.evaluate(&x).unwrap()[0];
            assert_eq!(p > 0.5, angle < 0.6);
        }
        let support = cap.support_oracle(0.5).unwrap();
        assert!((support.angle() - 0.6).abs() < 1e-12);
        assert!(cap.support_oracle(1.0).is_err());
    }
}
