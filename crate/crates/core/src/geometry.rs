//! Random affine cuts and the high-dimensional geometry around them.
//!
//! A cut is the affine subspace `X(θ) = θ M + X0` where the rows of `M` are
//! orthonormal. Everything else in this module is measurement of sets as seen
//! from a cut's offset: projection onto the unit sphere around it, Gaussian
//! width of the projection, and the escape bound relating width to the
//! codimension a random cut needs to hit the set.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, gaussian_vec, norm, orthonormality_error, orthonormalize_rows, sub};

/// Resampling budget for sparsified bases that come out rank deficient.
pub const MAX_BASIS_ATTEMPTS: usize = 16;

const RANK_TOL: f64 = 1e-8;

/// A `cut_dim`-dimensional affine subspace of `R^ambient_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineCut {
    ambient_dim: usize,
    basis: Vec<Vec<f64>>,
    offset: Vec<f64>,
    sparsity: usize,
}

impl AffineCut {
    /// Build a cut from explicit rows. The rows must already be orthonormal
    /// to 1e-9.
    pub fn from_parts(basis: Vec<Vec<f64>>, offset: Vec<f64>) -> Result<Self> {
        let ambient_dim = offset.len();
        if ambient_dim == 0 {
            return Err(Error::InvalidDimension("ambient dimension must be positive".into()));
        }
        if basis.is_empty() || basis.len() > ambient_dim {
            return Err(Error::InvalidDimension(format!(
                "cut dimension {} not in 1..={ambient_dim}",
                basis.len()
            )));
        }
        for row in &basis {
            if row.len() != ambient_dim {
                return Err(Error::DimensionMismatch { expected: ambient_dim, got: row.len() });
            }
        }
        check_finite(&offset)?;
        if orthonormality_error(&basis) > 1e-9 {
            return Err(Error::InvalidParameter("basis rows are not orthonormal".into()));
        }
        let sparsity = basis
            .iter()
            .map(|r| r.iter().filter(|v| **v != 0.0).count())
            .max()
            .unwrap_or(ambient_dim);
        Ok(Self { ambient_dim, basis, offset, sparsity })
    }

    /// Orthonormalize the given rows (e.g. differences of data points) and
    /// use them as a basis.
    pub fn from_spanning_rows(mut rows: Vec<Vec<f64>>, offset: Vec<f64>) -> Result<Self> {
        if !orthonormalize_rows(&mut rows, RANK_TOL) {
            return Err(Error::DegenerateBasis { attempts: 1 });
        }
        Self::from_parts(rows, offset)
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn cut_dim(&self) -> usize {
        self.basis.len()
    }

    pub fn sparsity(&self) -> usize {
        self.sparsity
    }

    pub fn basis(&self) -> &[Vec<f64>] {
        &self.basis
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    pub fn with_offset(mut self, offset: Vec<f64>) -> Result<Self> {
        if offset.len() != self.ambient_dim {
            return Err(Error::DimensionMismatch { expected: self.ambient_dim, got: offset.len() });
        }
        check_finite(&offset)?;
        self.offset = offset;
        Ok(self)
    }

    /// `X = θ M + X0`.
    pub fn embed(&self, coords: &[f64]) -> Result<Vec<f64>> {
        if coords.len() != self.cut_dim() {
            return Err(Error::DimensionMismatch { expected: self.cut_dim(), got: coords.len() });
        }
        let mut x = self.offset.clone();
        for (t, row) in coords.iter().zip(&self.basis) {
            if *t != 0.0 {
                axpy(*t, row, &mut x);
            }
        }
        Ok(x)
    }

    /// `(X − X0) Mᵀ`, the cut coordinates of the orthogonal projection of `x`.
    pub fn coords_of(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.ambient_dim {
            return Err(Error::DimensionMismatch { expected: self.ambient_dim, got: x.len() });
        }
        let diff = sub(x, &self.offset);
        Ok(self.basis.iter().map(|row| dot(row, &diff)).collect())
    }

    /// Chain rule onto the cut: `∇_θ = (∇_X) Mᵀ`.
    pub fn pull_back(&self, grad_x: &[f64]) -> Vec<f64> {
        self.basis.iter().map(|row| dot(row, grad_x)).collect()
    }

    /// Component of `x − X0` orthogonal to the cut directions.
    pub fn orthogonal_residual(&self, x: &[f64]) -> Vec<f64> {
        let mut r = sub(x, &self.offset);
        for row in &self.basis {
            let c = dot(row, &r);
            axpy(-c, row, &mut r);
        }
        r
    }

    /// Euclidean distance from `x` to the cut.
    pub fn distance_to(&self, x: &[f64]) -> f64 {
        norm(&self.orthogonal_residual(x))
    }
}

fn check_finite(v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// Sample a random `cut_dim`-dimensional linear cut (offset zero).
///
/// With `sparsity == ambient_dim` the rows are Gaussian and then
/// orthonormalized, which gives the rotation-invariant distribution.
///
/// With `sparsity = k < D` the coordinates are randomly permuted and split
/// into `⌊D/k⌋` disjoint blocks of `k` coordinates. Rows are dealt to blocks
/// round-robin, filled with Gaussian entries on their block, and
/// orthonormalized within the block. Rows in different blocks have disjoint
/// supports, so the basis is orthonormal while every row keeps exactly `k`
/// non-zero entries and each row's support is a uniformly random `k`-subset.
/// This caps the cut dimension at `⌊D/k⌋·k`.
pub fn sample_cut<R: Rng + ?Sized>(
    ambient_dim: usize,
    cut_dim: usize,
    sparsity: usize,
    rng: &mut R,
) -> Result<AffineCut> {
    if ambient_dim == 0 || cut_dim == 0 || cut_dim > ambient_dim {
        return Err(Error::InvalidDimension(format!(
            "cut dimension {cut_dim} not in 1..={ambient_dim}"
        )));
    }
    if sparsity == 0 || sparsity > ambient_dim {
        return Err(Error::InvalidDimension(format!(
            "sparsity {sparsity} not in 1..={ambient_dim}"
        )));
    }
    let blocks = ambient_dim / sparsity;
    if cut_dim > blocks * sparsity {
        return Err(Error::InvalidDimension(format!(
            "cut dimension {cut_dim} exceeds {} rows available at sparsity {sparsity} in D={ambient_dim}",
            blocks * sparsity
        )));
    }

    for _ in 0..MAX_BASIS_ATTEMPTS {
        if let Some(basis) = try_sample_basis(ambient_dim, cut_dim, sparsity, blocks, rng) {
            return Ok(AffineCut {
                ambient_dim,
                basis,
                offset: vec![0.0; ambient_dim],
                sparsity,
            });
        }
    }
    Err(Error::DegenerateBasis { attempts: MAX_BASIS_ATTEMPTS })
}

fn try_sample_basis<R: Rng + ?Sized>(
    ambient_dim: usize,
    cut_dim: usize,
    sparsity: usize,
    blocks: usize,
    rng: &mut R,
) -> Option<Vec<Vec<f64>>> {
    if sparsity == ambient_dim {
        let mut rows: Vec<Vec<f64>> = (0..cut_dim).map(|_| gaussian_vec(rng, ambient_dim)).collect();
        return orthonormalize_rows(&mut rows, RANK_TOL).then_some(rows);
    }

    let perm = sample_indices(rng, ambient_dim, ambient_dim).into_vec();
    let mut basis = vec![Vec::new(); cut_dim];
    for b in 0..blocks.min(cut_dim) {
        let coords = &perm[b * sparsity..(b + 1) * sparsity];
        let members: Vec<usize> = (b..cut_dim).step_by(blocks).collect();
        let mut local: Vec<Vec<f64>> = members.iter().map(|_| gaussian_vec(rng, sparsity)).collect();
        if !orthonormalize_rows(&mut local, RANK_TOL) {
            return None;
        }
        // k = 1 rows are ±1 after normalization; Gram-Schmidt never zeroes
        // entries generically, but an exact zero would break the support
        // count, so treat it as degenerate.
        if local.iter().flatten().any(|v| *v == 0.0) {
            return None;
        }
        for (row_idx, values) in members.into_iter().zip(local) {
            let mut row = vec![0.0; ambient_dim];
            for (&c, v) in coords.iter().zip(values) {
                row[c] = v;
            }
            basis[row_idx] = row;
        }
    }
    Some(basis)
}

/// Sample a cut whose directions are orthonormalized differences of pairs of
/// `pool` points.
pub fn sample_cut_from_differences<R: Rng + ?Sized>(
    pool: &[&[f64]],
    cut_dim: usize,
    rng: &mut R,
) -> Result<AffineCut> {
    let ambient_dim = pool.first().map(|p| p.len()).unwrap_or(0);
    if pool.len() < 2 || cut_dim == 0 || cut_dim > ambient_dim {
        return Err(Error::InvalidDimension(format!(
            "cannot span {cut_dim} directions from {} points",
            pool.len()
        )));
    }
    for attempt in 1..=MAX_BASIS_ATTEMPTS {
        let mut rows = Vec::with_capacity(cut_dim);
        for _ in 0..cut_dim {
            let pair = sample_indices(rng, pool.len(), 2);
            rows.push(sub(pool[pair.index(0)], pool[pair.index(1)]));
        }
        if orthonormalize_rows(&mut rows, RANK_TOL) {
            return AffineCut::from_parts(rows, vec![0.0; ambient_dim]);
        }
        if attempt == MAX_BASIS_ATTEMPTS {
            break;
        }
    }
    Err(Error::DegenerateBasis { attempts: MAX_BASIS_ATTEMPTS })
}

/// Map every point to `X0 + (x − X0)/‖x − X0‖`.
pub fn project_to_sphere(points: &[Vec<f64>], center: &[f64]) -> Result<Vec<Vec<f64>>> {
    sphere_directions(points, center).map(|dirs| {
        dirs.into_iter()
            .map(|mut u| {
                axpy(1.0, center, &mut u);
                u
            })
            .collect()
    })
}

/// Unit vectors `(x − X0)/‖x − X0‖`, i.e. the sphere projection expressed
/// relative to its center.
pub fn sphere_directions(points: &[Vec<f64>], center: &[f64]) -> Result<Vec<Vec<f64>>> {
    points
        .iter()
        .enumerate()
        .map(|(index, p)| {
            if p.len() != center.len() {
                return Err(Error::DimensionMismatch { expected: center.len(), got: p.len() });
            }
            let mut u = sub(p, center);
            let n = norm(&u);
            if n == 0.0 {
                return Err(Error::ZeroNorm { index });
            }
            u.iter_mut().for_each(|v| *v /= n);
            Ok(u)
        })
        .collect()
}

/// Support function `g ↦ max_{x ∈ S} g·x` of a target set.
pub trait SupportOracle: Sync {
    fn support(&self, direction: &[f64]) -> Result<f64>;
}

impl<F> SupportOracle for F
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    fn support(&self, direction: &[f64]) -> Result<f64> {
        Ok(self(direction))
    }
}

/// Support of a finite point set: the maximum over the stored points. For a
/// sample of a continuous set this is a lower bound on the set's support.
#[derive(Clone, Debug)]
pub struct PointCloudSupport {
    points: Vec<Vec<f64>>,
}

impl PointCloudSupport {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        let dim = points.first().map(|p| p.len()).ok_or_else(|| {
            Error::InvalidParameter("point cloud must contain at least one point".into())
        })?;
        if let Some(p) = points.iter().find(|p| p.len() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, got: p.len() });
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }
}

impl SupportOracle for PointCloudSupport {
    fn support(&self, direction: &[f64]) -> Result<f64> {
        if direction.len() != self.points[0].len() {
            return Err(Error::DimensionMismatch { expected: self.points[0].len(), got: direction.len() });
        }
        Ok(self
            .points
            .iter()
            .map(|p| dot(p, direction))
            .fold(f64::NEG_INFINITY, f64::max))
    }
}

/// The whole unit sphere: `h(g) = ‖g‖`.
#[derive(Clone, Copy, Debug, Default)]
pub struct UnitSphereSupport;

impl SupportOracle for UnitSphereSupport {
    fn support(&self, direction: &[f64]) -> Result<f64> {
        Ok(norm(direction))
    }
}

/// Great subsphere cut out by a linear subspace through the center: the
/// sphere projection of any affine subspace passing through `X0`.
/// `h(g) = ‖P g‖` with `P` the orthogonal projector onto the subspace.
#[derive(Clone, Debug)]
pub struct SubsphereSupport {
    basis: Vec<Vec<f64>>,
}

impl SubsphereSupport {
    pub fn new(cut: &AffineCut) -> Self {
        Self { basis: cut.basis().to_vec() }
    }
}

impl SupportOracle for SubsphereSupport {
    fn support(&self, direction: &[f64]) -> Result<f64> {
        Ok(self.basis.iter().map(|r| dot(r, direction).powi(2)).sum::<f64>().sqrt())
    }
}

/// Spherical cap `{u ∈ S^{D-1} : angle(u, axis) ≤ angle}`.
///
/// The point of the cap closest in angle to a direction `g` at angle `φ` from
/// the axis lies at angle `max(0, φ − α)` from `g`, along the great circle
/// through `g` and the axis, so `h(g) = ‖g‖ cos(max(0, φ − α))`. This holds
/// for every `φ ∈ [0, π]`, including `φ − α > π/2` where the support is
/// negative.
#[derive(Clone, Debug)]
pub struct CapSupport {
    axis: Vec<f64>,
    angle: f64,
}

impl CapSupport {
    pub fn new(axis: Vec<f64>, angle: f64) -> Result<Self> {
        let n = norm(&axis);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::InvalidParameter("cap axis must be a non-zero vector".into()));
        }
        if !(0.0..=std::f64::consts::PI).contains(&angle) {
            return Err(Error::InvalidParameter(format!("cap angle {angle} not in [0, π]")));
        }
        Ok(Self { axis: axis.iter().map(|v| v / n).collect(), angle })
    }

    pub fn axis(&self) -> &[f64] {
        &self.axis
    }

    pub fn angle(&self) -> f64 {
        self.angle
    }

    /// Exact Gaussian width of the cap, by quadrature over the angle between
    /// a Gaussian direction and the axis (independent of its length).
    pub fn gaussian_width(&self) -> f64 {
        cap_gaussian_width(self.axis.len(), self.angle)
    }
}

impl SupportOracle for CapSupport {
    fn support(&self, direction: &[f64]) -> Result<f64> {
        if direction.len() != self.axis.len() {
            return Err(Error::DimensionMismatch { expected: self.axis.len(), got: direction.len() });
        }
        let gn = norm(direction);
        if gn == 0.0 {
            return Ok(0.0);
        }
        let cos_phi = (dot(direction, &self.axis) / gn).clamp(-1.0, 1.0);
        let phi = cos_phi.acos();
        Ok(gn * (phi - self.angle).max(0.0).cos())
    }
}

/// `E‖g‖` for `g ~ N(0, I_D)`: `√2 Γ((D+1)/2) / Γ(D/2)`.
pub fn expected_gaussian_norm(dim: usize) -> f64 {
    let d = dim as f64;
    (2f64.sqrt().ln() + ln_gamma((d + 1.0) / 2.0) - ln_gamma(d / 2.0)).exp()
}

/// Gaussian width of a spherical cap of half-angle `angle` in `R^dim`.
///
/// Uses the symmetric form `½ E[h(g) + h(−g)]`; the angle `φ` of `g` to the
/// axis has density `∝ sin^{D−2} φ` on `[0, π]`.
pub fn cap_gaussian_width(dim: usize, angle: f64) -> f64 {
    let steps = 20_000;
    let h = std::f64::consts::PI / steps as f64;
    let exponent = dim as f64 - 2.0;
    let mut num = 0.0;
    let mut den = 0.0;
    // Composite Simpson on [0, π].
    for i in 0..=steps {
        let phi = i as f64 * h;
        let w = if i == 0 || i == steps {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let s = phi.sin();
        let dens = if exponent == 0.0 { 1.0 } else { s.powf(exponent) };
        let up = (phi - angle).max(0.0).cos();
        let down = (std::f64::consts::PI - phi - angle).max(0.0).cos();
        num += w * dens * 0.5 * (up + down);
        den += w * dens;
    }
    expected_gaussian_norm(dim) * num / den
}

/// Monte Carlo Gaussian width with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WidthEstimate {
    pub width: f64,
    pub std_error: f64,
    pub n_directions: usize,
}

/// Estimate `w(T) = ½ E_g max_{x,y∈T} g·(x − y)` with `n_directions`
/// i.i.d. standard Gaussian directions.
///
/// Each direction contributes `½ (h(g) + h(−g))`, the half-diameter form of
/// the width. It has the same expectation as `E h(g)`, is exactly zero for a
/// single point wherever it sits, and is translation invariant, so a set
/// projected onto the sphere around `X0` can be handed over either in
/// absolute coordinates or relative to `X0`.
pub fn gaussian_width<O, R>(
    oracle: &O,
    ambient_dim: usize,
    n_directions: usize,
    rng: &mut R,
) -> Result<WidthEstimate>
where
    O: SupportOracle + ?Sized,
    R: Rng + ?Sized,
{
    if n_directions < 2 {
        return Err(Error::InvalidParameter("gaussian width needs at least 2 directions".into()));
    }
    if ambient_dim == 0 {
        return Err(Error::InvalidDimension("ambient dimension must be positive".into()));
    }
    let mut samples = Vec::with_capacity(n_directions);
    let mut neg = vec![0.0; ambient_dim];
    for _ in 0..n_directions {
        let g = gaussian_vec(rng, ambient_dim);
        for (n, v) in neg.iter_mut().zip(&g) {
            *n = -v;
        }
        let value = 0.5 * (oracle.support(&g)? + oracle.support(&neg)?);
        samples.push(value);
    }
    let n = n_directions as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(WidthEstimate {
        width: mean.max(0.0),
        std_error: (var / n).sqrt(),
        n_directions,
    })
}

/// Squared width with a two-standard-error band.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EffectiveDimension {
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
}

pub fn effective_dimension(width: &WidthEstimate) -> EffectiveDimension {
    let w = width.width;
    let lo = (w - 2.0 * width.std_error).max(0.0);
    let hi = w + 2.0 * width.std_error;
    EffectiveDimension { value: w * w, lo: lo * lo, hi: hi * hi }
}

/// Gordon's escape bound on the probability that a random linear subspace of
/// codimension `k` misses a subset of the sphere with Gaussian width `w`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum GordonBound {
    /// Lower bound on the miss probability.
    Bound(f64),
    /// `w ≥ √k` or the bound is not positive.
    Vacuous,
}

impl GordonBound {
    pub fn value(self) -> Option<f64> {
        match self {
            GordonBound::Bound(p) => Some(p),
            GordonBound::Vacuous => None,
        }
    }
}

/// `1 − (7/2) exp(−(√k − w)²/18)`, taking `a_k = √k`.
pub fn gordon_miss_bound(codim: usize, width: f64) -> GordonBound {
    let a_k = (codim as f64).sqrt();
    if codim == 0 || !(width >= 0.0) || width >= a_k {
        return GordonBound::Vacuous;
    }
    let bound = 1.0 - 3.5 * (-(a_k - width).powi(2) / 18.0).exp();
    if bound <= 0.0 {
        GordonBound::Vacuous
    } else {
        GordonBound::Bound(bound.min(1.0))
    }
}

/// Expected closest approach of random affine subspaces, up to a constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum ClosestApproach {
    Intersect,
    /// `√(D − n − d)/√D`.
    Scale(f64),
}

pub fn expected_closest_distance(ambient_dim: usize, dim_a: usize, dim_b: usize) -> Result<ClosestApproach> {
    if ambient_dim == 0 || dim_a > ambient_dim || dim_b > ambient_dim {
        return Err(Error::InvalidDimension(format!(
            "subspace dimensions ({dim_a}, {dim_b}) invalid in D={ambient_dim}"
        )));
    }
    if dim_a + dim_b >= ambient_dim {
        return Ok(ClosestApproach::Intersect);
    }
    let codim = (ambient_dim - dim_a - dim_b) as f64;
    Ok(ClosestApproach::Scale((codim / ambient_dim as f64).sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClosestApproachConfig {
    pub max_iters: usize,
    /// Stop when the gradient norm of `½‖residual‖²` drops below this.
    pub grad_tol: f64,
}

impl Default for ClosestApproachConfig {
    fn default() -> Self {
        Self { max_iters: 2_000, grad_tol: 1e-12 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClosestDistance {
    pub distance: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimize `‖(θ_a M_a + X0_a) − (θ_b M_b + X0_b)‖` over both coordinate
/// vectors.
///
/// The objective is a convex least-squares problem; it is solved by
/// conjugate gradients on the normal equations (CGLS), which reaches the
/// minimum within `cut_a.dim + cut_b.dim` steps in exact arithmetic and
/// stays fast when the subspaces nearly intersect.
pub fn measure_closest_distance(
    cut_a: &AffineCut,
    cut_b: &AffineCut,
    config: &ClosestApproachConfig,
) -> Result<ClosestDistance> {
    if cut_a.ambient_dim() != cut_b.ambient_dim() {
        return Err(Error::DimensionMismatch { expected: cut_a.ambient_dim(), got: cut_b.ambient_dim() });
    }
    let dim = cut_a.ambient_dim();
    let rows: Vec<(&[f64], f64)> = cut_a
        .basis()
        .iter()
        .map(|r| (r.as_slice(), 1.0))
        .chain(cut_b.basis().iter().map(|r| (r.as_slice(), -1.0)))
        .collect();

    // A z = Σ_i sign_i z_i row_i; residual r = A z + (X0_a − X0_b).
    let apply = |z: &[f64], out: &mut Vec<f64>| {
        out.iter_mut().for_each(|v| *v = 0.0);
        for ((row, sign), zi) in rows.iter().zip(z) {
            axpy(sign * zi, row, out);
        }
    };
    let apply_t = |r: &[f64]| -> Vec<f64> { rows.iter().map(|(row, sign)| sign * dot(row, r)).collect() };

    let offset = sub(cut_a.offset(), cut_b.offset());
    let mut z = vec![0.0; rows.len()];
    let mut r = offset.clone();
    let mut s: Vec<f64> = apply_t(&r).into_iter().map(|v| -v).collect();
    let mut p = s.clone();
    let mut gamma = dot(&s, &s);
    let mut q = vec![0.0; dim];
    let mut iterations = 0;
    let mut converged = gamma.sqrt() < config.grad_tol;

    while !converged && iterations < config.max_iters {
        apply(&p, &mut q);
        let qq = dot(&q, &q);
        if qq == 0.0 {
            break;
        }
        let alpha = gamma / qq;
        axpy(alpha, &p, &mut z);
        axpy(alpha, &q, &mut r);
        s = apply_t(&r).into_iter().map(|v| -v).collect();
        let gamma_new = dot(&s, &s);
        iterations += 1;
        if gamma_new.sqrt() < config.grad_tol {
            converged = true;
            break;
        }
        let beta = gamma_new / gamma;
        for (pi, si) in p.iter_mut().zip(&s) {
            *pi = si + beta * *pi;
        }
        gamma = gamma_new;
    }

    // Recompute the residual from the coordinates to shed accumulated drift.
    let mut residual = vec![0.0; dim];
    apply(&z, &mut residual);
    axpy(1.0, &offset, &mut residual);
    let grad = apply_t(&residual);
    if !converged {
        converged = norm(&grad) < config.grad_tol.max(1e-9);
    }
    Ok(ClosestDistance { distance: norm(&residual), iterations, converged })
}

/// Fraction of `trials` random linear subspaces of codimension `codim`
/// (through the cap's center) that miss a spherical cap of half-angle
/// `angle` in `R^D`.
///
/// A subspace `L` meets the cap exactly when the axis is within `angle` of
/// `L`, i.e. `‖P_L axis‖ ≥ cos(angle)`. A uniformly random `L` against a
/// fixed axis has the same law as a fixed `L` (the leading coordinates)
/// against a uniformly random axis, which costs O(D) per trial instead of a
/// Gram–Schmidt.
pub fn cap_miss_frequency<R: Rng + ?Sized>(
    ambient_dim: usize,
    angle: f64,
    codim: usize,
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    if codim == 0 || codim >= ambient_dim {
        return Err(Error::InvalidDimension(format!("codimension {codim} not in 1..{ambient_dim}")));
    }
    if trials == 0 {
        return Err(Error::InvalidParameter("need at least one trial".into()));
    }
    let dim = ambient_dim - codim;
    let cos2 = angle.cos().powi(2) * angle.cos().signum();
    let mut misses = 0;
    for _ in 0..trials {
        let g = gaussian_vec(rng, ambient_dim);
        let inside: f64 = g[..dim].iter().map(|x| x * x).sum();
        let total = inside + g[dim..].iter().map(|x| x * x).sum::<f64>();
        if inside < cos2 * total {
            misses += 1;
        }
    }
    Ok(misses as f64 / trials as f64)
}

/// Monte Carlo closest approach of independent random affine subspaces.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AffineDistanceStats {
    pub ambient_dim: usize,
    pub dim_a: usize,
    pub dim_b: usize,
    pub pairs: usize,
    pub mean: f64,
    pub std: f64,
    /// `√(D−n−d)/√D`, or 0 when the subspaces generically intersect.
    pub theory: f64,
}

/// Closest approach over `pairs` random pairs of dense subspaces whose
/// offsets are drawn from `N(0, I/D)`, so that offsets have unit expected
/// squared norm at every `D`.
pub fn affine_distance_stats<R: Rng + ?Sized>(
    ambient_dim: usize,
    dim_a: usize,
    dim_b: usize,
    pairs: usize,
    rng: &mut R,
) -> Result<AffineDistanceStats> {
    let theory = match expected_closest_distance(ambient_dim, dim_a, dim_b)? {
        ClosestApproach::Intersect => 0.0,
        ClosestApproach::Scale(s) => s,
    };
    if pairs < 2 || dim_a == 0 || dim_b == 0 {
        return Err(Error::InvalidParameter("need at least 2 pairs of non-trivial subspaces".into()));
    }
    let sigma = 1.0 / (ambient_dim as f64).sqrt();
    let offset = |rng: &mut R| -> Vec<f64> { gaussian_vec(rng, ambient_dim).into_iter().map(|v| v * sigma).collect() };
    let mut dists = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let a = sample_cut(ambient_dim, dim_a, ambient_dim, rng)?.with_offset(offset(rng))?;
        let b = sample_cut(ambient_dim, dim_b, ambient_dim, rng)?.with_offset(offset(rng))?;
        dists.push(measure_closest_distance(&a, &b, &ClosestApproachConfig::default())?.distance);
    }
    let n = pairs as f64;
    let mean = dists.iter().sum::<f64>() / n;
    let std = (dists.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    Ok(AffineDistanceStats { ambient_dim, dim_a, dim_b, pairs, mean, std, theory })
}

/// One-constant fit `mean ≈ scale · theory` over the non-intersecting rows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DistanceScaleFit {
    pub scale: f64,
    pub rmse: f64,
    /// `max − min` of the fitted curve over those rows.
    pub curve_range: f64,
}

impl DistanceScaleFit {
    pub fn relative_rmse(&self) -> f64 {
        self.rmse / self.curve_range
    }
}

pub fn fit_distance_scale(rows: &[AffineDistanceStats]) -> Result<DistanceScaleFit> {
    let used: Vec<&AffineDistanceStats> = rows.iter().filter(|r| r.theory > 0.0).collect();
    if used.len() < 2 {
        return Err(Error::InsufficientData("need at least two non-intersecting rows".into()));
    }
    let scale = used.iter().map(|r| r.mean * r.theory).sum::<f64>() / used.iter().map(|r| r.theory * r.theory).sum::<f64>();
    let rmse = (used.iter().map(|r| (r.mean - scale * r.theory).powi(2)).sum::<f64>() / used.len() as f64).sqrt();
    let (lo, hi) = used
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(scale * r.theory), hi.max(scale * r.theory)));
    Ok(DistanceScaleFit { scale, rmse, curve_range: hi - lo })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn e(dim: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    #[test]
    fn dense_cut_is_orthonormal() {
        let mut rng = rng_from_seed(1);
        let cut = sample_cut(3072, 16, 3072, &mut rng).unwrap();
        assert!(orthonormality_error(cut.basis()) <= 1e-9);
        assert!(cut.basis().iter().all(|r| r.iter().all(|v| *v != 0.0)));
    }

    #[test]
    fn full_dimensional_cut_reaches_any_point() {
        let mut rng = rng_from_seed(2);
        let cut = sample_cut(8, 8, 8, &mut rng).unwrap();
        let x: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        let theta = cut.coords_of(&x).unwrap();
        let back = cut.embed(&theta).unwrap();
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn axis_aligned_cut_uses_disjoint_signed_axes() {
        let mut rng = rng_from_seed(3);
        let cut = sample_cut(100, 10, 1, &mut rng).unwrap();
        let mut used = std::collections::HashSet::new();
        for row in cut.basis() {
            let nz: Vec<usize> = (0..100).filter(|&i| row[i] != 0.0).collect();
            assert_eq!(nz.len(), 1);
            assert_eq!(row[nz[0]].abs(), 1.0);
            assert!(used.insert(nz[0]));
        }
    }

    #[test]
    fn sparse_rows_keep_exact_support() {
        let mut rng = rng_from_seed(4);
        for &(dim, d, k) in &[(64, 40, 4), (64, 64, 4), (30, 7, 5), (10, 8, 4)] {
            let cut = sample_cut(dim, d, k, &mut rng).unwrap();
            assert!(orthonormality_error(cut.basis()) <= 1e-9);
            for row in cut.basis() {
                assert_eq!(row.iter().filter(|v| **v != 0.0).count(), k);
            }
        }
    }

    #[test]
    fn invalid_dimensions_rejected() {
        let mut rng = rng_from_seed(5);
        assert!(matches!(sample_cut(10, 11, 10, &mut rng), Err(Error::InvalidDimension(_))));
        assert!(matches!(sample_cut(10, 3, 0, &mut rng), Err(Error::InvalidDimension(_))));
        assert!(matches!(sample_cut(10, 9, 4, &mut rng), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn embed_examples() {
        let cut = AffineCut::from_parts(vec![e(4, 0), e(4, 1)], vec![1.0; 4]).unwrap();
        assert_eq!(cut.embed(&[0.0, 0.0]).unwrap(), vec![1.0; 4]);
        assert_eq!(cut.embed(&[2.0, 3.0]).unwrap(), vec![3.0, 4.0, 1.0, 1.0]);
        assert!(matches!(cut.embed(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn sphere_projection() {
        let center = vec![1.0, -2.0, 0.5];
        let p = vec![3.0, -2.0, 0.5];
        let out = project_to_sphere(&[p], &center).unwrap();
        assert_eq!(out[0], vec![2.0, -2.0, 0.5]);
        let again = project_to_sphere(&out, &center).unwrap();
        for (a, b) in out[0].iter().zip(&again[0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(
            project_to_sphere(std::slice::from_ref(&center), &center),
            Err(Error::ZeroNorm { index: 0 })
        ));
    }

    #[test]
    fn width_of_a_point_is_zero() {
        let mut rng = rng_from_seed(6);
        let origin = PointCloudSupport::new(vec![vec![0.0; 5]]).unwrap();
        let w = gaussian_width(&origin, 5, 100, &mut rng).unwrap();
        assert_eq!(w.width, 0.0);
        assert_eq!(effective_dimension(&w).value, 0.0);
        let elsewhere = PointCloudSupport::new(vec![vec![3.0, -1.0, 2.0, 0.0, 7.0]]).unwrap();
        let w = gaussian_width(&elsewhere, 5, 100, &mut rng).unwrap();
        assert!(w.width.abs() < 1e-12);
    }

    #[test]
    fn width_needs_two_directions() {
        let mut rng = rng_from_seed(6);
        assert!(gaussian_width(&UnitSphereSupport, 5, 1, &mut rng).is_err());
    }

    #[test]
    fn std_error_shrinks_with_directions() {
        let mut rng = rng_from_seed(7);
        let cap = CapSupport::new(e(50, 0), 0.7).unwrap();
        let small = gaussian_width(&cap, 50, 400, &mut rng).unwrap();
        let large = gaussian_width(&cap, 50, 6400, &mut rng).unwrap();
        let ratio = small.std_error / large.std_error;
        assert!((ratio - 4.0).abs() < 0.6, "ratio {ratio}");
    }

    #[test]
    fn gaussian_norm_bounds() {
        for dim in [1usize, 2, 10, 400] {
            let d = dim as f64;
            let m = expected_gaussian_norm(dim);
            assert!(m > d / (d + 1.0).sqrt() && m < d.sqrt(), "{dim}: {m}");
        }
        assert!((expected_gaussian_norm(1) - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn cap_support_limits() {
        let mut rng = rng_from_seed(8);
        let axis = e(6, 2);
        let whole = CapSupport::new(axis.clone(), std::f64::consts::PI).unwrap();
        let point = CapSupport::new(axis.clone(), 0.0).unwrap();
        for _ in 0..20 {
            let g = gaussian_vec(&mut rng, 6);
            assert!((whole.support(&g).unwrap() - norm(&g)).abs() < 1e-12);
            assert!((point.support(&g).unwrap() - g[2]).abs() < 1e-12);
        }
    }

    #[test]
    fn cap_width_quadrature_matches_limits() {
        let d = 40;
        assert!((cap_gaussian_width(d, std::f64::consts::PI) - expected_gaussian_norm(d)).abs() < 1e-9);
        assert!(cap_gaussian_width(d, 0.0).abs() < 1e-9);
        assert!(cap_gaussian_width(d, 0.3) < cap_gaussian_width(d, 0.6));
    }

    #[test]
    fn gordon_examples() {
        let b = gordon_miss_bound(100, 4.0).value().unwrap();
        assert!((b - (1.0 - 3.5 * (-2f64).exp())).abs() < 1e-15);
        assert!((b - 0.5263).abs() < 1e-4);
        assert_eq!(gordon_miss_bound(100, 10.0), GordonBound::Vacuous);
        assert_eq!(gordon_miss_bound(64, 4.0), GordonBound::Vacuous);
    }

    #[test]
    fn closest_distance_formula() {
        assert_eq!(expected_closest_distance(100, 40, 70).unwrap(), ClosestApproach::Intersect);
        assert_eq!(expected_closest_distance(100, 0, 0).unwrap(), ClosestApproach::Scale(1.0));
        let ClosestApproach::Scale(a) = expected_closest_distance(100, 30, 20).unwrap() else { panic!() };
        let ClosestApproach::Scale(b) = expected_closest_distance(100, 40, 20).unwrap() else { panic!() };
        assert!((a / b - (50f64 / 40.0).sqrt()).abs() < 1e-12);
        assert!(expected_closest_distance(10, 11, 0).is_err());
    }

    #[test]
    fn closest_distance_simple_geometry() {
        let cfg = ClosestApproachConfig::default();
        let mut rng = rng_from_seed(9);
        let cut = sample_cut(12, 3, 12, &mut rng).unwrap().with_offset(gaussian_vec(&mut rng, 12)).unwrap();
        let same = measure_closest_distance(&cut, &cut, &cfg).unwrap();
        assert!(same.distance < 1e-6);

        let a = AffineCut::from_parts(vec![vec![1.0, 0.0]], vec![0.0, 0.0]).unwrap();
        let b = AffineCut::from_parts(vec![vec![1.0, 0.0]], vec![5.0, 1.0]).unwrap();
        let d = measure_closest_distance(&a, &b, &cfg).unwrap();
        assert!((d.distance - 1.0).abs() < 1e-6);
        assert!(d.converged);
    }

    #[test]
    fn closest_distance_symmetric_and_zero_when_dimensions_fill_space() {
        let cfg = ClosestApproachConfig::default();
        let mut rng = rng_from_seed(10);
        for trial in 0..100 {
            let dim = 20;
            let na = 1 + trial % 12;
            let nb = dim - na + trial % 3;
            let nb = nb.min(dim);
            let a = sample_cut(dim, na, dim, &mut rng).unwrap().with_offset(gaussian_vec(&mut rng, dim)).unwrap();
            let b = sample_cut(dim, nb, dim, &mut rng).unwrap().with_offset(gaussian_vec(&mut rng, dim)).unwrap();
            let ab = measure_closest_distance(&a, &b, &cfg).unwrap();
            let ba = measure_closest_distance(&b, &a, &cfg).unwrap();
            assert!(ab.distance < 1e-6, "trial {trial}: {}", ab.distance);
            assert!((ab.distance - ba.distance).abs() < 1e-6);
        }
        for _ in 0..20 {
            let a = sample_cut(30, 5, 30, &mut rng).unwrap().with_offset(gaussian_vec(&mut rng, 30)).unwrap();
            let b = sample_cut(30, 7, 30, &mut rng).unwrap().with_offset(gaussian_vec(&mut rng, 30)).unwrap();
            let ab = measure_closest_distance(&a, &b, &cfg).unwrap().distance;
            let ba = measure_closest_distance(&b, &a, &cfg).unwrap().distance;
            assert!(ab > 1e-3);
            assert!((ab - ba).abs() < 1e-8 * (1.0 + ab));
        }
    }

    #[test]
    fn cap_miss_frequency_limits() {
        let mut rng = rng_from_seed(41);
        // A hemisphere is hit by every line through the center.
        assert_eq!(cap_miss_frequency(16, std::f64::consts::FRAC_PI_2, 15, 50, &mut rng).unwrap(), 0.0);
        // A random line through the center almost never meets a tiny cap.
        assert_eq!(cap_miss_frequency(64, 0.05, 63, 50, &mut rng).unwrap(), 1.0);
        assert!(cap_miss_frequency(64, 0.05, 64, 50, &mut rng).is_err());
    }

    #[test]
    fn cap_miss_frequency_matches_explicit_subspaces() {
        let (dim, codim, angle, trials) = (20, 10, 0.8f64, 2000);
        let mut rng = rng_from_seed(43);
        let mut misses = 0;
        for _ in 0..trials {
            let cut = sample_cut(dim, dim - codim, dim, &mut rng).unwrap();
            let proj = cut.basis().iter().map(|r| r[0] * r[0]).sum::<f64>().sqrt();
            if proj < angle.cos() {
                misses += 1;
            }
        }
        let explicit = misses as f64 / trials as f64;
        let fast = cap_miss_frequency(dim, angle, codim, trials, &mut rng).unwrap();
        assert!(explicit > 0.1 && explicit < 0.9, "{explicit}");
        assert!((explicit - fast).abs() < 0.05, "{explicit} vs {fast}");
    }

    #[test]
    fn affine_distance_stats_follow_the_scaling() {
        let mut rng = rng_from_seed(42);
        let s = affine_distance_stats(40, 10, 10, 50, &mut rng).unwrap();
        assert!((s.theory - 0.5f64.sqrt()).abs() < 1e-12);
        // Offset difference ~ N(0, 2I/D): mean distance ≈ √2 · theory.
        assert!((s.mean / s.theory - 2f64.sqrt()).abs() < 0.1, "{s:?}");
        let s = affine_distance_stats(40, 25, 15, 10, &mut rng).unwrap();
        assert_eq!(s.theory, 0.0);
        assert!(s.mean < 1e-8);
    }
}
