//! Dimensionality measures of data: PCA-90% count, participation ratio and
//! the Gaussian-width effective dimension of the data seen from a point.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{effective_dimension, gaussian_width, sphere_directions, PointCloudSupport};

/// Eigenvalues of the sample covariance (`1/(N−1)` normalization), descending.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectrumSummary {
    pub eigenvalues: Vec<f64>,
    pub total_variance: f64,
}

impl SpectrumSummary {
    pub fn new(inputs: &[Vec<f64>]) -> Result<Self> {
        let n = inputs.len();
        if n < 2 {
            return Err(Error::InsufficientData(format!("{n} samples, need at least 2")));
        }
        let dim = inputs[0].len();
        if let Some(x) = inputs.iter().find(|x| x.len() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, got: x.len() });
        }
        let mut mean = vec![0.0; dim];
        for x in inputs {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / n as f64;
            }
        }
        let centered = DMatrix::from_fn(n, dim, |i, j| inputs[i][j] - mean[j]);
        let cov = centered.tr_mul(&centered) / (n - 1) as f64;
        let total_variance = cov.trace();
        let mut eigenvalues: Vec<f64> =
            SymmetricEigen::new(cov).eigenvalues.iter().map(|&l| l.max(0.0)).collect();
        eigenvalues.sort_by(|a, b| b.total_cmp(a));
        Ok(Self { eigenvalues, total_variance })
    }

    /// Smallest `m` whose leading eigenvalues explain 90% of the variance;
    /// 0 for data without variance.
    pub fn pca_dim(&self, fraction: f64) -> usize {
        let total: f64 = self.eigenvalues.iter().sum();
        if total <= 0.0 {
            return 0;
        }
        let mut acc = 0.0;
        for (i, l) in self.eigenvalues.iter().enumerate() {
            acc += l;
            // Relative slack so that e.g. three equal eigenvalues give
            // exactly 3 despite rounding in the eigen-solve.
            if acc >= fraction * total * (1.0 - 1e-12) {
                return i + 1;
            }
        }
        self.eigenvalues.len()
    }

    pub fn participation_ratio(&self) -> Participation {
        let s: f64 = self.eigenvalues.iter().sum();
        let s2: f64 = self.eigenvalues.iter().map(|l| l * l).sum();
        if s2 <= 0.0 {
            Participation { ratio: 0.0, zero_variance: true }
        } else {
            Participation { ratio: s * s / s2, zero_variance: false }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Participation {
    pub ratio: f64,
    pub zero_variance: bool,
}

pub fn pca_dim_90(inputs: &[Vec<f64>]) -> Result<usize> {
    Ok(SpectrumSummary::new(inputs)?.pca_dim(0.9))
}

/// `(Σλ)² / Σλ²` of the centered covariance spectrum.
pub fn participation_ratio(inputs: &[Vec<f64>]) -> Result<Participation> {
    Ok(SpectrumSummary::new(inputs)?.participation_ratio())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DataEffectiveDimension {
    /// Mean over centers.
    pub mean: f64,
    /// Sample standard deviation over centers (0 for a single center).
    pub spread: f64,
    pub per_center: Vec<f64>,
}

/// Squared Gaussian width of the data projected onto the unit sphere around
/// each center, estimated with the sample-maximum support function and
/// averaged over the centers.
///
/// The sample maximum under-estimates the support of the continuous set the
/// data are drawn from, increasingly so as its dimension grows.
pub fn data_effective_dimension<R: Rng + ?Sized>(
    inputs: &[Vec<f64>],
    centers: &[Vec<f64>],
    n_directions: usize,
    rng: &mut R,
) -> Result<DataEffectiveDimension> {
    if inputs.is_empty() {
        return Err(Error::InsufficientData("no samples".into()));
    }
    if centers.is_empty() {
        return Err(Error::InvalidParameter("need at least one center".into()));
    }
    let dim = inputs[0].len();
    let mut per_center = Vec::with_capacity(centers.len());
    for center in centers {
        let dirs = sphere_directions(inputs, center)?;
        let oracle = PointCloudSupport::new(dirs)?;
        let w = gaussian_width(&oracle, dim, n_directions, rng)?;
        per_center.push(effective_dimension(&w).value);
    }
    let k = per_center.len() as f64;
    let mean = per_center.iter().sum::<f64>() / k;
    let spread = if per_center.len() > 1 {
        (per_center.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(DataEffectiveDimension { mean, spread, per_center })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_planted_manifold_classes, PlantedSpec};
    use crate::geometry::sample_cut;
    use crate::linalg::gaussian_vec;
    use crate::rng::rng_from_seed;

    #[test]
    fn rank_three_data() {
        let mut rng = rng_from_seed(1);
        let cut = sample_cut(20, 3, 20, &mut rng).unwrap();
        // Equal spread along each basis direction: ±e_i pairs.
        let mut pts = Vec::new();
        for row in cut.basis() {
            pts.push(row.clone());
            pts.push(row.iter().map(|v| -v).collect());
        }
        assert_eq!(pca_dim_90(&pts).unwrap(), 3);
        let pr = participation_ratio(&pts).unwrap();
        assert!((pr.ratio - 3.0).abs() < 1e-9);
    }

    #[test]
    fn participation_arithmetic() {
        // Axis-aligned ±√(λ·(N−1)/2) pairs give covariance eigenvalues λ.
        let mut pts = Vec::new();
        for (axis, lam) in [2.0f64, 1.0, 1.0].iter().enumerate() {
            let a = (lam * 5.0 / 2.0).sqrt();
            let mut p = vec![0.0; 3];
            p[axis] = a;
            pts.push(p.clone());
            p[axis] = -a;
            pts.push(p);
        }
        let s = SpectrumSummary::new(&pts).unwrap();
        assert!((s.eigenvalues[0] - 2.0).abs() < 1e-12);
        assert!((s.participation_ratio().ratio - 16.0 / 6.0).abs() < 1e-12);
        assert!((s.eigenvalues.iter().sum::<f64>() - s.total_variance).abs() < 1e-8 * s.total_variance);
    }

    #[test]
    fn isotropic_gaussian_pca() {
        let mut rng = rng_from_seed(2);
        let pts: Vec<Vec<f64>> = (0..20000).map(|_| gaussian_vec(&mut rng, 50)).collect();
        let m = pca_dim_90(&pts).unwrap();
        assert!((43..=47).contains(&m), "{m}");
    }

    #[test]
    fn zero_variance() {
        let pts = vec![vec![1.0, 2.0]; 5];
        assert_eq!(pca_dim_90(&pts).unwrap(), 0);
        assert!(participation_ratio(&pts).unwrap().zero_variance);
        assert!(pca_dim_90(&pts[..1]).is_err());
    }

    #[test]
    fn antipodal_pair_effective_dimension() {
        let mut rng = rng_from_seed(3);
        let pts = vec![vec![1.0, 0.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0, 0.0]];
        let d = data_effective_dimension(&pts, &[vec![0.0; 4]], 200_000, &mut rng).unwrap();
        assert!((d.mean - 2.0 / std::f64::consts::PI).abs() < 0.01, "{d:?}");
    }

    #[test]
    fn single_point_has_zero_dimension() {
        let mut rng = rng_from_seed(4);
        let pts = vec![vec![3.0, 1.0, 2.0]; 4];
        let d = data_effective_dimension(&pts, &[vec![0.0; 3]], 100, &mut rng).unwrap();
        assert_eq!(d.mean, 0.0);
        assert!(matches!(
            data_effective_dimension(&pts, &[vec![3.0, 1.0, 2.0]], 100, &mut rng),
            Err(Error::ZeroNorm { index: 0 })
        ));
    }

    #[test]
    fn planted_class_is_low_dimensional() {
        let mut rng = rng_from_seed(5);
        let spec = PlantedSpec {
            dim: 64,
            intrinsic_dims: vec![4, 4],
            per_class: 500,
            thickness: 0.0,
            spread: 1.0,
            offset_scale: 1.0,
        };
        let data = gen_planted_manifold_classes(&spec, &mut rng).unwrap();
        let class0 = data.class_inputs(0);
        let centers = data.class_inputs(1)[..8].to_vec();
        let d = data_effective_dimension(&class0, &centers, 2000, &mut rng).unwrap();
        assert!(d.mean < 8.0, "{d:?}");
        assert!(d.per_center.iter().all(|v| (v - d.mean).abs() <= 0.3 * d.mean), "{d:?}");
        assert!(pca_dim_90(&class0).unwrap() <= 4);
    }

    #[test]
    fn pca_is_rotation_invariant() {
        let mut rng = rng_from_seed(6);
        let pts: Vec<Vec<f64>> = (0..300)
            .map(|_| gaussian_vec(&mut rng, 10).iter().enumerate().map(|(i, v)| v * (i + 1) as f64).collect())
            .collect();
        let q = sample_cut(10, 10, 10, &mut rng).unwrap();
        let rotated: Vec<Vec<f64>> = pts.iter().map(|x| q.coords_of(x).unwrap()).collect();
        assert_eq!(pca_dim_90(&pts).unwrap(), pca_dim_90(&rotated).unwrap());
    }
}
