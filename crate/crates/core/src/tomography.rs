//! Probing a confidence field on random affine cuts.
//!
//! A probe samples a cut `X(θ) = θM + X0`, starts at `θ = 0` (so the first
//! evaluated input is exactly `X0`) and runs Adam on the cross-entropy between
//! the field's output and a target probability vector. The best iterate seen
//! is reported. A sweep repeats probes over cut dimensions and seeds.

use std::io::Write;

use rand::seq::IndexedRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::fields::{cross_entropy, ConfidenceField};
use crate::geometry::{sample_cut, sample_cut_from_differences, AffineCut};
use crate::linalg::{gaussian_vec, norm};
use crate::rng::{derive_seed, rng_from_seed, Rng};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetKind {
    OneHot { class: usize },
    Boundary { classes: Vec<usize> },
    UniformAll,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TargetVector {
    kind: TargetKind,
    probs: Vec<f64>,
}

impl TargetVector {
    pub fn kind(&self) -> &TargetKind {
        &self.kind
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn class_count(&self) -> usize {
        self.probs.len()
    }

    /// Classes carrying target mass.
    pub fn support(&self) -> Vec<usize> {
        (0..self.probs.len()).filter(|&c| self.probs[c] > 0.0).collect()
    }

    /// The scalar tracked for one-hot targets: the probability of that class.
    pub fn component(&self, probs: &[f64]) -> Option<f64> {
        match self.kind {
            TargetKind::OneHot { class } => Some(probs[class]),
            _ => None,
        }
    }

    pub fn label(&self) -> String {
        match &self.kind {
            TargetKind::OneHot { class } => format!("one_hot({class})"),
            TargetKind::Boundary { classes } => {
                let list: Vec<String> = classes.iter().map(|c| c.to_string()).collect();
                format!("boundary({})", list.join("+"))
            }
            TargetKind::UniformAll => "uniform_all".to_string(),
        }
    }
}

pub fn make_target(kind: TargetKind, class_count: usize) -> Result<TargetVector> {
    if class_count < 2 {
        return Err(Error::InvalidTarget(format!("need at least two classes, got {class_count}")));
    }
    let check = |class: usize| {
        if class < class_count {
            Ok(())
        } else {
            Err(Error::ClassOutOfRange { class, class_count })
        }
    };
    let mut probs = vec![0.0; class_count];
    match &kind {
        TargetKind::OneHot { class } => {
            check(*class)?;
            probs[*class] = 1.0;
        }
        TargetKind::Boundary { classes } => {
            let mut set = classes.clone();
            set.sort_unstable();
            set.dedup();
            if set.len() < 2 {
                return Err(Error::InvalidTarget("a boundary target needs at least two distinct classes".into()));
            }
            for &c in &set {
                check(c)?;
                probs[c] = 1.0 / set.len() as f64;
            }
        }
        TargetKind::UniformAll => probs.iter_mut().for_each(|p| *p = 1.0 / class_count as f64),
    }
    Ok(TargetVector { kind, probs })
}

/// Where the cut's offset `X0` comes from.
#[derive(Clone, Debug)]
pub enum OffsetPolicy<'a> {
    /// A random point of the dataset whose label is outside the target's
    /// support; falls back to a standard Gaussian point (flagged) when no such
    /// point exists.
    Dataset(&'a Dataset),
    /// `center + sigma · N(0, I)`.
    Gaussian { center: Vec<f64>, sigma: f64 },
    Fixed(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpanMode {
    /// Orthonormalized Gaussian rows with `sparsity` non-zeros each (`None`
    /// for dense rows).
    Gaussian {
        #[serde(default)]
        sparsity: Option<usize>,
    },
    /// Orthonormalized differences of dataset points; needs a dataset offset
    /// policy.
    DataDifference,
}

impl Default for SpanMode {
    fn default() -> Self {
        SpanMode::Gaussian { sparsity: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OffsetSource {
    Dataset { index: usize },
    Gaussian,
    /// The dataset pool was empty after class exclusion.
    GaussianFallback,
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub max_steps: usize,
    pub grad_tol: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { learning_rate: 0.05, max_steps: 1000, grad_tol: 1e-6, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl ProbeConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.max_steps > 0
            && self.grad_tol >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid probe optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeResult {
    pub cut_dim: usize,
    pub seed: u64,
    pub p_max: Vec<f64>,
    pub target_component: Option<f64>,
    pub l_min: f64,
    pub initial_loss: f64,
    pub steps_used: usize,
    pub converged: bool,
    pub offset_source: OffsetSource,
    pub theta_norm: f64,
}

/// Cut sampling and offset selection for a probe.
#[derive(Clone, Debug)]
pub struct ProbeSetup<'a> {
    pub offsets: OffsetPolicy<'a>,
    pub span: SpanMode,
}

impl ProbeSetup<'_> {
    fn sample_offset(&self, target: &TargetVector, dim: usize, rng: &mut Rng) -> Result<(Vec<f64>, OffsetSource)> {
        match &self.offsets {
            OffsetPolicy::Dataset(data) => {
                check_len(data.dim(), dim)?;
                let pool = data.indices_excluding(&target.support());
                match pool.choose(rng) {
                    Some(&i) => Ok((data.input(i).to_vec(), OffsetSource::Dataset { index: i })),
                    None => Ok((gaussian_vec(rng, dim), OffsetSource::GaussianFallback)),
                }
            }
            OffsetPolicy::Gaussian { center, sigma } => {
                check_len(center.len(), dim)?;
                let x = gaussian_vec(rng, dim).iter().zip(center).map(|(g, c)| c + sigma * g).collect();
                Ok((x, OffsetSource::Gaussian))
            }
            OffsetPolicy::Fixed(x) => {
                check_len(x.len(), dim)?;
                Ok((x.clone(), OffsetSource::Fixed))
            }
        }
    }

    fn sample_span(&self, dim: usize, cut_dim: usize, rng: &mut Rng) -> Result<AffineCut> {
        match self.span {
            SpanMode::Gaussian { sparsity } => sample_cut(dim, cut_dim, sparsity.unwrap_or(dim), rng),
            SpanMode::DataDifference => match &self.offsets {
                OffsetPolicy::Dataset(data) => {
                    let pool: Vec<&[f64]> = data.inputs().iter().map(|x| x.as_slice()).collect();
                    sample_cut_from_differences(&pool, cut_dim, rng)
                }
                _ => Err(Error::InvalidParameter("data-difference spans need a dataset offset policy".into())),
            },
        }
    }
}

fn check_len(got: usize, expected: usize) -> Result<()> {
    if got == expected {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

/// One probe on a fresh random cut of dimension `cut_dim`.
///
/// `L_min` is reported as the floored cross-entropy of the best iterate's
/// probabilities, so it agrees with `cross_entropy(p_max, target)` exactly.
pub fn probe<F: ConfidenceField + ?Sized>(
    field: &F,
    cut_dim: usize,
    target: &TargetVector,
    setup: &ProbeSetup<'_>,
    config: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    config.validate()?;
    let dim = field.ambient_dim();
    if cut_dim == 0 || cut_dim > dim {
        return Err(Error::InvalidDimension(format!("cut dimension {cut_dim} not in 1..={dim}")));
    }
    if target.class_count() != field.class_count() {
        return Err(Error::InvalidTarget(format!(
            "target has {} classes, field has {}",
            target.class_count(),
            field.class_count()
        )));
    }
    let mut rng = rng_from_seed(seed);
    let (x0, offset_source) = setup.sample_offset(target, dim, &mut rng)?;
    let cut = setup.sample_span(dim, cut_dim, &mut rng)?.with_offset(x0)?;
    let t = target.probs();

    let mut theta = vec![0.0; cut_dim];
    let mut m = vec![0.0; cut_dim];
    let mut v = vec![0.0; cut_dim];
    let mut best_loss = f64::INFINITY;
    let mut best_theta = theta.clone();
    let mut initial_loss = f64::NAN;
    let mut converged = false;
    let mut steps = 0;
    loop {
        let x = cut.embed(&theta)?;
        let (loss, grad_x) = field.loss_and_input_gradient(&x, t)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step: steps });
        }
        if steps == 0 {
            initial_loss = loss;
        }
        if loss < best_loss {
            best_loss = loss;
            best_theta.copy_from_slice(&theta);
        }
        let g = cut.pull_back(&grad_x);
        if norm(&g) < config.grad_tol {
            converged = true;
            break;
        }
        if steps == config.max_steps {
            break;
        }
        steps += 1;
        let c1 = 1.0 - config.beta1.powi(steps as i32);
        let c2 = 1.0 - config.beta2.powi(steps as i32);
        for i in 0..cut_dim {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
            theta[i] -= config.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + config.eps);
        }
    }

    let p_max = field.evaluate(&cut.embed(&best_theta)?)?;
    Ok(ProbeResult {
        cut_dim,
        seed,
        target_component: target.component(&p_max),
        l_min: cross_entropy(&p_max, t),
        p_max,
        initial_loss,
        steps_used: steps,
        converged,
        offset_source,
        theta_norm: norm(&best_theta),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRecord {
    pub cut_dim: usize,
    pub repeat: usize,
    pub seed: u64,
    pub outcome: std::result::Result<ProbeResult, String>,
}

impl SweepRecord {
    /// Target component for fitting; failed probes count as 0.
    pub fn component_or_zero(&self) -> Option<f64> {
        match &self.outcome {
            Ok(r) => r.target_component,
            Err(_) => Some(0.0),
        }
    }

    pub fn failed(&self) -> bool {
        self.outcome.is_err()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub field: String,
    pub target: TargetVector,
    pub dims: Vec<usize>,
    pub repeats: usize,
    pub master_seed: u64,
    /// Ordered by `(cut_dim, repeat)`.
    pub records: Vec<SweepRecord>,
}

/// Seed of the probe at `(cut_dim, repeat)`; independent of evaluation order.
pub fn probe_seed(master_seed: u64, cut_dim: usize, repeat: usize) -> u64 {
    derive_seed(master_seed, &[cut_dim as u64, repeat as u64])
}

pub fn sweep<F: ConfidenceField + ?Sized>(
    field: &F,
    dims: &[usize],
    repeats: usize,
    target: &TargetVector,
    setup: &ProbeSetup<'_>,
    config: &ProbeConfig,
    master_seed: u64,
) -> Result<SweepResult> {
    if dims.is_empty() || dims.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter(format!("sweep dims must be non-empty and strictly increasing: {dims:?}")));
    }
    if repeats == 0 {
        return Err(Error::InvalidParameter("sweep needs at least one repeat".into()));
    }
    if dims[0] == 0 || *dims.last().unwrap() > field.ambient_dim() {
        return Err(Error::InvalidDimension(format!(
            "sweep dims must lie in 1..={}",
            field.ambient_dim()
        )));
    }
    config.validate()?;
    let jobs: Vec<(usize, usize)> = dims.iter().flat_map(|&d| (0..repeats).map(move |r| (d, r))).collect();
    let records = jobs
        .into_par_iter()
        .map(|(d, r)| {
            let seed = probe_seed(master_seed, d, r);
            let outcome = probe(field, d, target, setup, config, seed).map_err(|e| e.to_string());
            SweepRecord { cut_dim: d, repeat: r, seed, outcome }
        })
        .collect();
    Ok(SweepResult {
        field: field.describe(),
        target: target.clone(),
        dims: dims.to_vec(),
        repeats,
        master_seed,
        records,
    })
}

impl SweepResult {
    /// `(d, target_component)` for every repeat, failures as 0. Empty for
    /// targets without a scalar component.
    pub fn probability_points(&self) -> Vec<(f64, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.component_or_zero().map(|p| (r.cut_dim as f64, p)))
            .collect()
    }

    /// `(d, L_min)` for every successful probe.
    pub fn loss_points(&self) -> Vec<(f64, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.outcome.as_ref().ok().map(|p| (r.cut_dim as f64, p.l_min)))
            .collect()
    }

    /// Median target component per cut dimension, in `dims` order.
    pub fn median_components(&self) -> Vec<f64> {
        self.dims
            .iter()
            .map(|&d| {
                let vals: Vec<f64> = self
                    .records
                    .iter()
                    .filter(|r| r.cut_dim == d)
                    .filter_map(|r| r.component_or_zero())
                    .collect();
                median(&vals)
            })
            .collect()
    }

    /// Smallest probed cut dimension whose median target component reaches
    /// `threshold`; a model-free stand-in for `d*` when no fit is available.
    pub fn empirical_crossing(&self, threshold: f64) -> Option<usize> {
        self.dims
            .iter()
            .zip(self.median_components())
            .filter(|(_, m)| *m >= threshold)
            .map(|(&d, _)| d)
            .min()
    }

    pub fn failure_count(&self) -> usize {
        self.records.iter().filter(|r| r.failed()).count()
    }

    pub fn fallback_count(&self) -> usize {
        self.records
            .iter()
            .filter(|r| matches!(&r.outcome, Ok(p) if p.offset_source == OffsetSource::GaussianFallback))
            .count()
    }

    /// Long-format CSV, one row per probe. `target_component` is empty for
    /// targets without a scalar component; `offset_index` is empty unless the
    /// offset came from the dataset. `flags` marks fallback offsets and failed
    /// probes (whose error text is not part of the CSV).
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "d,seed,target_component,L_min,steps,converged,offset_index,theta_norm,flags")?;
        for r in &self.records {
            match &r.outcome {
                Ok(p) => {
                    let comp = p.target_component.map(fmt_prob).unwrap_or_default();
                    let (index, flag) = match p.offset_source {
                        OffsetSource::Dataset { index } => (index.to_string(), ""),
                        OffsetSource::GaussianFallback => (String::new(), "offset_fallback"),
                        OffsetSource::Gaussian | OffsetSource::Fixed => (String::new(), ""),
                    };
                    writeln!(
                        out,
                        "{},{},{},{},{},{},{},{},{}",
                        r.cut_dim, r.seed, comp, p.l_min, p.steps_used, p.converged, index, p.theta_norm, flag
                    )?;
                }
                Err(_) => {
                    let comp = if self.target.component(self.target.probs()).is_some() { "0" } else { "" };
                    writeln!(out, "{},{},{},,,false,,,failed", r.cut_dim, r.seed, comp)?;
                }
            }
        }
        Ok(())
    }
}

/// Shortest round-tripping text, switching to exponent form for tiny values.
fn fmt_prob(p: f64) -> String {
    if p != 0.0 && p.abs() < 1e-4 {
        format!("{p:e}")
    } else {
        p.to_string()
    }
}

pub(crate) fn median(vals: &[f64]) -> f64 {
    if vals.is_empty() {
        return f64::NAN;
    }
    let mut v = vals.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Number of adjacent pairs where `values` decreases.
pub fn count_decreases(values: &[f64]) -> usize {
    values.windows(2).filter(|w| w[1] < w[0]).count()
}
