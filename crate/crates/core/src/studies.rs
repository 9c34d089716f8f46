//! Experiment grids over toy classifiers: each grid point trains (or reuses)
//! a model, probes every class target across cut dimensions, fits the
//! probability curve and extracts `d*`. A trend summary compares the
//! per-point median `d*` against the expected direction.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::datasets::{gen_blobs_with_test, permute_labels, subsample, BlobSpec, Dataset};
use crate::error::{Error, Result};
use crate::fields::ConfidenceField;
use crate::fitting::{extract_dstar, fit_loss_curve, fit_prob_curve, CriticalDim, FitResult};
use crate::neuralnet::{train, EnsembleModel, MlpModel, TrainConfig, Trainer};
use crate::rng::{derive_rng, derive_seed};
use crate::tomography::{
    make_target, median, sweep, OffsetPolicy, ProbeConfig, ProbeSetup, SpanMode, SweepResult, TargetKind,
    TargetVector,
};

/// Fit and critical dimension of one sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepAnalysis {
    pub fit: FitResult,
    pub critical: std::result::Result<CriticalDim, String>,
}

/// Fit a sweep's probability points (one-hot targets) or its losses (other
/// targets) and extract the critical dimension at `threshold`. For loss fits
/// the threshold applies to the inner curve `exp(−L)`.
pub fn analyze_sweep(result: &SweepResult, threshold: f64, ambient_dim: usize) -> Result<SweepAnalysis> {
    let points = result.probability_points();
    let fit = if points.is_empty() {
        fit_loss_curve(&result.loss_points())?
    } else {
        fit_prob_curve(&points)?
    };
    let critical = extract_dstar(&fit, threshold, ambient_dim).map_err(|e| e.to_string());
    Ok(SweepAnalysis { fit, critical })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKindName {
    RandomLabels,
    TrainsetSize,
    Ensemble,
    Width,
    Sparsity,
    TrainingStage,
}

impl StudyKindName {
    pub fn parse(name: &str) -> Option<Self> {
        Some(match name.replace('-', "_").as_str() {
            "random_labels" => Self::RandomLabels,
            "trainset_size" => Self::TrainsetSize,
            "ensemble" => Self::Ensemble,
            "width" => Self::Width,
            "sparsity" => Self::Sparsity,
            "training_stage" => Self::TrainingStage,
            _ => return None,
        })
    }

    /// Expected change of `d*` as the grid value grows.
    pub fn expected_trend(self) -> Trend {
        match self {
            Self::RandomLabels | Self::Ensemble => Trend::Increasing,
            Self::TrainsetSize | Self::Width | Self::Sparsity => Trend::Decreasing,
            Self::TrainingStage => Trend::Unspecified,
        }
    }

    /// The paper reads the sparsity effect at the 25% level.
    pub fn default_threshold(self) -> f64 {
        match self {
            Self::Sparsity => 0.25,
            _ => 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    Increasing,
    Decreasing,
    Unspecified,
}

/// Settings shared by every study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub data: BlobSpec,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    pub dims: Vec<usize>,
    pub repeats: usize,
    /// Target classes; all classes when absent.
    #[serde(default)]
    pub classes: Option<Vec<usize>>,
    #[serde(default)]
    pub span: SpanMode,
    /// Defaults to 0.25 for the sparsity study and 0.5 otherwise.
    #[serde(default)]
    pub threshold: Option<f64>,
    /// Grid values: training samples per class, ensemble sizes, hidden
    /// widths, cut sparsities or epoch checkpoints. Unused by the random-label
    /// study, whose grid is (true labels, permuted labels).
    #[serde(default)]
    pub grid: Vec<usize>,
}

fn default_test_per_class() -> usize {
    200
}

/// Desk-scale settings for each study kind.
///
/// Classes overlap (test accuracy well below 1) so that generalization
/// varies across the grid, and probes use a small learning rate so they stay
/// near the data instead of reaching the far field, where any ReLU network is
/// a handful of cones.
pub fn default_study_config(kind: StudyKindName) -> StudyConfig {
    let mut data = BlobSpec { dim: 32, classes: 4, per_class: 400, separation: 0.3, noise_sigma: 1.0, active_dims: None };
    let grid = match kind {
        StudyKindName::RandomLabels => vec![],
        StudyKindName::TrainsetSize => vec![6, 25, 100, 400],
        StudyKindName::Ensemble => vec![1, 2, 4, 8],
        StudyKindName::Width => vec![4, 16, 64, 256],
        StudyKindName::Sparsity => {
            data.active_dims = Some(8);
            vec![1, 4, 32]
        }
        StudyKindName::TrainingStage => vec![1, 3, 10, 30],
    };
    StudyConfig {
        data,
        test_per_class: 200,
        hidden: vec![64, 64],
        train: TrainConfig { epochs: 30, ..Default::default() },
        probe: ProbeConfig { learning_rate: 0.01, max_steps: 300, ..Default::default() },
        dims: vec![1, 2, 3, 4, 6, 8, 12, 16, 24, 32],
        repeats: 16,
        classes: None,
        span: SpanMode::default(),
        threshold: None,
        grid,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudyRow {
    pub grid_value: usize,
    pub class: usize,
    pub d_star: Option<f64>,
    pub band: Option<(f64, f64)>,
    pub manifold_dim: Option<f64>,
    pub train_acc: f64,
    pub test_acc: f64,
    pub residual_rms: Option<f64>,
    pub failed_probes: usize,
    /// Smallest probed cut dimension whose median target component reaches
    /// the threshold.
    pub empirical_d_star: Option<usize>,
    pub error: Option<String>,
}

impl StudyRow {
    /// `d*` for trend purposes: the fitted crossing when there is one,
    /// otherwise the empirical crossing, otherwise `D` (the threshold is
    /// never reached).
    pub fn censored_d_star(&self, ambient_dim: usize) -> f64 {
        self.d_star
            .or(self.empirical_d_star.map(|d| d as f64))
            .unwrap_or(ambient_dim as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrendSummary {
    pub expected: Trend,
    pub grid: Vec<usize>,
    /// Median over target classes of the censored `d*` at each grid point.
    pub medians: Vec<f64>,
    /// Adjacent pairs of `medians` moving against the expected direction.
    pub inversions: usize,
    /// Classes whose own `d*` sequence is fully in the expected direction.
    pub classes_following: usize,
    pub classes_total: usize,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudyReport {
    pub kind: StudyKindName,
    pub threshold: f64,
    pub ambient_dim: usize,
    pub rows: Vec<StudyRow>,
    pub trend: TrendSummary,
}

/// Grid value used for the random-label study's two points.
pub const TRUE_LABELS: usize = 0;
pub const PERMUTED_LABELS: usize = 1;

const TAG_DATA: u64 = 1;
const TAG_INIT: u64 = 2;
const TAG_TRAIN: u64 = 3;
const TAG_PROBE: u64 = 4;
const TAG_PERMUTE: u64 = 5;
const TAG_SUBSAMPLE: u64 = 6;

/// A trained field plus its accuracies.
struct Subject {
    field: Box<dyn ConfidenceField>,
    train_acc: f64,
    test_acc: f64,
}

pub fn run_study(kind: StudyKindName, config: &StudyConfig, master_seed: u64) -> Result<StudyReport> {
    validate(kind, config)?;
    let threshold = config.threshold.unwrap_or(kind.default_threshold());
    let mut data_rng = derive_rng(master_seed, &[TAG_DATA]);
    let (train_full, test) = gen_blobs_with_test(&config.data, config.test_per_class, &mut data_rng)?;
    let class_count = config.data.classes;
    let classes: Vec<usize> = config.classes.clone().unwrap_or_else(|| (0..class_count).collect());
    let grid: Vec<usize> = match kind {
        StudyKindName::RandomLabels => vec![TRUE_LABELS, PERMUTED_LABELS],
        _ => config.grid.clone(),
    };

    let layer_dims = |hidden: &[usize]| {
        let mut dims = vec![config.data.dim];
        dims.extend_from_slice(hidden);
        dims.push(class_count);
        dims
    };
    let train_model = |train_set: &Dataset, hidden: &[usize], tag: u64| -> Result<(MlpModel, f64, f64)> {
        let mut init_rng = derive_rng(master_seed, &[TAG_INIT, tag]);
        let model = MlpModel::new_he(&layer_dims(hidden), &mut init_rng)?;
        let cfg = TrainConfig { seed: derive_seed(master_seed, &[TAG_TRAIN, tag]), ..config.train.clone() };
        let out = train(model, train_set, None, &cfg)?;
        let (_, train_acc) = out.model.evaluate_dataset(train_set)?;
        let (_, test_acc) = out.model.evaluate_dataset(&test)?;
        Ok((out.model, train_acc, test_acc))
    };
    let fit_one = |train_set: &Dataset, hidden: &[usize], tag: u64| -> Result<Subject> {
        let (model, train_acc, test_acc) = train_model(train_set, hidden, tag)?;
        Ok(Subject { field: Box::new(model), train_acc, test_acc })
    };

    // Each grid point yields the probed field, the dataset offsets are drawn
    // from, and the span mode.
    let mut subjects: Vec<(Subject, Dataset, SpanMode)> = Vec::with_capacity(grid.len());
    match kind {
        StudyKindName::RandomLabels => {
            let permuted = permute_labels(&train_full, &mut derive_rng(master_seed, &[TAG_PERMUTE]));
            for (g, data) in [(TRUE_LABELS, train_full.clone()), (PERMUTED_LABELS, permuted)] {
                subjects.push((fit_one(&data, &config.hidden, g as u64)?, data, config.span));
            }
        }
        StudyKindName::TrainsetSize => {
            for &n in &grid {
                let mut rng = derive_rng(master_seed, &[TAG_SUBSAMPLE, n as u64]);
                let data = subsample(&train_full, n * class_count, &mut rng)?;
                subjects.push((fit_one(&data, &config.hidden, n as u64)?, data, config.span));
            }
        }
        StudyKindName::Width => {
            for &w in &grid {
                let hidden = vec![w; config.hidden.len()];
                subjects.push((fit_one(&train_full, &hidden, w as u64)?, train_full.clone(), config.span));
            }
        }
        StudyKindName::Ensemble => {
            let largest = *grid.iter().max().unwrap();
            let mut members = Vec::with_capacity(largest);
            for m in 0..largest {
                let mut init_rng = derive_rng(master_seed, &[TAG_INIT, m as u64]);
                let model = MlpModel::new_he(&layer_dims(&config.hidden), &mut init_rng)?;
                let cfg = TrainConfig { seed: derive_seed(master_seed, &[TAG_TRAIN, m as u64]), ..config.train.clone() };
                members.push(train(model, &train_full, None, &cfg)?.model);
            }
            for &n in &grid {
                let ensemble = EnsembleModel::new(members[..n].to_vec())?;
                let (train_acc, test_acc) = (accuracy(&ensemble, &train_full)?, accuracy(&ensemble, &test)?);
                let subject = Subject { field: Box::new(ensemble), train_acc, test_acc };
                subjects.push((subject, train_full.clone(), config.span));
            }
        }
        StudyKindName::Sparsity => {
            // The same trained network is probed with every sparsity.
            let (model, train_acc, test_acc) = train_model(&train_full, &config.hidden, 0)?;
            for &k in &grid {
                let subject = Subject { field: Box::new(model.clone()), train_acc, test_acc };
                subjects.push((subject, train_full.clone(), SpanMode::Gaussian { sparsity: Some(k) }));
            }
        }
        StudyKindName::TrainingStage => {
            let mut init_rng = derive_rng(master_seed, &[TAG_INIT, 0]);
            let model = MlpModel::new_he(&layer_dims(&config.hidden), &mut init_rng)?;
            let cfg = TrainConfig { seed: derive_seed(master_seed, &[TAG_TRAIN, 0]), ..config.train.clone() };
            let mut trainer = Trainer::new(model, cfg)?;
            let mut done = 0;
            for &e in &grid {
                while done < e {
                    trainer.run_epoch(&train_full, None)?;
                    done += 1;
                }
                let m = trainer.model().clone();
                let (_, train_acc) = m.evaluate_dataset(&train_full)?;
                let (_, test_acc) = m.evaluate_dataset(&test)?;
                subjects.push((Subject { field: Box::new(m), train_acc, test_acc }, train_full.clone(), config.span));
            }
        }
    }

    let mut rows = Vec::with_capacity(grid.len() * classes.len());
    for ((g_idx, &g), (subject, data, span)) in grid.iter().enumerate().zip(&subjects) {
        for &class in &classes {
            let target = make_target(TargetKind::OneHot { class }, class_count)?;
            let setup = ProbeSetup { offsets: OffsetPolicy::Dataset(data), span: *span };
            let seed = derive_seed(master_seed, &[TAG_PROBE, g_idx as u64, class as u64]);
            rows.push(probe_row(subject, &target, &setup, config, threshold, seed, g, class));
        }
    }
    let trend = summarize(kind.expected_trend(), &grid, &classes, &rows, config.data.dim);
    Ok(StudyReport { kind, threshold, ambient_dim: config.data.dim, rows, trend })
}

#[allow(clippy::too_many_arguments)]
fn probe_row(
    subject: &Subject,
    target: &TargetVector,
    setup: &ProbeSetup<'_>,
    config: &StudyConfig,
    threshold: f64,
    seed: u64,
    grid_value: usize,
    class: usize,
) -> StudyRow {
    let mut row = StudyRow {
        grid_value,
        class,
        d_star: None,
        band: None,
        manifold_dim: None,
        train_acc: subject.train_acc,
        test_acc: subject.test_acc,
        residual_rms: None,
        failed_probes: 0,
        empirical_d_star: None,
        error: None,
    };
    let outcome = sweep(subject.field.as_ref(), &config.dims, config.repeats, target, setup, &config.probe, seed)
        .and_then(|s| {
            row.failed_probes = s.failure_count();
            row.empirical_d_star = s.empirical_crossing(threshold);
            analyze_sweep(&s, threshold, config.data.dim)
        });
    match outcome {
        Ok(a) => {
            row.residual_rms = Some(a.fit.residual_rms);
            match a.critical {
                Ok(c) => {
                    row.d_star = Some(c.d_star);
                    row.band = Some(c.band);
                    row.manifold_dim = Some(c.manifold_dim);
                }
                Err(e) => row.error = Some(e),
            }
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

fn summarize(expected: Trend, grid: &[usize], classes: &[usize], rows: &[StudyRow], dim: usize) -> TrendSummary {
    let per_class = |class: usize| -> Vec<f64> {
        grid.iter()
            .map(|&g| {
                rows.iter()
                    .find(|r| r.grid_value == g && r.class == class)
                    .map(|r| r.censored_d_star(dim))
                    .unwrap_or(f64::NAN)
            })
            .collect()
    };
    let medians: Vec<f64> = grid
        .iter()
        .map(|&g| {
            let vals: Vec<f64> =
                rows.iter().filter(|r| r.grid_value == g).map(|r| r.censored_d_star(dim)).collect();
            median(&vals)
        })
        .collect();
    let against = |seq: &[f64]| -> usize {
        seq.windows(2)
            .filter(|w| match expected {
                Trend::Increasing => w[1] < w[0],
                Trend::Decreasing => w[1] > w[0],
                Trend::Unspecified => false,
            })
            .count()
    };
    let inversions = against(&medians);
    let classes_following = classes
        .iter()
        .filter(|&&c| {
            let seq = per_class(c);
            let strict = seq.windows(2).all(|w| match expected {
                Trend::Increasing => w[1] > w[0],
                Trend::Decreasing => w[1] < w[0],
                Trend::Unspecified => true,
            });
            strict && !seq.iter().any(|v| v.is_nan())
        })
        .count();
    let holds = match expected {
        Trend::Unspecified => true,
        // Two grid points: judged per class, by majority.
        _ if grid.len() == 2 => 2 * classes_following > classes.len(),
        _ => inversions <= 1,
    };
    TrendSummary {
        expected,
        grid: grid.to_vec(),
        medians,
        inversions,
        classes_following,
        classes_total: classes.len(),
        holds,
    }
}

fn accuracy<F: ConfidenceField + ?Sized>(field: &F, data: &Dataset) -> Result<f64> {
    let mut correct = 0;
    for (x, &y) in data.inputs().iter().zip(data.labels()) {
        let p = field.log_probabilities(x)?;
        let best = (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b });
        correct += usize::from(best == y);
    }
    Ok(correct as f64 / data.len() as f64)
}

fn validate(kind: StudyKindName, config: &StudyConfig) -> Result<()> {
    let bad = |msg: String| Err(Error::InvalidParameter(msg));
    if config.repeats == 0 {
        return bad("study repeats must be at least 1".into());
    }
    if config.hidden.is_empty() {
        return bad("study needs at least one hidden layer".into());
    }
    if let Some(classes) = &config.classes {
        if let Some(&c) = classes.iter().find(|&&c| c >= config.data.classes) {
            return Err(Error::ClassOutOfRange { class: c, class_count: config.data.classes });
        }
        if classes.is_empty() {
            return bad("study classes must not be empty".into());
        }
    }
    if let Some(t) = config.threshold {
        if !(t > 0.0 && t < 1.0) {
            return bad(format!("threshold {t} not in (0, 1)"));
        }
    }
    if kind != StudyKindName::RandomLabels {
        if config.grid.is_empty() {
            return bad("study grid must not be empty".into());
        }
        if config.grid.windows(2).any(|w| w[0] >= w[1]) || config.grid[0] == 0 {
            return bad(format!("study grid must be positive and strictly increasing: {:?}", config.grid));
        }
    }
    if kind == StudyKindName::TrainsetSize && *config.grid.last().unwrap() > config.data.per_class {
        return Err(Error::NotEnoughSamples {
            requested: *config.grid.last().unwrap(),
            available: config.data.per_class,
        });
    }
    if kind == StudyKindName::Sparsity && *config.grid.last().unwrap() > config.data.dim {
        return bad(format!("sparsity exceeds input dimension {}", config.data.dim));
    }
    Ok(())
}

impl StudyReport {
    /// Long-format rows: one per grid point and target class.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "study,grid_value,class,threshold,d_star,band_lo,band_hi,manifold_dim,empirical_d_star,train_acc,test_acc,residual_rms,failed_probes,note"
        )?;
        let kind = serde_kind(self.kind);
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            writeln!(
                out,
                "{kind},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.grid_value,
                r.class,
                self.threshold,
                opt(r.d_star),
                opt(r.band.map(|b| b.0)),
                opt(r.band.map(|b| b.1)),
                opt(r.manifold_dim),
                r.empirical_d_star.map(|d| d.to_string()).unwrap_or_default(),
                r.train_acc,
                r.test_acc,
                opt(r.residual_rms),
                r.failed_probes,
                r.error.as_deref().map(csv_safe).unwrap_or_default(),
            )?;
        }
        Ok(())
    }
}

pub fn serde_kind(kind: StudyKindName) -> &'static str {
    match kind {
        StudyKindName::RandomLabels => "random_labels",
        StudyKindName::TrainsetSize => "trainset_size",
        StudyKindName::Ensemble => "ensemble",
        StudyKindName::Width => "width",
        StudyKindName::Sparsity => "sparsity",
        StudyKindName::TrainingStage => "training_stage",
    }
}

fn csv_safe(s: &str) -> String {
    s.replace([',', '\n', '\r'], ";")
}
