use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use subtomo::datasets::{BlobSpec, PlantedSpec};
use subtomo::neuralnet::TrainConfig;
use subtomo::studies::{default_study_config, StudyConfig, StudyKindName};
use subtomo::tomography::{ProbeConfig, SpanMode, TargetKind};

use crate::CliError;

/// The whole config file. Every section is optional; a missing section
/// means that command's defaults.
#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub tomography: Option<TomographyConfig>,
    pub affine_distance: Option<AffineDistanceConfig>,
    pub train: Option<TrainCommandConfig>,
    pub study: Option<StudyConfig>,
    pub dataset_dim: Option<DatasetDimConfig>,
    pub gordon: Option<GordonConfig>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn study_or_default(&self, kind: StudyKindName) -> StudyConfig {
        self.study.clone().unwrap_or_else(|| default_study_config(kind))
    }
}

/// Short hex digest of a command's resolved settings.
pub fn config_hash<T: Serialize>(command: &str, section: &T) -> String {
    let json = serde_json::to_string(&(command, section)).expect("config sections serialize");
    let digest = Sha256::digest(json.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldConfig {
    /// Analytic slab around a random planted affine subspace; offsets are
    /// drawn around the planted offset.
    Slab {
        dim: usize,
        manifold_dim: usize,
        #[serde(default = "default_half_width")]
        half_width: f64,
        #[serde(default)]
        temperature: Option<f64>,
        #[serde(default = "default_offset_sigma")]
        offset_sigma: f64,
    },
    /// A saved model with the dataset its offsets are drawn from.
    Model { model: PathBuf, data: PathBuf },
    /// A toy MLP trained on blobs before probing.
    Toy {
        data: BlobSpec,
        hidden: Vec<usize>,
        #[serde(default)]
        train: TrainConfig,
    },
}

fn default_half_width() -> f64 {
    0.5
}

fn default_offset_sigma() -> f64 {
    5.0
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TomographyConfig {
    pub field: FieldConfig,
    #[serde(default = "default_target")]
    pub target: TargetKind,
    pub dims: Vec<usize>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub span: SpanMode,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_target() -> TargetKind {
    TargetKind::OneHot { class: 0 }
}

fn default_repeats() -> usize {
    10
}

fn default_threshold() -> f64 {
    0.5
}

impl Default for TomographyConfig {
    fn default() -> Self {
        Self {
            field: FieldConfig::Slab {
                dim: 64,
                manifold_dim: 48,
                half_width: default_half_width(),
                temperature: None,
                offset_sigma: default_offset_sigma(),
            },
            target: default_target(),
            dims: SLAB_DIMS.to_vec(),
            repeats: default_repeats(),
            probe: ProbeConfig::default(),
            span: SpanMode::default(),
            threshold: default_threshold(),
        }
    }
}

pub const SLAB_DIMS: [usize; 19] = [1, 2, 3, 4, 6, 8, 10, 12, 14, 16, 18, 20, 24, 28, 32, 40, 48, 56, 64];

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AffineDistanceConfig {
    pub ambient_dims: Vec<usize>,
    /// Dimensions of the first subspace, applied at every `D`.
    pub n_values: Vec<usize>,
    /// Dimensions of the second subspace.
    pub d_values: Vec<usize>,
    #[serde(default = "default_pairs")]
    pub pairs: usize,
}

fn default_pairs() -> usize {
    100
}

impl Default for AffineDistanceConfig {
    fn default() -> Self {
        Self {
            ambient_dims: vec![64, 100],
            n_values: vec![8, 32],
            d_values: vec![1, 4, 8, 16, 24, 32, 40, 48, 56, 64, 80, 100],
            pairs: default_pairs(),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Blobs {
        #[serde(flatten)]
        spec: BlobSpec,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
    },
    Csv {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
    },
}

fn default_test_per_class() -> usize {
    200
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCommandConfig {
    pub data: DataSource,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub permute_labels: bool,
    /// Keep this many training samples in total, stratified by class.
    #[serde(default)]
    pub subsample: Option<usize>,
}

impl Default for TrainCommandConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Blobs {
                spec: BlobSpec {
                    dim: 16,
                    classes: 4,
                    per_class: 200,
                    separation: 4.0,
                    noise_sigma: 1.0,
                    active_dims: None,
                },
                test_per_class: default_test_per_class(),
            },
            hidden: vec![64, 64],
            train: TrainConfig::default(),
            permute_labels: false,
            subsample: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DimDataSource {
    Planted {
        #[serde(flatten)]
        spec: PlantedSpec,
    },
    Blobs {
        #[serde(flatten)]
        spec: BlobSpec,
    },
    Csv { path: PathBuf },
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetDimConfig {
    pub data: DimDataSource,
    #[serde(default = "default_directions")]
    pub n_directions: usize,
    /// Points of other classes used as sphere centers, per class.
    #[serde(default = "default_centers")]
    pub centers: usize,
}

fn default_directions() -> usize {
    2000
}

fn default_centers() -> usize {
    8
}

impl Default for DatasetDimConfig {
    fn default() -> Self {
        Self {
            data: DimDataSource::Planted {
                spec: PlantedSpec {
                    dim: 64,
                    intrinsic_dims: vec![2, 4, 8],
                    per_class: 500,
                    thickness: 0.0,
                    spread: 1.0,
                    offset_scale: 1.0,
                },
            },
            n_directions: default_directions(),
            centers: default_centers(),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GordonConfig {
    pub ambient_dim: usize,
    /// Cap half-angles in radians.
    pub angles: Vec<f64>,
    pub codims: Vec<usize>,
    /// Random subspaces per grid point for the empirical miss frequency; 0
    /// prints the bound only.
    #[serde(default = "default_trials")]
    pub trials: usize,
}

fn default_trials() -> usize {
    500
}

impl Default for GordonConfig {
    fn default() -> Self {
        Self {
            ambient_dim: 256,
            angles: vec![0.05, 0.1, 0.2, 0.3, 0.5, 0.8],
            codims: vec![32, 64, 128, 192, 224, 255],
            trials: default_trials(),
        }
    }
}
