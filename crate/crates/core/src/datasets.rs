//! Labelled point sets: synthetic generators with known structure, label
//! permutation, stratified subsampling, jitter augmentation and CSV I/O.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::sample_cut;
use crate::linalg::{gaussian_vec, norm, sub};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    class_count: usize,
    split: Split,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>, class_count: usize, split: Split) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::InvalidParameter("dataset must contain at least one sample".into()));
        }
        if inputs.len() != labels.len() {
            return Err(Error::DimensionMismatch { expected: inputs.len(), got: labels.len() });
        }
        let dim = inputs[0].len();
        if dim == 0 {
            return Err(Error::InvalidDimension("inputs must have at least one feature".into()));
        }
        for x in &inputs {
            if x.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: x.len() });
            }
            if let Some(index) = x.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { index });
            }
        }
        if let Some(&class) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::ClassOutOfRange { class, class_count });
        }
        Ok(Self { inputs, labels, class_count, split })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i]
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Inputs of one class.
    pub fn class_inputs(&self, class: usize) -> Vec<Vec<f64>> {
        self.inputs
            .iter()
            .zip(&self.labels)
            .filter(|(_, l)| **l == class)
            .map(|(x, _)| x.clone())
            .collect()
    }

    /// Indices of samples whose label is not in `excluded`.
    pub fn indices_excluding(&self, excluded: &[usize]) -> Vec<usize> {
        (0..self.len()).filter(|&i| !excluded.contains(&self.labels[i])).collect()
    }

    fn select(&self, idx: &[usize]) -> Self {
        Self {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            split: self.split,
        }
    }
}

/// Isotropic Gaussian clusters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub dim: usize,
    pub classes: usize,
    pub per_class: usize,
    /// Minimum pairwise center distance in units of `noise_sigma`.
    pub separation: f64,
    pub noise_sigma: f64,
    /// Number of coordinates that carry signal. The remaining coordinates
    /// are identically zero in every sample, like dead pixels at an image
    /// border. Defaults to all of them.
    #[serde(default)]
    pub active_dims: Option<usize>,
}

const PACKING_ATTEMPTS: usize = 1000;

impl BlobSpec {
    fn validate(&self) -> Result<usize> {
        if self.dim == 0 || self.classes == 0 || self.per_class == 0 {
            return Err(Error::InvalidParameter("blob dims, classes and per_class must be positive".into()));
        }
        if !(self.separation > 0.0) || !(self.noise_sigma > 0.0) {
            return Err(Error::InvalidParameter("separation and noise_sigma must be positive".into()));
        }
        let active = self.active_dims.unwrap_or(self.dim);
        if active == 0 || active > self.dim {
            return Err(Error::InvalidDimension(format!("active_dims {active} not in 1..={}", self.dim)));
        }
        Ok(active)
    }
}

/// Class centers and the active coordinate set behind a blob dataset, so
/// that train and test splits can be drawn from the same distribution.
#[derive(Clone, Debug)]
pub struct BlobModel {
    spec: BlobSpec,
    active: Vec<usize>,
    centers: Vec<Vec<f64>>,
}

impl BlobModel {
    pub fn new<R: Rng + ?Sized>(spec: &BlobSpec, rng: &mut R) -> Result<Self> {
        let active_n = spec.validate()?;
        let mut active = sample_indices(rng, spec.dim, active_n).into_vec();
        active.sort_unstable();
        let min_dist = spec.separation * spec.noise_sigma;
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
        for _ in 0..spec.classes {
            let mut placed = false;
            for _ in 0..PACKING_ATTEMPTS {
                let local = gaussian_vec(rng, active_n);
                let mut c = vec![0.0; spec.dim];
                for (&i, v) in active.iter().zip(&local) {
                    c[i] = v * min_dist;
                }
                if centers.iter().all(|o| norm(&sub(o, &c)) >= min_dist) {
                    centers.push(c);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::InfeasiblePacking {
                    classes: spec.classes,
                    separation: spec.separation,
                    attempts: PACKING_ATTEMPTS,
                });
            }
        }
        Ok(Self { spec: spec.clone(), active, centers })
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    pub fn active_coords(&self) -> &[usize] {
        &self.active
    }

    pub fn sample<R: Rng + ?Sized>(&self, per_class: usize, split: Split, rng: &mut R) -> Result<Dataset> {
        let mut inputs = Vec::with_capacity(per_class * self.spec.classes);
        let mut labels = Vec::with_capacity(inputs.capacity());
        for (class, center) in self.centers.iter().enumerate() {
            for _ in 0..per_class {
                let mut x = center.clone();
                let noise = gaussian_vec(rng, self.active.len());
                for (&i, n) in self.active.iter().zip(&noise) {
                    x[i] += self.spec.noise_sigma * n;
                }
                inputs.push(x);
                labels.push(class);
            }
        }
        Dataset::new(inputs, labels, self.spec.classes, split)
    }
}

pub fn gen_blobs<R: Rng + ?Sized>(spec: &BlobSpec, rng: &mut R) -> Result<Dataset> {
    BlobModel::new(spec, rng)?.sample(spec.per_class, Split::Train, rng)
}

/// Train split of `spec.per_class` and a test split of `test_per_class`
/// samples per class from the same centers.
pub fn gen_blobs_with_test<R: Rng + ?Sized>(
    spec: &BlobSpec,
    test_per_class: usize,
    rng: &mut R,
) -> Result<(Dataset, Dataset)> {
    let model = BlobModel::new(spec, rng)?;
    let train = model.sample(spec.per_class, Split::Train, rng)?;
    let test = model.sample(test_per_class.max(1), Split::Test, rng)?;
    Ok((train, test))
}

/// Each class lives on its own random affine subspace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedSpec {
    pub dim: usize,
    pub intrinsic_dims: Vec<usize>,
    pub per_class: usize,
    /// Standard deviation of isotropic noise around each subspace.
    pub thickness: f64,
    /// Standard deviation along each long direction.
    #[serde(default = "one")]
    pub spread: f64,
    /// Standard deviation of each subspace's offset from the origin.
    #[serde(default = "one")]
    pub offset_scale: f64,
}

fn one() -> f64 {
    1.0
}

pub fn gen_planted_manifold_classes<R: Rng + ?Sized>(spec: &PlantedSpec, rng: &mut R) -> Result<Dataset> {
    if spec.intrinsic_dims.is_empty() || spec.per_class == 0 {
        return Err(Error::InvalidParameter("need at least one class and one sample per class".into()));
    }
    if let Some(&n) = spec.intrinsic_dims.iter().find(|&&n| n == 0 || n > spec.dim) {
        return Err(Error::InvalidDimension(format!("intrinsic dimension {n} not in 1..={}", spec.dim)));
    }
    if spec.thickness < 0.0 || !(spec.spread > 0.0) {
        return Err(Error::InvalidParameter("thickness must be ≥ 0 and spread > 0".into()));
    }
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (class, &n) in spec.intrinsic_dims.iter().enumerate() {
        let offset: Vec<f64> = gaussian_vec(rng, spec.dim).iter().map(|v| v * spec.offset_scale).collect();
        let cut = sample_cut(spec.dim, n, spec.dim, rng)?.with_offset(offset)?;
        for _ in 0..spec.per_class {
            let theta: Vec<f64> = gaussian_vec(rng, n).iter().map(|v| v * spec.spread).collect();
            let mut x = cut.embed(&theta)?;
            if spec.thickness > 0.0 {
                for (xi, e) in x.iter_mut().zip(gaussian_vec(rng, spec.dim)) {
                    *xi += spec.thickness * e;
                }
            }
            inputs.push(x);
            labels.push(class);
        }
    }
    Dataset::new(inputs, labels, spec.intrinsic_dims.len(), Split::Train)
}

/// Randomly reassign labels by shuffling the label vector.
pub fn permute_labels<R: Rng + ?Sized>(dataset: &Dataset, rng: &mut R) -> Dataset {
    let mut perm: Vec<usize> = (0..dataset.len()).collect();
    perm.shuffle(rng);
    permute_labels_with(dataset, &perm).expect("a shuffled index vector is a permutation")
}

/// Sample `i` receives the label of sample `perm[i]`.
pub fn permute_labels_with(dataset: &Dataset, perm: &[usize]) -> Result<Dataset> {
    if perm.len() != dataset.len() {
        return Err(Error::DimensionMismatch { expected: dataset.len(), got: perm.len() });
    }
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidParameter("not a permutation".into()));
        }
    }
    let mut out = dataset.clone();
    out.labels = perm.iter().map(|&p| dataset.labels[p]).collect();
    Ok(out)
}

/// Draw `n` samples without replacement, stratified by class: class `c`
/// receives `⌊n·N_c/N⌋` samples plus one for the classes with the largest
/// remainders, so every class is within one of its proportional share.
pub fn subsample<R: Rng + ?Sized>(dataset: &Dataset, n: usize, rng: &mut R) -> Result<Dataset> {
    let total = dataset.len();
    if n > total {
        return Err(Error::NotEnoughSamples { requested: n, available: total });
    }
    if n == 0 {
        return Err(Error::InvalidParameter("cannot subsample to zero samples".into()));
    }
    let hist = dataset.class_histogram();
    let mut quota: Vec<usize> = hist.iter().map(|&c| c * n / total).collect();
    let mut remainders: Vec<(usize, usize)> = hist.iter().enumerate().map(|(k, &c)| ((c * n) % total, k)).collect();
    // Largest remainder first; ties broken by class index for determinism.
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut missing = n - quota.iter().sum::<usize>();
    for &(_, k) in &remainders {
        if missing == 0 {
            break;
        }
        if quota[k] < hist[k] {
            quota[k] += 1;
            missing -= 1;
        }
    }
    let mut chosen = Vec::with_capacity(n);
    for (k, &q) in quota.iter().enumerate() {
        let members: Vec<usize> = (0..total).filter(|&i| dataset.labels[i] == k).collect();
        for j in sample_indices(rng, members.len(), q) {
            chosen.push(members[j]);
        }
    }
    chosen.sort_unstable();
    Ok(dataset.select(&chosen))
}

/// Append `copies` Gaussian-jittered copies of every sample, keeping labels.
pub fn augment<R: Rng + ?Sized>(dataset: &Dataset, noise_sigma: f64, copies: usize, rng: &mut R) -> Result<Dataset> {
    if copies == 0 {
        return Err(Error::InvalidParameter("augment needs at least one copy".into()));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::InvalidParameter("noise_sigma must be non-negative".into()));
    }
    let mut out = dataset.clone();
    for _ in 0..copies {
        for (x, &l) in dataset.inputs.iter().zip(&dataset.labels) {
            let noise = gaussian_vec(rng, x.len());
            out.inputs.push(x.iter().zip(noise).map(|(v, e)| v + noise_sigma * e).collect());
            out.labels.push(l);
        }
    }
    Ok(out)
}

/// Write `label,x0,…,x{D−1}` rows. Values use the shortest representation
/// that parses back to the identical `f64`.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_csv(dataset, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_csv<W: Write>(dataset: &Dataset, mut w: W) -> Result<()> {
    write!(w, "label")?;
    for i in 0..dataset.dim() {
        write!(w, ",x{i}")?;
    }
    writeln!(w)?;
    for (x, l) in dataset.inputs.iter().zip(&dataset.labels) {
        write!(w, "{l}")?;
        for v in x {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Read a CSV written by [`save_csv`] (or by hand). The class count is one
/// more than the largest label, and at least two. Lines starting with `#` are
/// skipped; reported row numbers are file lines.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| csv_error(0, 0, e))?;
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| csv_error(1, 0, e))?,
        None => return Err(Error::CsvParse { row: 1, column: 0, reason: "empty file, expected header `label,x0,...`".into() }),
    };
    let header_row = line_of(&header, 1);
    if header.get(0) != Some("label") || header.len() < 2 {
        return Err(Error::CsvParse {
            row: header_row,
            column: 0,
            reason: "expected header row `label,x0,x1,...`".into(),
        });
    }
    for (j, name) in header.iter().enumerate().skip(1) {
        if name != format!("x{}", j - 1) {
            return Err(Error::CsvParse { row: header_row, column: j, reason: format!("expected column name `x{}`", j - 1) });
        }
    }
    let dim = header.len() - 1;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut last_row = header_row;
    for rec in records {
        let rec = rec.map_err(|e| {
            let row = e.position().map(|p| p.line() as usize).unwrap_or(last_row + 1);
            csv_error(row, 0, e)
        })?;
        let row = line_of(&rec, last_row + 1);
        last_row = row;
        if rec.len() != dim + 1 {
            return Err(Error::CsvParse {
                row,
                column: rec.len().min(dim + 1),
                reason: format!("expected {} fields, found {}", dim + 1, rec.len()),
            });
        }
        let label: usize = rec[0].parse().map_err(|_| Error::CsvParse {
            row,
            column: 0,
            reason: format!("label `{}` is not a non-negative integer", &rec[0]),
        })?;
        let mut x = Vec::with_capacity(dim);
        for (j, field) in rec.iter().enumerate().skip(1) {
            let v: f64 = field.parse().map_err(|_| Error::CsvParse {
                row,
                column: j,
                reason: format!("`{field}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::CsvParse { row, column: j, reason: "value is not finite".into() });
            }
            x.push(v);
        }
        inputs.push(x);
        labels.push(label);
    }
    if inputs.is_empty() {
        return Err(Error::CsvParse { row: header_row + 1, column: 0, reason: "no data rows".into() });
    }
    let class_count = labels.iter().max().map(|m| m + 1).unwrap_or(2).max(2);
    Dataset::new(inputs, labels, class_count, Split::Train)
}

fn line_of(rec: &csv::StringRecord, fallback: usize) -> usize {
    rec.position().map(|p| p.line() as usize).unwrap_or(fallback)
}

fn csv_error(row: usize, column: usize, e: csv::Error) -> Error {
    Error::CsvParse { row, column, reason: e.to_string() }
}
