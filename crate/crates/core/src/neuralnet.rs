//! Fully-connected ReLU classifiers with a softmax head.
//!
//! Gradients are written out by hand: to the weights for training and to the
//! input for tomography probes. Parameters live in one flat vector, layer by
//! layer (weights row-major `out × in`, then biases), which is also the order
//! they are serialized in.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::fields::{check_input, check_target, cross_entropy_from_log, ConfidenceField};
use crate::linalg::{gaussian_vec, log_softmax, log_sum_exp};
use crate::rng::rng_from_seed;

#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    params: Vec<f64>,
    /// Start of each layer's weight block in `params`.
    offsets: Vec<usize>,
}

struct Trace {
    /// Input to every layer; `acts[0]` is the model input.
    acts: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

impl MlpModel {
    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::InvalidDimension(format!("bad layer dims {layer_dims:?}")));
        }
        if *layer_dims.last().unwrap() < 2 {
            return Err(Error::InvalidDimension("need at least two output classes".into()));
        }
        let mut offsets = Vec::with_capacity(layer_dims.len() - 1);
        let mut total = 0;
        for w in layer_dims.windows(2) {
            offsets.push(total);
            total += w[0] * w[1] + w[1];
        }
        Ok(Self { layer_dims: layer_dims.to_vec(), params: vec![0.0; total], offsets })
    }

    /// He initialization: weights `N(0, 2/fan_in)`, zero biases.
    pub fn new_he<R: Rng + ?Sized>(layer_dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut m = Self::zeros(layer_dims)?;
        for l in 0..m.layer_count() {
            let (inp, out) = (m.layer_dims[l], m.layer_dims[l + 1]);
            let std = (2.0 / inp as f64).sqrt();
            let start = m.offsets[l];
            for (p, g) in m.params[start..start + inp * out].iter_mut().zip(gaussian_vec(rng, inp * out)) {
                *p = std * g;
            }
        }
        Ok(m)
    }

    pub fn from_params(layer_dims: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(layer_dims)?;
        if params.len() != m.params.len() {
            return Err(Error::DimensionMismatch { expected: m.params.len(), got: params.len() });
        }
        m.params = params;
        Ok(m)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn layer_count(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn weights(&self, l: usize) -> &[f64] {
        let s = self.offsets[l];
        &self.params[s..s + self.layer_dims[l] * self.layer_dims[l + 1]]
    }

    fn biases(&self, l: usize) -> &[f64] {
        let s = self.offsets[l] + self.layer_dims[l] * self.layer_dims[l + 1];
        &self.params[s..s + self.layer_dims[l + 1]]
    }

    /// Whether parameter `i` is a weight (as opposed to a bias).
    fn is_weight(&self, i: usize) -> bool {
        let l = match self.offsets.binary_search(&i) {
            Ok(l) => l,
            Err(l) => l - 1,
        };
        i - self.offsets[l] < self.layer_dims[l] * self.layer_dims[l + 1]
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut acts = Vec::with_capacity(self.layer_count());
        let mut a = x.to_vec();
        for l in 0..self.layer_count() {
            let (inp, out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let w = self.weights(l);
            let mut z = self.biases(l).to_vec();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &w[o * inp..(o + 1) * inp];
                *zo += row.iter().zip(&a).map(|(wi, ai)| wi * ai).sum::<f64>();
            }
            acts.push(a);
            if l + 1 < self.layer_count() {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            a = z;
            debug_assert_eq!(a.len(), out);
        }
        Trace { acts, logits: a }
    }

    /// Backpropagate `dlogits` through the network. Returns the gradient with
    /// respect to the input; when `param_grad` is given, the parameter
    /// gradient is added into it.
    fn backward(&self, trace: &Trace, dlogits: &[f64], mut param_grad: Option<&mut [f64]>) -> Vec<f64> {
        let mut delta = dlogits.to_vec();
        for l in (0..self.layer_count()).rev() {
            let (inp, out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let a = &trace.acts[l];
            let w = self.weights(l);
            if let Some(g) = param_grad.as_deref_mut() {
                let s = self.offsets[l];
                for o in 0..out {
                    let d = delta[o];
                    if d != 0.0 {
                        let row = &mut g[s + o * inp..s + (o + 1) * inp];
                        for (gi, ai) in row.iter_mut().zip(a) {
                            *gi += d * ai;
                        }
                    }
                    g[s + inp * out + o] += d;
                }
            }
            let mut prev = vec![0.0; inp];
            for o in 0..out {
                let d = delta[o];
                if d != 0.0 {
                    for (p, wi) in prev.iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
                        *p += d * wi;
                    }
                }
            }
            if l > 0 {
                // ReLU mask: the stored activation is positive exactly where
                // the pre-activation was.
                for (p, ai) in prev.iter_mut().zip(a) {
                    if *ai <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        delta
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_input(x, self.layer_dims[0])?;
        Ok(self.trace(x).logits)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.evaluate(x)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let z = self.logits(x)?;
        Ok(argmax(&z))
    }

    /// Loss and gradient with respect to every parameter for one sample.
    pub fn loss_and_param_gradient(&self, x: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_input(x, self.layer_dims[0])?;
        check_target(target, self.class_count())?;
        let trace = self.trace(x);
        let logp = log_softmax(&trace.logits);
        let loss = cross_entropy_from_log(&logp, target);
        let dlogits: Vec<f64> = logp.iter().zip(target).map(|(l, t)| l.exp() - t).collect();
        let mut g = vec![0.0; self.params.len()];
        self.backward(&trace, &dlogits, Some(&mut g));
        Ok((loss, g))
    }

    /// Mean cross-entropy and accuracy on a dataset.
    pub fn evaluate_dataset(&self, data: &Dataset) -> Result<(f64, f64)> {
        let mut loss = 0.0;
        let mut correct = 0usize;
        for (x, &y) in data.inputs().iter().zip(data.labels()) {
            let z = self.logits(x)?;
            loss -= log_softmax(&z)[y];
            if argmax(&z) == y {
                correct += 1;
            }
        }
        let n = data.len() as f64;
        Ok((loss / n, correct as f64 / n))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl ConfidenceField for MlpModel {
    fn class_count(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    fn ambient_dim(&self) -> usize {
        self.layer_dims[0]
    }

    fn log_probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(log_softmax(&self.logits(x)?))
    }

    fn loss_and_input_gradient(&self, x: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_input(x, self.layer_dims[0])?;
        check_target(target, self.class_count())?;
        let trace = self.trace(x);
        let logp = log_softmax(&trace.logits);
        let loss = cross_entropy_from_log(&logp, target);
        let dlogits: Vec<f64> = logp.iter().zip(target).map(|(l, t)| l.exp() - t).collect();
        Ok((loss, self.backward(&trace, &dlogits, None)))
    }

    fn describe(&self) -> String {
        format!("mlp{:?}", self.layer_dims)
    }
}

/// Probability-averaging ensemble of models with identical layer dims.
#[derive(Clone, Debug)]
pub struct EnsembleModel {
    members: Vec<MlpModel>,
}

impl EnsembleModel {
    pub fn new(members: Vec<MlpModel>) -> Result<Self> {
        let first = members.first().ok_or(Error::EmptyEnsemble)?;
        if let Some(m) = members.iter().find(|m| m.layer_dims != first.layer_dims) {
            return Err(Error::InvalidParameter(format!(
                "ensemble members disagree on layer dims: {:?} vs {:?}",
                first.layer_dims, m.layer_dims
            )));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[MlpModel] {
        &self.members
    }
}

impl ConfidenceField for EnsembleModel {
    fn class_count(&self) -> usize {
        self.members[0].class_count()
    }

    fn ambient_dim(&self) -> usize {
        self.members[0].ambient_dim()
    }

    /// `log( (1/N) Σ_m p_m )`, computed as a log-sum-exp per class.
    fn log_probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        let member_logp = self
            .members
            .iter()
            .map(|m| m.log_probabilities(x))
            .collect::<Result<Vec<_>>>()?;
        Ok(mean_log_probs(&member_logp))
    }

    fn loss_and_input_gradient(&self, x: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_input(x, self.ambient_dim())?;
        check_target(target, self.class_count())?;
        let traces: Vec<Trace> = self.members.iter().map(|m| m.trace(x)).collect();
        let member_logp: Vec<Vec<f64>> = traces.iter().map(|t| log_softmax(&t.logits)).collect();
        let mean_logp = mean_log_probs(&member_logp);
        let loss = cross_entropy_from_log(&mean_logp, target);
        let n = self.members.len() as f64;
        let mut grad = vec![0.0; x.len()];
        for ((m, trace), logp) in self.members.iter().zip(&traces).zip(&member_logp) {
            // With r_i = p_i^m / p̄_i:
            // ∂L/∂z_j^m = (1/N) p_j^m (Σ_i t_i r_i − t_j / p̄_j)
            let ratio: Vec<f64> = logp.iter().zip(&mean_logp).map(|(a, b)| (a - b).exp()).collect();
            let s: f64 = ratio.iter().zip(target).map(|(r, t)| r * t).sum();
            let dlogits: Vec<f64> = logp
                .iter()
                .zip(&ratio)
                .zip(target)
                .map(|((l, r), t)| (l.exp() * s - t * r) / n)
                .collect();
            for (g, v) in grad.iter_mut().zip(m.backward(trace, &dlogits, None)) {
                *g += v;
            }
        }
        Ok((loss, grad))
    }

    fn describe(&self) -> String {
        format!("ensemble(N={}, mlp{:?})", self.members.len(), self.members[0].layer_dims)
    }
}

fn mean_log_probs(member_logp: &[Vec<f64>]) -> Vec<f64> {
    let n = member_logp.len() as f64;
    (0..member_logp[0].len())
        .map(|c| {
            let col: Vec<f64> = member_logp.iter().map(|l| l[c]).collect();
            log_sum_exp(&col) - n.ln()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    SgdMomentum {
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_momentum() -> f64 {
    0.9
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::default(),
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 32,
            l2: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || self.epochs == 0 || self.batch_size == 0 || !(self.l2 >= 0.0) {
            return Err(Error::InvalidParameter(
                "training needs learning_rate ≥ 0, l2 ≥ 0, epochs ≥ 1, batch_size ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

/// Mini-batch trainer; one call to [`Trainer::run_epoch`] per epoch.
pub struct Trainer {
    model: MlpModel,
    config: TrainConfig,
    rng: crate::rng::Rng,
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: MlpModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let n = model.parameter_count();
        let rng = rng_from_seed(config.seed);
        Ok(Self { model, config, rng, first: vec![0.0; n], second: vec![0.0; n], step: 0, epoch: 0 })
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }

    pub fn into_model(self) -> MlpModel {
        self.model
    }

    pub fn run_epoch(&mut self, train: &Dataset, test: Option<&Dataset>) -> Result<EpochMetrics> {
        if train.dim() != self.model.ambient_dim() {
            return Err(Error::DimensionMismatch { expected: self.model.ambient_dim(), got: train.dim() });
        }
        if train.class_count() > self.model.class_count() {
            return Err(Error::ClassOutOfRange { class: train.class_count() - 1, class_count: self.model.class_count() });
        }
        let c = self.model.class_count();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut grad = vec![0.0; self.model.parameter_count()];
        let mut target = vec![0.0; c];
        for batch in order.chunks(self.config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut batch_loss = 0.0;
            for &i in batch {
                let y = train.labels()[i];
                target[y] = 1.0;
                let trace = self.model.trace(train.input(i));
                let logp = log_softmax(&trace.logits);
                batch_loss -= logp[y];
                let dlogits: Vec<f64> = logp.iter().zip(&target).map(|(l, t)| l.exp() - t).collect();
                self.model.backward(&trace, &dlogits, Some(&mut grad));
                target[y] = 0.0;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence { step: self.step as usize });
            }
            let scale = 1.0 / batch.len() as f64;
            for (i, g) in grad.iter_mut().enumerate() {
                *g *= scale;
                if self.config.l2 > 0.0 && self.model.is_weight(i) {
                    *g += self.config.l2 * self.model.params[i];
                }
            }
            self.apply(&grad);
        }
        self.epoch += 1;
        let (train_loss, train_acc) = self.model.evaluate_dataset(train)?;
        if !train_loss.is_finite() {
            return Err(Error::Divergence { step: self.step as usize });
        }
        let test_acc = match test {
            Some(t) => Some(self.model.evaluate_dataset(t)?.1),
            None => None,
        };
        Ok(EpochMetrics { epoch: self.epoch, train_loss, train_acc, test_acc })
    }

    fn apply(&mut self, grad: &[f64]) {
        self.step += 1;
        let lr = self.config.learning_rate;
        match self.config.optimizer {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in self
                    .model
                    .params
                    .iter_mut()
                    .zip(grad)
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
            OptimizerKind::SgdMomentum { momentum } => {
                for ((p, g), m) in self.model.params.iter_mut().zip(grad).zip(self.first.iter_mut()) {
                    *m = momentum * *m + g;
                    *p -= lr * *m;
                }
            }
        }
    }
}

pub struct TrainOutcome {
    pub model: MlpModel,
    pub history: Vec<EpochMetrics>,
}

pub fn train(model: MlpModel, train_set: &Dataset, test_set: Option<&Dataset>, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        history.push(trainer.run_epoch(train_set, test_set)?);
    }
    Ok(TrainOutcome { model: trainer.into_model(), history })
}

const MAGIC: &[u8; 4] = b"STMP";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Layout (all little-endian): magic `STMP`, `u32` version, `u32` number of
/// layer dims, that many `u32` dims, `u64` parameter count, then the
/// parameters as `f64` in storage order.
pub fn model_to_bytes(model: &MlpModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 4 * model.layer_dims.len() + 8 * model.params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.layer_dims.len() as u32).to_le_bytes());
    for &d in &model.layer_dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for p in &model.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::MalformedModel {
                offset: self.pos,
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<MlpModel> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::MalformedModel { offset: 0, reason: "bad magic bytes".into() });
    }
    let version = c.u32("version")?;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: MODEL_FORMAT_VERSION });
    }
    let at = c.pos;
    let n_dims = c.u32("layer count")? as usize;
    if !(2..=64).contains(&n_dims) {
        return Err(Error::MalformedModel { offset: at, reason: format!("implausible layer count {n_dims}") });
    }
    let mut dims = Vec::with_capacity(n_dims);
    for _ in 0..n_dims {
        dims.push(c.u32("layer dims")? as usize);
    }
    let expected = MlpModel::zeros(&dims)
        .map_err(|e| Error::MalformedModel { offset: at, reason: e.to_string() })?
        .parameter_count();
    let at = c.pos;
    let count = c.u64("parameter count")? as usize;
    if count != expected {
        return Err(Error::MalformedModel {
            offset: at,
            reason: format!("parameter count {count} does not match layer dims ({expected})"),
        });
    }
    let raw = c.take(8 * count, "parameters")?;
    let params = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    if c.pos != bytes.len() {
        return Err(Error::MalformedModel { offset: c.pos, reason: "trailing bytes".into() });
    }
    MlpModel::from_params(&dims, params)
}

pub fn save_model(model: &MlpModel, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<MlpModel> {
    model_from_bytes(&std::fs::read(path)?)
}
