//! Supervised training from scratch and classifier-only fine-tuning.

pub mod data;

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use data::{balanced_sample, load_training_set, load_with_stats, preprocess, ChannelStats, DatasetIndex, LoadedDataset};

use crate::autodiff::{Graph, GraphError};
use crate::model::{argmax_rows, Mode, Model, ModelError, ParamGrads, Provenance};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cannot ingest {path}: {detail}")]
    Ingest { path: PathBuf, detail: String },
    #[error("input error: {0}")]
    Input(String),
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("internal error: {0}")]
    Internal(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub fine_tune: bool,
    pub fine_tune_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 80,
            batch_size: 128,
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            fine_tune: false,
            fine_tune_epochs: 50,
        }
    }
}

impl TrainConfig {
    /// Epoch counts may be zero (a no-op run); everything else must be positive,
    /// except that momentum and weight decay may be switched off with 0.
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |what: &str| Err(TrainError::Config(format!("{what} out of range")));
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay");
        }
        Ok(())
    }
}

/// Per-epoch cosine decay from `lr0` towards zero at `epochs`.
pub fn cosine_lr(epoch: usize, epochs: usize, lr0: f64) -> Result<f64, TrainError> {
    if epoch >= epochs {
        return Err(TrainError::Input(format!("epoch {epoch} outside 0..{epochs}")));
    }
    Ok(0.5 * lr0 * (1.0 + (PI * epoch as f64 / epochs as f64).cos()))
}

/// SGD with heavy-ball momentum and L2 weight decay added to the gradient.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    trainable: BTreeSet<String>,
    velocity: BTreeMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(config: &TrainConfig, trainable: BTreeSet<String>) -> Self {
        Sgd { momentum: config.momentum, weight_decay: config.weight_decay, trainable, velocity: BTreeMap::new() }
    }

    pub fn velocity(&self, name: &str) -> Option<&[f32]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    /// `v ← m·v + g + wd·w`, `w ← w − lr·v` for every trainable parameter.
    /// `grads` must name exactly the trainable set.
    pub fn step(&mut self, model: &mut Model, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<(), TrainError> {
        let names: BTreeSet<&String> = grads.keys().collect();
        if names != self.trainable.iter().collect() {
            return Err(TrainError::Internal("gradient names do not match the trainable parameters".into()));
        }
        let params = model.params_mut();
        for (name, g) in grads {
            let w = params.get_mut(name).ok_or_else(|| TrainError::Internal(format!("unknown parameter `{name}`")))?;
            if w.shape() != g.shape() {
                return Err(TrainError::Internal(format!("gradient shape mismatch for `{name}`")));
            }
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; w.len()]);
            for ((wi, vi), &gi) in w.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                let nv = self.momentum * *vi as f64 + gi as f64 + self.weight_decay * *wi as f64;
                *vi = nv as f32;
                *wi = (*wi as f64 - lr * nv) as f32;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Sample-weighted mean cross-entropy over the epoch.
    pub loss: f64,
    /// Fraction of training samples the model classified correctly while
    /// training on them.
    pub train_acc: f64,
    pub lr: f64,
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,loss,train_acc,lr\n");
    for m in metrics {
        out.push_str(&format!("{},{:.8},{:.6},{:.8}\n", m.epoch, m.loss, m.train_acc, m.lr));
    }
    out
}

fn diverged(e: ModelError, epoch: usize, batch: usize) -> TrainError {
    match e {
        ModelError::Graph(GraphError::NonFinite { .. }) => TrainError::Diverged { epoch, batch },
        other => TrainError::Model(other),
    }
}

fn epoch_order(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

fn check_classes(model: &Model, data: &LoadedDataset) -> Result<(), TrainError> {
    if model.config().num_classes() != data.num_classes {
        return Err(TrainError::Config(format!(
            "model has {} outputs, dataset has {} categories",
            model.config().num_classes(),
            data.num_classes
        )));
    }
    Ok(())
}

/// Trains every parameter. Batch-norm running averages are updated after
/// each step; the returned model is marked as trained.
pub fn train(mut model: Model, data: &LoadedDataset, config: &TrainConfig) -> Result<(Model, Vec<EpochMetrics>), TrainError> {
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::Input("empty dataset".into()));
    }
    check_classes(&model, data)?;
    if config.epochs == 0 {
        return Ok((model, Vec::new()));
    }
    let mut sgd = Sgd::new(config, model.params().keys().cloned().collect());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = cosine_lr(epoch, config.epochs, config.lr0)?;
        let order = epoch_order(&mut rng, data.len());
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let (images, labels) = data.batch(idx);
            let mut g = Graph::new();
            let x = g.leaf(images, false);
            let pass = model.forward(&mut g, x, Mode::Train, ParamGrads::All).map_err(|e| diverged(e, epoch, batch))?;
            let loss = g
                .softmax_cross_entropy(pass.logits, &labels)
                .map_err(|e| diverged(e.into(), epoch, batch))?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(TrainError::Diverged { epoch, batch });
            }
            let mut grads = g.backward(loss).map_err(|e| diverged(e.into(), epoch, batch))?;
            let named: BTreeMap<String, Tensor> = pass
                .params
                .iter()
                .map(|(n, &id)| (n.clone(), grads.take(id).expect("tracked parameter")))
                .collect();
            correct += argmax_rows(g.value(pass.logits)).iter().zip(&labels).filter(|(p, l)| p == l).count();
            loss_sum += value * labels.len() as f64;
            model.update_running_stats(&g, &pass);
            sgd.step(&mut model, &named, lr)?;
        }
        let n = data.len() as f64;
        metrics.push(EpochMetrics { epoch, loss: loss_sum / n, train_acc: correct as f64 / n, lr });
    }
    model.provenance = Provenance::Trained;
    Ok((model, metrics))
}

/// Eval-mode backbone features for the whole dataset, `[N, F]` rows in
/// dataset order.
pub fn extract_features(model: &Model, data: &LoadedDataset, batch_size: usize) -> Result<Vec<Vec<f32>>, TrainError> {
    let mut out = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(batch_size.max(1)) {
        let (images, _) = data.batch(idx);
        let f = model.features(&images)?;
        let (_, width) = f.dims2().expect("[N,F] features");
        out.extend(f.data().chunks(width).map(<[f32]>::to_vec));
    }
    Ok(out)
}

/// Replaces the classifier with fresh weights and trains only it for
/// `fine_tune_epochs`; every other tensor is left untouched.
///
/// The backbone runs in eval mode, so its features are computed once and
/// reused for every epoch.
pub fn fine_tune(mut model: Model, data: &LoadedDataset, config: &TrainConfig) -> Result<(Model, Vec<EpochMetrics>), TrainError> {
    config.validate()?;
    if matches!(model.provenance, Provenance::Initialized { .. }) {
        return Err(TrainError::Config("fine-tuning needs pretrained weights, got a freshly initialized model".into()));
    }
    if data.is_empty() {
        return Err(TrainError::Input("empty dataset".into()));
    }
    check_classes(&model, data)?;
    model.reset_classifier(config.seed)?;
    let head = model.classifier_params();
    let weight_name = head.iter().find(|n| n.ends_with(".weight")).expect("classifier weight").clone();
    let bias_name = head.iter().find(|n| n.ends_with(".bias")).expect("classifier bias").clone();
    let features = extract_features(&model, data, config.batch_size)?;
    let width = features.first().map_or(0, Vec::len);

    let mut sgd = Sgd::new(config, head.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut metrics = Vec::with_capacity(config.fine_tune_epochs);
    for epoch in 0..config.fine_tune_epochs {
        let lr = cosine_lr(epoch, config.fine_tune_epochs, config.lr0)?;
        let order = epoch_order(&mut rng, data.len());
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let rows: Vec<f32> = idx.iter().flat_map(|&i| features[i].iter().copied()).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let mut g = Graph::new();
            let x = g.leaf(Tensor::new(vec![idx.len(), width], rows).expect("feature rows"), false);
            let w = g.leaf(model.params()[&weight_name].clone(), true);
            let b = g.leaf(model.params()[&bias_name].clone(), true);
            let step = |g: &mut Graph| -> Result<_, GraphError> {
                let logits = g.linear(x, w, b)?;
                let loss = g.softmax_cross_entropy(logits, &labels)?;
                Ok((logits, loss))
            };
            let (logits, loss) = step(&mut g).map_err(|e| diverged(e.into(), epoch, batch))?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(TrainError::Diverged { epoch, batch });
            }
            let mut grads = g.backward(loss).map_err(|e| diverged(e.into(), epoch, batch))?;
            let named = BTreeMap::from([
                (weight_name.clone(), grads.take(w).expect("tracked")),
                (bias_name.clone(), grads.take(b).expect("tracked")),
            ]);
            correct += argmax_rows(g.value(logits)).iter().zip(&labels).filter(|(p, l)| p == l).count();
            loss_sum += value * labels.len() as f64;
            sgd.step(&mut model, &named, lr)?;
        }
        let n = data.len() as f64;
        metrics.push(EpochMetrics { epoch, loss: loss_sum / n, train_acc: correct as f64 / n, lr });
    }
    model.provenance = Provenance::Trained;
    Ok((model, metrics))
}

/// Eval-mode top-1 predictions in dataset order.
pub fn predict(model: &Model, data: &LoadedDataset, batch_size: usize) -> Result<Vec<usize>, TrainError> {
    let all: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for idx in all.chunks(batch_size.max(1)) {
        let (images, _) = data.batch(idx);
        out.extend(argmax_rows(&model.predict_logits(&images)?));
    }
    Ok(out)
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    predictions.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}
