use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use super::geometry::{resolve, LayerShape, ResolvedLayer, Source};
use super::spec::{ArchitectureConfig, ConfigError, LayerKind, Norm, Tap};
use crate::autodiff::{Graph, GraphError, NodeId};
use crate::tensor::Tensor;

/// Momentum of the batch-norm running averages.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("parameter `{name}`: {detail}")]
    Parameter { name: String, detail: String },
}

/// How the parameters came to be.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    Initialized { seed: u64 },
    Loaded { path: String },
    Trained,
}

/// Batch-norm statistics source and gradient scope for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages may be updated afterwards.
    Train,
    /// Running statistics.
    Eval,
}

/// Which parameters get gradient-tracking leaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGrads {
    All,
    None,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ArchitectureConfig,
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
    pub provenance: Provenance,
}

/// Named shape of every parameter and buffer implied by a config.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub params: Vec<(String, Vec<usize>, Init)>,
    pub buffers: Vec<(String, Vec<usize>, Init)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    HeNormal { fan_in: usize },
    Constant(f32),
}

pub fn layout(config: &ArchitectureConfig) -> Result<Layout, ConfigError> {
    let resolved = resolve(config)?;
    let mut params = Vec::new();
    let mut buffers = Vec::new();
    for (l, r) in config.layers.iter().zip(&resolved) {
        match l.kind {
            LayerKind::Conv | LayerKind::Shortcut => {
                let LayerShape::Spatial { channels: cin, .. } = r.input_shape else {
                    unreachable!("validated spatial input");
                };
                let c = l.channels_out;
                let fan_in = cin * l.kernel.0 * l.kernel.1;
                params.push((format!("{}.weight", l.name), vec![c, cin, l.kernel.0, l.kernel.1], Init::HeNormal { fan_in }));
                match l.norm {
                    Norm::None => params.push((format!("{}.bias", l.name), vec![c], Init::Constant(0.0))),
                    Norm::Batch | Norm::Group(_) => {
                        params.push((format!("{}.gamma", l.name), vec![c], Init::Constant(1.0)));
                        params.push((format!("{}.beta", l.name), vec![c], Init::Constant(0.0)));
                    }
                }
                if l.norm == Norm::Batch {
                    buffers.push((format!("{}.running_mean", l.name), vec![c], Init::Constant(0.0)));
                    buffers.push((format!("{}.running_var", l.name), vec![c], Init::Constant(1.0)));
                }
            }
            LayerKind::Linear => {
                let LayerShape::Flat { features } = r.input_shape else {
                    unreachable!("validated flat input");
                };
                params.push((format!("{}.weight", l.name), vec![l.channels_out, features], Init::HeNormal { fan_in: features }));
                params.push((format!("{}.bias", l.name), vec![l.channels_out], Init::Constant(0.0)));
            }
            LayerKind::MaxPool | LayerKind::GlobalAvgPool => {}
        }
    }
    Ok(Layout { params, buffers })
}

fn init_tensor(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Tensor {
    match init {
        Init::Constant(v) => Tensor::filled(shape, v),
        Init::HeNormal { fan_in } => {
            let std = (2.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| (rng.sample::<f64, _>(StandardNormal) * std) as f32)
        }
    }
}

/// Node handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: NodeId,
    /// Input to the final classifier.
    pub features: NodeId,
    pub taps: [NodeId; 3],
    pub params: BTreeMap<String, NodeId>,
    /// Training-mode batch-norm nodes, by layer name.
    pub batch_norms: Vec<(String, NodeId)>,
    pub layer_outputs: Vec<NodeId>,
}

impl ForwardPass {
    pub fn tap(&self, tap: Tap) -> NodeId {
        self.taps[tap.index()]
    }
}

impl Model {
    /// Fresh parameters: He-normal weights, zero biases, unit norm scales.
    /// Deterministic for a given seed.
    pub fn build(config: ArchitectureConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let lay = layout(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = lay.params.iter().map(|(n, s, i)| (n.clone(), init_tensor(s, *i, &mut rng))).collect();
        let buffers = lay.buffers.iter().map(|(n, s, i)| (n.clone(), init_tensor(s, *i, &mut rng))).collect();
        Ok(Model { config, params, buffers, provenance: Provenance::Initialized { seed } })
    }

    /// Assembles a model from named tensors, checking names and shapes
    /// against the config's layout.
    pub fn from_tensors(
        config: ArchitectureConfig,
        mut tensors: BTreeMap<String, Tensor>,
        provenance: Provenance,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let lay = layout(&config)?;
        let mut take = |list: &[(String, Vec<usize>, Init)]| -> Result<BTreeMap<String, Tensor>, ModelError> {
            let mut out = BTreeMap::new();
            for (name, shape, _) in list {
                let t = tensors
                    .remove(name)
                    .ok_or_else(|| ModelError::Parameter { name: name.clone(), detail: "missing".into() })?;
                if t.shape() != shape.as_slice() {
                    return Err(ModelError::Parameter {
                        name: name.clone(),
                        detail: format!("shape {:?}, layer expects {:?}", t.shape(), shape),
                    });
                }
                out.insert(name.clone(), t);
            }
            Ok(out)
        };
        let params = take(&lay.params)?;
        let buffers = take(&lay.buffers)?;
        if let Some(extra) = tensors.keys().next() {
            return Err(ModelError::Parameter { name: extra.clone(), detail: "not part of this architecture".into() });
        }
        Ok(Model { config, params, buffers, provenance })
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// All named tensors (parameters then buffers) in name order.
    pub fn tensors(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter().chain(self.buffers.iter())
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<(), ModelError> {
        match self.params.get_mut(name) {
            Some(slot) if slot.shape() == value.shape() => {
                *slot = value;
                Ok(())
            }
            Some(slot) => Err(ModelError::Parameter {
                name: name.into(),
                detail: format!("shape {:?}, expected {:?}", value.shape(), slot.shape()),
            }),
            None => Err(ModelError::Parameter { name: name.into(), detail: "unknown parameter".into() }),
        }
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    /// Names of the final classifier's parameters.
    pub fn classifier_params(&self) -> BTreeSet<String> {
        let last = &self.config.layers.last().expect("validated").name;
        [format!("{last}.weight"), format!("{last}.bias")].into_iter().collect()
    }

    /// Re-draws the classifier parameters from `seed`.
    pub fn reset_classifier(&mut self, seed: u64) -> Result<(), ModelError> {
        let lay = layout(&self.config)?;
        let names = self.classifier_params();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, shape, init) in lay.params.iter().filter(|(n, _, _)| names.contains(n)) {
            self.params.insert(name.clone(), init_tensor(shape, *init, &mut rng));
        }
        Ok(())
    }

    /// Records the network on `graph` for an `[N,3,224,224]` input node.
    pub fn forward(&self, graph: &mut Graph, input: NodeId, mode: Mode, grads: ParamGrads) -> Result<ForwardPass, ModelError> {
        let resolved = resolve(&self.config)?;
        let track = grads == ParamGrads::All;
        let mut params = BTreeMap::new();
        let mut leaf = |graph: &mut Graph, name: String| -> NodeId {
            let id = graph.leaf(self.params[&name].clone(), track);
            params.insert(name, id);
            id
        };
        let mut outputs: Vec<NodeId> = Vec::with_capacity(self.config.layers.len());
        let mut batch_norms = Vec::new();
        let mut taps = [None; 3];
        let mut features = None;
        for (l, r) in self.config.layers.iter().zip(&resolved) {
            let ResolvedLayer { input: src, residual, .. } = r;
            let x = match src {
                Source::Image => input,
                Source::Layer(j) => outputs[*j],
            };
            let name = &l.name;
            let y = match l.kind {
                LayerKind::Conv | LayerKind::Shortcut => {
                    let w = leaf(graph, format!("{name}.weight"));
                    let bias = (l.norm == Norm::None).then(|| leaf(graph, format!("{name}.bias")));
                    let mut h = graph.conv2d(x, w, bias, l.stride, l.padding)?;
                    match l.norm {
                        Norm::None => {}
                        Norm::Group(_) => {
                            let g = leaf(graph, format!("{name}.gamma"));
                            let b = leaf(graph, format!("{name}.beta"));
                            let groups = l.norm.groups_for(l.channels_out).expect("group norm");
                            h = graph.group_norm(h, g, b, groups)?;
                        }
                        Norm::Batch => {
                            let g = leaf(graph, format!("{name}.gamma"));
                            let b = leaf(graph, format!("{name}.beta"));
                            h = match mode {
                                Mode::Train => {
                                    let id = graph.batch_norm(h, g, b)?;
                                    batch_norms.push((name.clone(), id));
                                    id
                                }
                                Mode::Eval => graph.batch_norm_frozen(
                                    h,
                                    g,
                                    b,
                                    self.buffers[&format!("{name}.running_mean")].data(),
                                    self.buffers[&format!("{name}.running_var")].data(),
                                )?,
                            };
                        }
                    }
                    if let Some(ri) = residual {
                        h = graph.add(h, outputs[*ri])?;
                    }
                    if l.kind == LayerKind::Conv {
                        graph.relu(h)?
                    } else {
                        h
                    }
                }
                LayerKind::MaxPool => graph.maxpool(x, l.kernel.0, l.stride, l.padding)?,
                LayerKind::GlobalAvgPool => graph.global_avg_pool(x)?,
                LayerKind::Linear => {
                    features = Some(x);
                    let w = leaf(graph, format!("{name}.weight"));
                    let b = leaf(graph, format!("{name}.bias"));
                    graph.linear(x, w, b)?
                }
            };
            if let Some(t) = l.tap {
                taps[t.index()] = Some(y);
            }
            outputs.push(y);
        }
        let logits = *outputs.last().expect("validated non-empty");
        Ok(ForwardPass {
            logits,
            features: features.expect("validated classifier"),
            taps: taps.map(|t| t.expect("validated taps")),
            params,
            batch_norms,
            layer_outputs: outputs,
        })
    }

    /// Folds this pass's batch statistics into the running averages.
    pub fn update_running_stats(&mut self, graph: &Graph, pass: &ForwardPass) {
        for (layer, id) in &pass.batch_norms {
            let Some(stats) = graph.batch_stats(*id) else { continue };
            for (key, fresh) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                let buf = self.buffers.get_mut(&format!("{layer}.{key}")).expect("layout buffer");
                for (r, &s) in buf.data_mut().iter_mut().zip(fresh.iter()) {
                    *r = ((1.0 - BN_MOMENTUM) * *r as f64 + BN_MOMENTUM * s) as f32;
                }
            }
        }
    }

    /// Eval-mode logits for a batch `[N,3,224,224]`.
    pub fn predict_logits(&self, images: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let x = g.leaf(images.clone(), false);
        let pass = self.forward(&mut g, x, Mode::Eval, ParamGrads::None)?;
        Ok(g.value(pass.logits).clone())
    }

    /// Eval-mode features feeding the classifier, `[N, F]`.
    pub fn features(&self, images: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let x = g.leaf(images.clone(), false);
        let pass = self.forward(&mut g, x, Mode::Eval, ParamGrads::None)?;
        Ok(g.value(pass.features).clone())
    }
}

/// Index of the largest value per row of `[N,C]` logits (first on ties).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let (_, c) = logits.dims2().expect("[N,C] logits");
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
