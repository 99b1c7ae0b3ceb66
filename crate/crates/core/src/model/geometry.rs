//! Shape inference, receptive-field calculus and the vNet constraint report.

use super::spec::{ArchitectureConfig, ConfigError, LayerKind, Tap, INPUT_CHANNELS, INPUT_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerShape {
    Spatial { channels: usize, h: usize, w: usize },
    Flat { features: usize },
}

/// Where a layer reads its main input from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Image,
    Layer(usize),
}

/// Per-layer wiring and output shape, in config order.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedLayer {
    pub input: Source,
    pub residual: Option<usize>,
    pub input_shape: LayerShape,
    pub output: LayerShape,
}

fn out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (stride > 0 && k > 0 && padded >= k).then(|| (padded - k) / stride + 1)
}

/// Resolves wiring and computes every layer's output shape for a 224×224×3 input.
pub fn resolve(config: &ArchitectureConfig) -> Result<Vec<ResolvedLayer>, ConfigError> {
    let mut out: Vec<ResolvedLayer> = Vec::with_capacity(config.layers.len());
    let mut main: Source = Source::Image;
    let image = LayerShape::Spatial { channels: INPUT_CHANNELS, h: INPUT_SIZE, w: INPUT_SIZE };
    let find_earlier = |name: &str, upto: usize| -> Option<usize> {
        config.layers[..upto].iter().position(|l| l.name == name)
    };
    for (i, l) in config.layers.iter().enumerate() {
        let err = |d: String| ConfigError::layer(&l.name, d);
        let shape_of = |s: Source, done: &[ResolvedLayer]| match s {
            Source::Image => image,
            Source::Layer(j) => done[j].output,
        };
        let (input, residual) = match l.kind {
            LayerKind::Shortcut => {
                let src = l.residual_source.as_deref().ok_or_else(|| err("shortcut needs an input source".into()))?;
                let j = find_earlier(src, i).ok_or_else(|| err(format!("source `{src}` is not an earlier layer")))?;
                (Source::Layer(j), None)
            }
            _ => {
                let residual = match &l.residual_source {
                    None => None,
                    Some(src) => {
                        if l.kind != LayerKind::Conv {
                            return Err(err("only conv layers take a residual source".into()));
                        }
                        Some(find_earlier(src, i).ok_or_else(|| err(format!("residual source `{src}` is not an earlier layer")))?)
                    }
                };
                (main, residual)
            }
        };
        let input_shape = shape_of(input, &out);
        let output = match (l.kind, input_shape) {
            (LayerKind::Conv | LayerKind::Shortcut, LayerShape::Spatial { channels, h, w }) => {
                if l.channels_out == 0 {
                    return Err(err("convolution needs a positive channel count".into()));
                }
                if let Some(g) = l.norm.groups_for(l.channels_out) {
                    if g == 0 || l.channels_out % g != 0 {
                        return Err(err(format!("{} channels not divisible into {g} groups", l.channels_out)));
                    }
                }
                let oh = out_dim(h, l.kernel.0, l.stride, l.padding);
                let ow = out_dim(w, l.kernel.1, l.stride, l.padding);
                let _ = channels;
                match (oh, ow) {
                    (Some(oh), Some(ow)) => LayerShape::Spatial { channels: l.channels_out, h: oh, w: ow },
                    _ => return Err(err(format!("kernel {:?} does not fit a {h}x{w} input", l.kernel))),
                }
            }
            (LayerKind::MaxPool, LayerShape::Spatial { channels, h, w }) => {
                if l.kernel.0 != l.kernel.1 {
                    return Err(err("max pooling windows must be square".into()));
                }
                if l.padding >= l.kernel.0 {
                    return Err(err("pool padding must be smaller than the window".into()));
                }
                match (out_dim(h, l.kernel.0, l.stride, l.padding), out_dim(w, l.kernel.1, l.stride, l.padding)) {
                    (Some(oh), Some(ow)) => LayerShape::Spatial { channels, h: oh, w: ow },
                    _ => return Err(err(format!("window {:?} does not fit a {h}x{w} input", l.kernel))),
                }
            }
            (LayerKind::GlobalAvgPool, LayerShape::Spatial { channels, .. }) => LayerShape::Flat { features: channels },
            (LayerKind::Linear, LayerShape::Flat { .. }) => LayerShape::Flat { features: l.channels_out },
            (LayerKind::Linear, _) => return Err(err("linear layer needs a pooled feature vector input".into())),
            (_, LayerShape::Flat { .. }) => return Err(err("spatial layer after flattening".into())),
        };
        if let Some(r) = residual {
            if out[r].output != output {
                return Err(err(format!(
                    "residual source `{}` has shape {:?}, layer output is {:?}",
                    config.layers[r].name, out[r].output, output
                )));
            }
        }
        if l.tap.is_some() && !matches!(output, LayerShape::Spatial { .. }) {
            return Err(err("GradCAM taps must be spatial activations".into()));
        }
        out.push(ResolvedLayer { input, residual, input_shape, output });
        if l.kind != LayerKind::Shortcut {
            main = Source::Layer(i);
        }
    }
    Ok(out)
}

pub fn layer_shapes(config: &ArchitectureConfig) -> Result<Vec<LayerShape>, ConfigError> {
    Ok(resolve(config)?.into_iter().map(|r| r.output).collect())
}

/// Spatial size of a layer's activation for a 224×224 input.
pub fn output_grid(config: &ArchitectureConfig, layer_name: &str) -> Result<(usize, usize), ConfigError> {
    let idx = config
        .layers
        .iter()
        .position(|l| l.name == layer_name)
        .ok_or_else(|| ConfigError::UnknownLayer(layer_name.to_string()))?;
    match resolve(config)?[idx].output {
        LayerShape::Spatial { h, w, .. } => Ok((h, w)),
        LayerShape::Flat { .. } => Err(ConfigError::layer(layer_name, "layer output is not spatial")),
    }
}

pub fn tap_grid(config: &ArchitectureConfig, tap: Tap) -> Result<(usize, usize), ConfigError> {
    let layer = config
        .tap_layer(tap)
        .ok_or_else(|| ConfigError::Global(format!("no layer tagged `{tap}`")))?;
    output_grid(config, &layer.name)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReceptiveField {
    pub layer: String,
    /// Receptive field size in input pixels.
    pub size: usize,
    /// Distance in input pixels between adjacent units (cumulative stride).
    pub jump: usize,
}

/// Theoretical receptive field along the main path:
/// `r ← r + (k − 1)·j`, `j ← j·s`, starting from `r = j = 1`.
///
/// Only geometry-changing layers (convolutions and max pools) contribute
/// entries; shortcut branches and the classifier head are skipped.
pub fn theoretical_rfs(config: &ArchitectureConfig) -> Vec<ReceptiveField> {
    let (mut r, mut j) = (1usize, 1usize);
    let mut out = Vec::new();
    for l in &config.layers {
        if !matches!(l.kind, LayerKind::Conv | LayerKind::MaxPool) {
            continue;
        }
        let k = l.kernel.0.max(l.kernel.1);
        r += k.saturating_sub(1) * j;
        j *= l.stride.max(1);
        out.push(ReceptiveField { layer: l.name.clone(), size: r, jump: j });
    }
    out
}

/// Final receptive field size of the main path (1 for an empty config).
pub fn final_rfs(config: &ArchitectureConfig) -> usize {
    theoretical_rfs(config).last().map_or(1, |rf| rf.size)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VnetReport {
    pub checks: Vec<ConstraintCheck>,
}

impl VnetReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&ConstraintCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

pub const CHECK_CONV_COUNT: &str = "ten_conv_layers";
pub const CHECK_RFS_INCREASING: &str = "strictly_increasing_rfs";
pub const CHECK_LATE_GRID: &str = "late_grid_4x4";

/// The three geometric properties a vNet-style table must have. Failures are
/// reported, never raised.
pub fn validate_vnet_constraints(config: &ArchitectureConfig) -> VnetReport {
    let convs: Vec<&str> = config
        .layers
        .iter()
        .filter(|l| l.kind == LayerKind::Conv)
        .map(|l| l.name.as_str())
        .collect();
    let count = ConstraintCheck {
        name: CHECK_CONV_COUNT,
        passed: convs.len() == 10,
        detail: format!("{} convolutional layers", convs.len()),
    };

    let rfs = theoretical_rfs(config);
    let conv_rfs: Vec<usize> = rfs.iter().filter(|rf| convs.contains(&rf.layer.as_str())).map(|rf| rf.size).collect();
    let violation = conv_rfs.windows(2).position(|w| w[1] <= w[0]);
    let increasing = ConstraintCheck {
        name: CHECK_RFS_INCREASING,
        passed: !conv_rfs.is_empty() && violation.is_none() && conv_rfs[0] > 1,
        detail: match violation {
            Some(i) => format!("RFS {} -> {} at conv {}", conv_rfs[i], conv_rfs[i + 1], i + 2),
            None => format!("conv RFS sequence {conv_rfs:?}"),
        },
    };

    let late = match tap_grid(config, Tap::Late) {
        Ok(g) => ConstraintCheck { name: CHECK_LATE_GRID, passed: g == (4, 4), detail: format!("late grid {}x{}", g.0, g.1) },
        Err(e) => ConstraintCheck { name: CHECK_LATE_GRID, passed: false, detail: e.to_string() },
    };
    VnetReport { checks: vec![count, increasing, late] }
}
