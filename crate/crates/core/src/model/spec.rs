//! Declarative layer tables and their text file format.
//!
//! One layer per line:
//!
//! ```text
//! name kind kh kw stride pad channels norm residual_source tap
//! ```
//!
//! `-` marks an empty field and `#` starts a comment. Kinds:
//!
//! * `conv`: convolution, optional normalization, optional residual add of
//!   `residual_source`, then ReLU.
//! * `shortcut`: convolution plus normalization without ReLU, reading from
//!   the layer named in `residual_source`. Shortcuts are side branches: the
//!   next main-path layer still reads the last non-shortcut output.
//! * `maxpool`: `kh×kw` window maxima.
//! * `gap`: global average pool to a feature vector.
//! * `linear`: fully connected layer with `channels` outputs.
//!
//! `norm` is one of `none`, `batch`, `group` (default group count) or
//! `group:G`. `tap` is `early`, `middle`, `late` or `-`.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Spatial input size every configuration is built for.
pub const INPUT_SIZE: usize = 224;
pub const INPUT_CHANNELS: usize = 3;
/// Default upper bound on GroupNorm groups.
pub const DEFAULT_GROUPS: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("layer `{layer}`: {detail}")]
    Layer { layer: String, detail: String },
    #[error("configuration: {0}")]
    Global(String),
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
}

impl ConfigError {
    pub(crate) fn layer(layer: &str, detail: impl Into<String>) -> Self {
        ConfigError::Layer { layer: layer.to_string(), detail: detail.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    Shortcut,
    MaxPool,
    GlobalAvgPool,
    Linear,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Shortcut => "shortcut",
            LayerKind::MaxPool => "maxpool",
            LayerKind::GlobalAvgPool => "gap",
            LayerKind::Linear => "linear",
        }
    }

    pub fn is_convolution(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::Shortcut)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    None,
    Batch,
    /// Group normalization; `None` picks `min(32, channels)`.
    Group(Option<usize>),
}

impl Norm {
    /// Group count actually used for `channels` channels.
    pub fn groups_for(self, channels: usize) -> Option<usize> {
        match self {
            Norm::Group(Some(g)) => Some(g),
            Norm::Group(None) => Some(DEFAULT_GROUPS.min(channels)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tap {
    Early,
    Middle,
    Late,
}

impl Tap {
    pub const ALL: [Tap; 3] = [Tap::Early, Tap::Middle, Tap::Late];

    pub fn as_str(self) -> &'static str {
        match self {
            Tap::Early => "early",
            Tap::Middle => "middle",
            Tap::Late => "late",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tap {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "early" => Ok(Tap::Early),
            "middle" => Ok(Tap::Middle),
            "late" => Ok(Tap::Late),
            other => Err(format!("unknown tap `{other}` (expected early, middle or late)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub channels_out: usize,
    pub norm: Norm,
    pub residual_source: Option<String>,
    pub tap: Option<Tap>,
}

impl LayerSpec {
    pub fn conv(name: &str, k: usize, stride: usize, padding: usize, channels: usize, norm: Norm) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind: LayerKind::Conv,
            kernel: (k, k),
            stride,
            padding,
            channels_out: channels,
            norm,
            residual_source: None,
            tap: None,
        }
    }

    pub fn maxpool(name: &str, k: usize, stride: usize, padding: usize) -> Self {
        LayerSpec { kind: LayerKind::MaxPool, channels_out: 0, norm: Norm::None, ..Self::conv(name, k, stride, padding, 0, Norm::None) }
    }

    pub fn gap(name: &str) -> Self {
        LayerSpec { kind: LayerKind::GlobalAvgPool, ..Self::conv(name, 1, 1, 0, 0, Norm::None) }
    }

    pub fn linear(name: &str, outputs: usize) -> Self {
        LayerSpec { kind: LayerKind::Linear, ..Self::conv(name, 1, 1, 0, outputs, Norm::None) }
    }

    pub fn with_residual(mut self, source: &str) -> Self {
        self.residual_source = Some(source.to_string());
        self
    }

    pub fn with_tap(mut self, tap: Tap) -> Self {
        self.tap = Some(tap);
        self
    }

    pub fn as_shortcut(mut self, source: &str) -> Self {
        self.kind = LayerKind::Shortcut;
        self.residual_source = Some(source.to_string());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchLabel {
    Resnet18,
    Vnet,
    Custom,
}

impl ArchLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            ArchLabel::Resnet18 => "resnet18",
            ArchLabel::Vnet => "vnet",
            ArchLabel::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureConfig {
    pub label: ArchLabel,
    pub layers: Vec<LayerSpec>,
}

impl ArchitectureConfig {
    pub fn new(label: ArchLabel, layers: Vec<LayerSpec>) -> Self {
        ArchitectureConfig { label, layers }
    }

    pub fn input_size(&self) -> (usize, usize, usize) {
        (INPUT_SIZE, INPUT_SIZE, INPUT_CHANNELS)
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.channels_out)
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn tap_layer(&self, tap: Tap) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.tap == Some(tap))
    }

    /// Checks structure and geometry; errors name the offending layer.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.layers.is_empty() {
            return Err(ConfigError::Global("no layers".into()));
        }
        let mut seen = HashSet::new();
        for l in &self.layers {
            if !seen.insert(l.name.as_str()) {
                return Err(ConfigError::layer(&l.name, "duplicate layer name"));
            }
        }
        for tap in Tap::ALL {
            let n = self.layers.iter().filter(|l| l.tap == Some(tap)).count();
            if n != 1 {
                return Err(ConfigError::Global(format!("expected exactly one `{tap}` tap, found {n}")));
            }
        }
        let last = self.layers.last().expect("non-empty");
        if last.kind != LayerKind::Linear {
            return Err(ConfigError::layer(&last.name, "final layer must be a linear classifier"));
        }
        if let Some(l) = self.layers[..self.layers.len() - 1].iter().find(|l| l.kind == LayerKind::Linear) {
            return Err(ConfigError::layer(&l.name, "only the final layer may be linear"));
        }
        if last.channels_out == 0 {
            return Err(ConfigError::layer(&last.name, "classifier needs at least one class"));
        }
        super::geometry::layer_shapes(self).map(|_| ())
    }

    /// Serialises to the line format understood by [`ArchitectureConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# architecture: {}\n", self.label.as_str()));
        out.push_str("# name kind kh kw stride pad channels norm residual_source tap\n");
        for l in &self.layers {
            let norm = match l.norm {
                Norm::None => "none".to_string(),
                Norm::Batch => "batch".to_string(),
                Norm::Group(None) => "group".to_string(),
                Norm::Group(Some(g)) => format!("group:{g}"),
            };
            let dash = |o: Option<String>| o.unwrap_or_else(|| "-".into());
            let (geom, channels) = match l.kind {
                LayerKind::GlobalAvgPool => ("- - - -".to_string(), "-".to_string()),
                LayerKind::MaxPool => (format!("{} {} {} {}", l.kernel.0, l.kernel.1, l.stride, l.padding), "-".into()),
                _ => (format!("{} {} {} {}", l.kernel.0, l.kernel.1, l.stride, l.padding), l.channels_out.to_string()),
            };
            out.push_str(&format!(
                "{} {} {} {} {} {} {}\n",
                l.name,
                l.kind.as_str(),
                geom,
                channels,
                norm,
                dash(l.residual_source.clone()),
                dash(l.tap.map(|t| t.as_str().to_string())),
            ));
        }
        out
    }

    /// Parses the line format. The result carries label `custom` unless a
    /// `# architecture: <label>` comment names a built-in family.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut label = ArchLabel::Custom;
        let mut layers = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            if let Some(rest) = raw.trim().strip_prefix('#') {
                if let Some(l) = rest.trim().strip_prefix("architecture:") {
                    label = match l.trim() {
                        "resnet18" => ArchLabel::Resnet18,
                        "vnet" => ArchLabel::Vnet,
                        _ => ArchLabel::Custom,
                    };
                }
                continue;
            }
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            layers.push(parse_line(line).map_err(|detail| ConfigError::Parse { line: line_no, detail })?);
        }
        let cfg = ArchitectureConfig { label, layers };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_line(line: &str) -> Result<LayerSpec, String> {
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != 10 {
        return Err(format!("expected 10 fields, found {}", f.len()));
    }
    let kind = match f[1] {
        "conv" => LayerKind::Conv,
        "shortcut" => LayerKind::Shortcut,
        "maxpool" => LayerKind::MaxPool,
        "gap" => LayerKind::GlobalAvgPool,
        "linear" => LayerKind::Linear,
        other => return Err(format!("unknown kind `{other}`")),
    };
    let num = |idx: usize, default: usize| -> Result<usize, String> {
        if f[idx] == "-" {
            Ok(default)
        } else {
            f[idx].parse().map_err(|_| format!("field {} (`{}`) is not a non-negative integer", idx + 1, f[idx]))
        }
    };
    let norm = match f[7] {
        "none" | "-" => Norm::None,
        "batch" => Norm::Batch,
        "group" => Norm::Group(None),
        other => match other.strip_prefix("group:") {
            Some(g) => Norm::Group(Some(g.parse().map_err(|_| format!("bad group count in `{other}`"))?)),
            None => return Err(format!("unknown norm `{other}`")),
        },
    };
    let opt = |s: &str| (s != "-").then(|| s.to_string());
    let tap = match f[9] {
        "-" => None,
        t => Some(t.parse::<Tap>()?),
    };
    let spec = LayerSpec {
        name: f[0].to_string(),
        kind,
        kernel: (num(2, 1)?, num(3, 1)?),
        stride: num(4, 1)?,
        padding: num(5, 0)?,
        channels_out: num(6, 0)?,
        norm,
        residual_source: opt(f[8]),
        tap,
    };
    Ok(spec)
}
