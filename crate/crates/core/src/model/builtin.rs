//! Built-in layer tables.
//!
//! Both tables take a base width so that desk-scale runs can shrink the
//! channel counts without touching kernel, stride or padding geometry; all
//! grid sizes and receptive fields are independent of the width.

use super::spec::{ArchLabel, ArchitectureConfig, LayerSpec, Norm, Tap};

/// Canonical base width (first-stage channels).
pub const FULL_WIDTH: usize = 64;
pub const DEFAULT_CLASSES: usize = 12;

/// ResNet18-style table: 7×7/2 stem, 3×3/2 max pool, four stages of two basic
/// blocks at widths `w, 2w, 4w, 8w`, stride-2 transitions with 1×1
/// projection shortcuts, global average pool and linear classifier.
///
/// GradCAM taps sit on the outputs of stages 1, 3 and 4.
pub fn resnet18(width: usize, num_classes: usize) -> ArchitectureConfig {
    let bn = Norm::Batch;
    let mut layers = vec![
        LayerSpec::conv("stem_conv", 7, 2, 3, width, bn),
        LayerSpec::maxpool("stem_pool", 3, 2, 1),
    ];
    let mut prev = "stem_pool".to_string();
    for stage in 1..=4usize {
        let channels = width << (stage - 1);
        for block in 1..=2usize {
            let p = format!("s{stage}b{block}");
            let down = stage > 1 && block == 1;
            let stride = if down { 2 } else { 1 };
            let residual = if down {
                let name = format!("{p}_down");
                layers.push(LayerSpec::conv(&name, 1, 2, 0, channels, bn).as_shortcut(&prev));
                name
            } else {
                prev.clone()
            };
            layers.push(LayerSpec::conv(&format!("{p}_conv1"), 3, stride, 1, channels, bn));
            let mut second = LayerSpec::conv(&format!("{p}_conv2"), 3, 1, 1, channels, bn).with_residual(&residual);
            if block == 2 {
                match stage {
                    1 => second = second.with_tap(Tap::Early),
                    3 => second = second.with_tap(Tap::Middle),
                    4 => second = second.with_tap(Tap::Late),
                    _ => {}
                }
            }
            prev = second.name.clone();
            layers.push(second);
        }
    }
    layers.push(LayerSpec::gap("pool"));
    layers.push(LayerSpec::linear("fc", num_classes));
    ArchitectureConfig::new(ArchLabel::Resnet18, layers)
}

/// vNet-style table: ten GroupNorm convolutions whose theoretical receptive
/// field grows at every layer (7, 15, 23, 31, 47, 63, 95, 127, 191, 319 px),
/// with six stride-2 reductions bringing 224 px down to a 4×4 late grid.
///
/// Taps sit after convolutions 2, 6 and 9 (grids 56×56, 14×14 and 4×4).
/// Channel multipliers over the base width: 1, 1, 2, 2, 4, 4, 8, 8, 8, 8.
pub fn vnet(width: usize, num_classes: usize) -> ArchitectureConfig {
    //                 kernel stride pad  mult
    const TABLE: [(usize, usize, usize, usize); 10] = [
        (7, 2, 3, 1),
        (5, 2, 2, 1),
        (3, 1, 1, 2),
        (3, 2, 1, 2),
        (3, 1, 1, 4),
        (3, 2, 1, 4),
        (3, 1, 1, 8),
        (3, 2, 1, 8),
        (3, 2, 1, 8),
        (3, 1, 1, 8),
    ];
    let gn = Norm::Group(None);
    let mut layers: Vec<LayerSpec> = TABLE
        .iter()
        .enumerate()
        .map(|(i, &(k, s, p, m))| {
            let l = LayerSpec::conv(&format!("conv{}", i + 1), k, s, p, width * m, gn);
            match i + 1 {
                2 => l.with_tap(Tap::Early),
                6 => l.with_tap(Tap::Middle),
                9 => l.with_tap(Tap::Late),
                _ => l,
            }
        })
        .collect();
    layers.push(LayerSpec::gap("pool"));
    layers.push(LayerSpec::linear("fc", num_classes));
    ArchitectureConfig::new(ArchLabel::Vnet, layers)
}

/// Which built-in family to instantiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Resnet18,
    Vnet,
}

impl Family {
    pub fn config(self, width: usize, num_classes: usize) -> ArchitectureConfig {
        match self {
            Family::Resnet18 => resnet18(width, num_classes),
            Family::Vnet => vnet(width, num_classes),
        }
    }

    pub fn parse(s: &str) -> Option<Family> {
        match s {
            "resnet18" => Some(Family::Resnet18),
            "vnet" => Some(Family::Vnet),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Resnet18 => "resnet18",
            Family::Vnet => "vnet",
        }
    }
}
