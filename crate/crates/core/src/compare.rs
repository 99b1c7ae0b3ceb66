//! Agreement between human gaze and model saliency: pixelwise MAE, target
//! blocks, and the control/challenge image partition.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::map::{ImageMap, MAP_LEN, MAP_SIZE};
use crate::model::spec::Tap;
use crate::saliency::{global_maximum, upsample_and_normalize, SaliencyGrid};
use crate::stats::{tertile_split, Tertile};

/// Side of the block grid used unless configured otherwise.
pub const DEFAULT_BLOCK_GRID: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompareError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("duplicate image id `{id}` in {source_name}")]
    Duplicate { id: String, source_name: String },
}

/// Mean absolute pixel difference between two 224×224 maps.
pub fn mae(e: &ImageMap, s: &ImageMap) -> Result<f64, CompareError> {
    if e.values.len() != MAP_LEN || s.values.len() != MAP_LEN {
        return Err(CompareError::Input(format!("maps must hold {MAP_LEN} values, got {} and {}", e.values.len(), s.values.len())));
    }
    let sum: f64 = e.values.iter().zip(&s.values).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum();
    Ok(sum / MAP_LEN as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TargetBlock {
    pub index: usize,
    pub row: usize,
    pub col: usize,
}

/// Block of an image point on the default 4×4 grid of 56-pixel cells.
pub fn block_of(x: f64, y: f64) -> Result<TargetBlock, CompareError> {
    block_on_grid(x, y, DEFAULT_BLOCK_GRID)
}

/// Block of an image point on an `n`×`n` grid.
pub fn block_on_grid(x: f64, y: f64, n: usize) -> Result<TargetBlock, CompareError> {
    let size = MAP_SIZE as f64;
    if n == 0 || n > MAP_SIZE {
        return Err(CompareError::Input(format!("block grid {n} must lie in 1..={MAP_SIZE}")));
    }
    if !(0.0..size).contains(&x) || !(0.0..size).contains(&y) {
        return Err(CompareError::Input(format!("point ({x}, {y}) lies outside the {MAP_SIZE}×{MAP_SIZE} image")));
    }
    let cell = size / n as f64;
    let col = ((x / cell).floor() as usize).min(n - 1);
    let row = ((y / cell).floor() as usize).min(n - 1);
    Ok(TargetBlock { index: n * row + col, row, col })
}

/// Percentage of pairs whose human and model blocks coincide.
pub fn block_agreement(pairs: &[(usize, usize)]) -> Result<f64, CompareError> {
    if pairs.is_empty() {
        return Err(CompareError::Input("no block pairs".into()));
    }
    let hits = pairs.iter().filter(|(h, m)| h == m).count();
    Ok(100.0 * hits as f64 / pairs.len() as f64)
}

/// Human accuracy plus correctness of the two from-scratch models.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionInput {
    pub id: String,
    pub human_acc: f64,
    pub correct: [Option<bool>; 2],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImagePartition {
    pub control: BTreeSet<String>,
    pub challenge: BTreeSet<String>,
    pub unclassified: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionLabel {
    Control,
    Challenge,
    Unclassified,
}

impl PartitionLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            PartitionLabel::Control => "control",
            PartitionLabel::Challenge => "challenge",
            PartitionLabel::Unclassified => "unclassified",
        }
    }
}

/// Control when humans reach `threshold` and both models are right,
/// challenge when humans reach it and both models are wrong.
pub fn partition_label(human_acc: f64, correct: [bool; 2], threshold: f64) -> PartitionLabel {
    match (human_acc >= threshold, correct) {
        (true, [true, true]) => PartitionLabel::Control,
        (true, [false, false]) => PartitionLabel::Challenge,
        _ => PartitionLabel::Unclassified,
    }
}

pub fn partition_images(images: &[PartitionInput], threshold: f64) -> Result<ImagePartition, CompareError> {
    let mut out = ImagePartition::default();
    let mut seen = BTreeSet::new();
    for img in images {
        if !seen.insert(img.id.as_str()) {
            return Err(CompareError::Duplicate { id: img.id.clone(), source_name: "partition input".into() });
        }
        let [Some(a), Some(b)] = img.correct else {
            return Err(CompareError::Input(format!("image `{}` lacks correctness flags for both models", img.id)));
        };
        let set = match partition_label(img.human_acc, [a, b], threshold) {
            PartitionLabel::Control => &mut out.control,
            PartitionLabel::Challenge => &mut out.challenge,
            PartitionLabel::Unclassified => &mut out.unclassified,
        };
        set.insert(img.id.clone());
    }
    Ok(out)
}

/// Per-image descriptors joined into every comparison row.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMeta {
    pub id: String,
    pub category: String,
    pub animate: bool,
    pub human_acc: f64,
    pub arousal: f64,
    pub valence: f64,
}

/// One model's saliency for one image, indexed by `Tap::index`: the
/// max-normalized 224×224 map and the grid's global maximum in image
/// coordinates (absent for an all-zero grid).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSaliency {
    pub id: String,
    pub maps: Vec<ImageMap>,
    pub maxima: Vec<Option<(f64, f64)>>,
    pub predicted: usize,
    pub truth: usize,
}

impl ImageSaliency {
    /// Maps and maxima taken directly from grids that share the image frame.
    pub fn from_grids(id: &str, grids: &[SaliencyGrid], predicted: usize, truth: usize) -> Self {
        ImageSaliency {
            id: id.to_string(),
            maps: grids.iter().map(upsample_and_normalize).collect(),
            maxima: grids.iter().map(|g| global_maximum(g).ok()).collect(),
            predicted,
            truth,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSaliency {
    pub model: String,
    pub images: Vec<ImageSaliency>,
}

#[derive(Debug, Clone)]
pub struct CompareInputs {
    pub meta: Vec<ImageMeta>,
    /// Max-normalized heatmaps, one per image.
    pub heatmaps: Vec<(String, ImageMap)>,
    /// Per-participant fixations in image coordinates.
    pub fixations: Vec<(String, Vec<(f64, f64)>)>,
    pub models: Vec<ModelSaliency>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareOptions {
    pub block_grid: usize,
    pub human_threshold: f64,
    /// The two from-scratch models that define the partition.
    pub partition_models: [String; 2],
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions { block_grid: DEFAULT_BLOCK_GRID, human_threshold: 1.0, partition_models: ["resnet18".into(), "vnet".into()] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TapMetrics {
    pub block: Option<usize>,
    pub mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelMetrics {
    pub correct: Option<bool>,
    pub taps: [TapMetrics; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub meta: ImageMeta,
    pub arousal_tertile: Tertile,
    pub valence_tertile: Tertile,
    pub human_block: Option<usize>,
    pub partition: Option<PartitionLabel>,
    /// Same order as `ComparisonTable::models`.
    pub models: Vec<ModelMetrics>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Orphan {
    pub id: String,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub models: Vec<String>,
    pub rows: Vec<ComparisonRow>,
    pub orphans: Vec<Orphan>,
}

/// Most frequent block among the fixations; ties go to the lower index.
pub fn modal_block(points: &[(f64, f64)], grid: usize) -> Result<Option<usize>, CompareError> {
    let mut counts = vec![0usize; grid * grid];
    for &(x, y) in points {
        counts[block_on_grid(x, y, grid)?.index] += 1;
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    Ok((best > 0).then(|| counts.iter().position(|&c| c == best).unwrap()))
}

fn index_unique<'a, T>(items: &'a [T], id: impl Fn(&T) -> &str, source: &str) -> Result<BTreeMap<&'a str, &'a T>, CompareError> {
    let mut out = BTreeMap::new();
    for item in items {
        if out.insert(id(item), item).is_some() {
            return Err(CompareError::Duplicate { id: id(item).to_string(), source_name: source.to_string() });
        }
    }
    Ok(out)
}

/// Joins every input by image id into one row per metadata entry. Inputs
/// missing for an image leave its columns empty; ids without metadata are
/// reported as orphans.
pub fn compare_run(inputs: &CompareInputs, opts: &CompareOptions) -> Result<ComparisonTable, CompareError> {
    let meta = index_unique(&inputs.meta, |m| &m.id, "metadata")?;
    let heat = index_unique(&inputs.heatmaps, |h| &h.0, "heatmaps")?;
    let fix = index_unique(&inputs.fixations, |f| &f.0, "fixations")?;
    let mut sal = Vec::new();
    let mut names = BTreeSet::new();
    for m in &inputs.models {
        if !names.insert(m.model.as_str()) {
            return Err(CompareError::Duplicate { id: m.model.clone(), source_name: "model list".into() });
        }
        sal.push(index_unique(&m.images, |s| &s.id, &format!("{} saliency", m.model))?);
    }

    let mut orphans = Vec::new();
    let mut note = |ids: Vec<&str>, source: &str| {
        for id in ids.into_iter().filter(|id| !meta.contains_key(id)) {
            orphans.push(Orphan { id: id.to_string(), source: source.to_string() });
        }
    };
    note(heat.keys().copied().collect(), "heatmaps");
    note(fix.keys().copied().collect(), "fixations");
    for (m, s) in inputs.models.iter().zip(&sal) {
        note(s.keys().copied().collect(), &format!("{} saliency", m.model));
    }

    for (id, (_, map)) in &heat {
        if !map.is_normalized() {
            return Err(CompareError::Input(format!("heatmap for `{id}` is not max-normalized")));
        }
    }

    let arousal = tertile_split(&inputs.meta.iter().map(|m| m.arousal).collect::<Vec<_>>());
    let valence = tertile_split(&inputs.meta.iter().map(|m| m.valence).collect::<Vec<_>>());
    let (arousal, valence) = match (arousal, valence) {
        (Ok(a), Ok(v)) => (a.labels, v.labels),
        (Err(e), _) | (_, Err(e)) => return Err(CompareError::Input(format!("rating tertiles: {e}"))),
    };
    let pair_idx: Vec<Option<usize>> =
        opts.partition_models.iter().map(|p| inputs.models.iter().position(|m| &m.model == p)).collect();

    let mut rows = Vec::with_capacity(inputs.meta.len());
    for (i, m) in inputs.meta.iter().enumerate() {
        let human_block = match fix.get(m.id.as_str()) {
            Some((_, pts)) => modal_block(pts, opts.block_grid)?,
            None => None,
        };
        let heatmap = heat.get(m.id.as_str()).map(|h| &h.1);
        let mut models = Vec::with_capacity(sal.len());
        for s in &sal {
            let Some(img) = s.get(m.id.as_str()) else {
                models.push(ModelMetrics { correct: None, taps: [TapMetrics { block: None, mae: None }; 3] });
                continue;
            };
            if img.maps.len() != Tap::ALL.len() || img.maxima.len() != Tap::ALL.len() {
                return Err(CompareError::Input(format!("`{}` needs {} saliency maps and maxima", m.id, Tap::ALL.len())));
            }
            let mut taps = [TapMetrics { block: None, mae: None }; 3];
            for ((t, map), max) in taps.iter_mut().zip(&img.maps).zip(&img.maxima) {
                if !map.is_normalized() {
                    return Err(CompareError::Input(format!("saliency map for `{}` is not max-normalized", m.id)));
                }
                t.block = match max {
                    Some((x, y)) => Some(block_on_grid(*x, *y, opts.block_grid)?.index),
                    None => None,
                };
                t.mae = match heatmap {
                    Some(h) => Some(mae(h, map)?),
                    None => None,
                };
            }
            models.push(ModelMetrics { correct: Some(img.predicted == img.truth), taps });
        }
        let partition = match (pair_idx[0], pair_idx[1]) {
            (Some(a), Some(b)) => match (models[a].correct, models[b].correct) {
                (Some(x), Some(y)) => Some(partition_label(m.human_acc, [x, y], opts.human_threshold)),
                _ => None,
            },
            _ => None,
        };
        rows.push(ComparisonRow {
            meta: m.clone(),
            arousal_tertile: arousal[i],
            valence_tertile: valence[i],
            human_block,
            partition,
            models,
        });
    }
    Ok(ComparisonTable { models: inputs.models.iter().map(|m| m.model.clone()).collect(), rows, orphans })
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

impl ComparisonTable {
    /// `image,category,animate,human_acc,arousal,arousal_tertile,valence,
    /// valence_tertile,human_block,partition`, then per model
    /// `<m>_correct` and `<m>_<tap>_block,<m>_<tap>_mae` for each tap.
    pub fn header(&self) -> String {
        let mut h = String::from(
            "image,category,animate,human_acc,arousal,arousal_tertile,valence,valence_tertile,human_block,partition",
        );
        for m in &self.models {
            write!(h, ",{m}_correct").unwrap();
            for t in Tap::ALL {
                write!(h, ",{m}_{t}_block,{m}_{t}_mae").unwrap();
            }
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for r in &self.rows {
            let m = &r.meta;
            write!(
                out,
                "{},{},{},{:.10},{:.10},{},{:.10},{},{},{}",
                m.id,
                m.category,
                m.animate,
                m.human_acc,
                m.arousal,
                r.arousal_tertile.as_str(),
                m.valence,
                r.valence_tertile.as_str(),
                opt(r.human_block),
                opt(r.partition.map(|p| p.as_str())),
            )
            .unwrap();
            for mm in &r.models {
                write!(out, ",{}", opt(mm.correct)).unwrap();
                for t in &mm.taps {
                    write!(out, ",{},{}", opt(t.block), opt(t.mae.map(|v| format!("{v:.10}")))).unwrap();
                }
            }
            out.push('\n');
        }
        out
    }

    /// Reads a table written by `to_csv`. Orphans are not part of the file.
    pub fn from_csv(text: &str) -> Result<Self, CompareError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| CompareError::Input("empty comparison table".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        const FIXED: usize = 10;
        const PER_MODEL: usize = 1 + 2 * 3;
        if cols.len() < FIXED || (cols.len() - FIXED) % PER_MODEL != 0 {
            return Err(CompareError::Input("comparison header has an unexpected column count".into()));
        }
        let models: Vec<String> = cols[FIXED..]
            .chunks(PER_MODEL)
            .map(|c| c[0].strip_suffix("_correct").map(str::to_string))
            .collect::<Option<_>>()
            .ok_or_else(|| CompareError::Input("comparison header lacks `<model>_correct` columns".into()))?;
        let table = ComparisonTable { models, rows: Vec::new(), orphans: Vec::new() };
        if table.header() != header {
            return Err(CompareError::Input("comparison header does not match the expected layout".into()));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = |what: &str| CompareError::Input(format!("comparison line {}: bad {what}", i + 2));
            if f.len() != cols.len() {
                return Err(bad("field count"));
            }
            fn na<T: std::str::FromStr>(s: &str) -> Result<Option<T>, ()> {
                if s == "NA" {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| ())
                }
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad(cols[k]));
            let tertile = |k: usize| Tertile::parse(f[k]).ok_or_else(|| bad(cols[k]));
            let partition = match f[9] {
                "NA" => None,
                "control" => Some(PartitionLabel::Control),
                "challenge" => Some(PartitionLabel::Challenge),
                "unclassified" => Some(PartitionLabel::Unclassified),
                _ => return Err(bad("partition")),
            };
            let mut model_metrics = Vec::new();
            for chunk in f[FIXED..].chunks(PER_MODEL) {
                let mut taps = [TapMetrics { block: None, mae: None }; 3];
                for (t, pair) in taps.iter_mut().zip(chunk[1..].chunks(2)) {
                    t.block = na(pair[0]).map_err(|_| bad("block"))?;
                    t.mae = na(pair[1]).map_err(|_| bad("mae"))?;
                }
                model_metrics.push(ModelMetrics { correct: na(chunk[0]).map_err(|_| bad("correct"))?, taps });
            }
            rows.push(ComparisonRow {
                meta: ImageMeta {
                    id: f[0].to_string(),
                    category: f[1].to_string(),
                    animate: f[2].parse().map_err(|_| bad("animate"))?,
                    human_acc: num(3)?,
                    arousal: num(4)?,
                    valence: num(6)?,
                },
                arousal_tertile: tertile(5)?,
                valence_tertile: tertile(7)?,
                human_block: na(f[8]).map_err(|_| bad("human_block"))?,
                partition,
                models: model_metrics,
            });
        }
        Ok(ComparisonTable { rows, ..table })
    }

    /// `image,source` listing of ids that had no metadata row.
    pub fn orphans_csv(&self) -> String {
        let mut out = String::from("image,source\n");
        for o in &self.orphans {
            writeln!(out, "{},{}", o.id, o.source).unwrap();
        }
        out
    }

    /// `(human, model)` block pairs for one model and tap, skipping images
    /// where either side is missing.
    pub fn block_pairs(&self, model: usize, tap: Tap) -> Vec<(usize, usize)> {
        self.rows
            .iter()
            .filter_map(|r| Some((r.human_block?, r.models[model].taps[tap.index()].block?)))
            .collect()
    }

    /// MAE per image for one model and tap, NaN where missing.
    pub fn mae_column(&self, model: usize, tap: Tap) -> Vec<f64> {
        self.rows.iter().map(|r| r.models[model].taps[tap.index()].mae.unwrap_or(f64::NAN)).collect()
    }
}

#[cfg(test)]
mod tests;
