//! `key = value` run configuration with `[section]` headers.

use std::collections::BTreeMap;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use super::synth::SyntheticSpec;
use super::WorkbenchError;
use crate::gaze::{HeatmapSource, Window};
use crate::model::Family;
use crate::saliency::ClassSource;
use crate::stats::Alternative;
use crate::trainer::TrainConfig;

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "GAZECAM_SEED";

/// Raw sections; keys outside any section land in `""`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    pub sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, WorkbenchError> {
        let mut out = ConfigFile::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: &str| WorkbenchError::Config(format!("line {}: {m}", i + 1));
            if let Some(name) = line.strip_prefix('[') {
                section = name.strip_suffix(']').ok_or_else(|| err("unterminated section header"))?.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected `key = value`"))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(err("empty key"));
            }
            if out.sections.entry(section.clone()).or_default().insert(k.to_string(), v.to_string()).is_some() {
                return Err(err(&format!("duplicate key `{k}`")));
            }
        }
        Ok(out)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub images: Option<PathBuf>,
    pub gaze: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub synth: SyntheticSpec,
    pub models: Vec<Family>,
    pub width: usize,
    pub train: TrainConfig,
    pub class_source: ClassSource,
    pub window: Window,
    pub heatmap_source: HeatmapSource,
    pub block_grid: usize,
    pub human_threshold: f64,
    pub alternative: Alternative,
    /// Images per model and tap rendered as PGM previews.
    pub render_limit: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            images: None,
            gaze: None,
            out: None,
            synth: SyntheticSpec::default(),
            models: vec![Family::Resnet18, Family::Vnet],
            width: 8,
            train: TrainConfig::default(),
            class_source: ClassSource::Predicted,
            window: Window::Recurrent,
            heatmap_source: HeatmapSource::Samples,
            block_grid: 4,
            human_threshold: 1.0,
            alternative: Alternative::TwoSided,
            render_limit: 4,
        }
    }
}

const KNOWN: &[(&str, &[&str])] = &[
    ("run", &["seed"]),
    ("paths", &["images", "gaze", "out"]),
    (
        "synth",
        &[
            "n_categories",
            "images_per_category",
            "image_size",
            "n_participants",
            "samples_per_trial",
            "central_sigma",
            "object_sigma",
            "object_weight",
        ],
    ),
    ("train", &["models", "width", "epochs", "batch_size", "lr0", "momentum", "weight_decay", "fine_tune_epochs"]),
    ("gradcam", &["class"]),
    ("heatmap", &["window", "source"]),
    ("compare", &["block_grid", "human_threshold", "render_limit"]),
    ("stats", &["alternative"]),
];

impl RunConfig {
    /// Parses config text; `env_seed` (normally `GAZECAM_SEED`) wins over
    /// the file's seed.
    pub fn from_text(text: &str, env_seed: Option<&str>) -> Result<Self, WorkbenchError> {
        let file = ConfigFile::parse(text)?;
        for (section, keys) in &file.sections {
            let known = KNOWN.iter().find(|(s, _)| s == section).ok_or_else(|| WorkbenchError::Config(format!("unknown section [{section}]")))?;
            if let Some(k) = keys.keys().find(|k| !known.1.contains(&k.as_str())) {
                return Err(WorkbenchError::Config(format!("unknown key `{k}` in [{section}]")));
            }
        }
        let mut c = RunConfig::default();
        fn num<T: std::str::FromStr>(file: &ConfigFile, s: &str, k: &str, slot: &mut T) -> Result<(), WorkbenchError> {
            if let Some(v) = file.get(s, k) {
                *slot = v.parse().map_err(|_| WorkbenchError::Config(format!("[{s}] {k}: cannot parse {v:?}")))?;
            }
            Ok(())
        }
        num(&file, "run", "seed", &mut c.seed)?;
        if let Some(v) = env_seed {
            c.seed = v.trim().parse().map_err(|_| WorkbenchError::Config(format!("{SEED_ENV}: cannot parse {v:?}")))?;
        }
        c.images = file.get("paths", "images").map(PathBuf::from);
        c.gaze = file.get("paths", "gaze").map(PathBuf::from);
        c.out = file.get("paths", "out").map(PathBuf::from);
        let s = &mut c.synth;
        num(&file, "synth", "n_categories", &mut s.n_categories)?;
        num(&file, "synth", "images_per_category", &mut s.images_per_category)?;
        num(&file, "synth", "image_size", &mut s.image_size)?;
        num(&file, "synth", "n_participants", &mut s.n_participants)?;
        num(&file, "synth", "samples_per_trial", &mut s.samples_per_trial)?;
        num(&file, "synth", "central_sigma", &mut s.central_sigma)?;
        num(&file, "synth", "object_sigma", &mut s.object_sigma)?;
        num(&file, "synth", "object_weight", &mut s.object_weight)?;
        if let Some(v) = file.get("train", "models") {
            c.models = v
                .split(',')
                .map(|m| Family::parse(m.trim()).ok_or_else(|| WorkbenchError::Config(format!("[train] models: unknown model {:?}", m.trim()))))
                .collect::<Result<_, _>>()?;
            if c.models.is_empty() {
                return Err(WorkbenchError::Config("[train] models: empty list".into()));
            }
        }
        num(&file, "train", "width", &mut c.width)?;
        let t = &mut c.train;
        num(&file, "train", "epochs", &mut t.epochs)?;
        num(&file, "train", "batch_size", &mut t.batch_size)?;
        num(&file, "train", "lr0", &mut t.lr0)?;
        num(&file, "train", "momentum", &mut t.momentum)?;
        num(&file, "train", "weight_decay", &mut t.weight_decay)?;
        num(&file, "train", "fine_tune_epochs", &mut t.fine_tune_epochs)?;
        if let Some(v) = file.get("gradcam", "class") {
            c.class_source = match v {
                "predicted" => ClassSource::Predicted,
                "truth" => ClassSource::GroundTruth,
                _ => return Err(WorkbenchError::Config(format!("[gradcam] class must be predicted or truth, got {v:?}"))),
            };
        }
        if let Some(v) = file.get("heatmap", "window") {
            c.window = Window::parse(v).ok_or_else(|| WorkbenchError::Config(format!("[heatmap] window: unknown {v:?}")))?;
        }
        if let Some(v) = file.get("heatmap", "source") {
            c.heatmap_source = HeatmapSource::parse(v).ok_or_else(|| WorkbenchError::Config(format!("[heatmap] source: unknown {v:?}")))?;
        }
        num(&file, "compare", "block_grid", &mut c.block_grid)?;
        num(&file, "compare", "human_threshold", &mut c.human_threshold)?;
        num(&file, "compare", "render_limit", &mut c.render_limit)?;
        if let Some(v) = file.get("stats", "alternative") {
            c.alternative = Alternative::parse(v).ok_or_else(|| WorkbenchError::Config(format!("[stats] alternative: unknown {v:?}")))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), WorkbenchError> {
        self.synth.validate()?;
        self.train.validate().map_err(|e| WorkbenchError::Config(e.to_string()))?;
        if self.width == 0 {
            return Err(WorkbenchError::Config("[train] width must be positive".into()));
        }
        if !(1..=56).contains(&self.block_grid) {
            return Err(WorkbenchError::Config("[compare] block_grid must lie in 1..=56".into()));
        }
        if !(0.0..=1.0).contains(&self.human_threshold) {
            return Err(WorkbenchError::Config("[compare] human_threshold must lie in [0, 1]".into()));
        }
        let mut seen = self.models.clone();
        seen.sort_by_key(|m| m.as_str());
        seen.dedup();
        if seen.len() != self.models.len() {
            return Err(WorkbenchError::Config("[train] models: duplicate entry".into()));
        }
        Ok(())
    }

    /// Canonical text of every setting that affects results. Paths are
    /// left out so the same computation hashes the same wherever it runs.
    pub fn canonical(&self) -> String {
        let s = &self.synth;
        let t = &self.train;
        let models: Vec<&str> = self.models.iter().map(|m| m.as_str()).collect();
        format!(
            "[run]\nseed = {}\n[synth]\nn_categories = {}\nimages_per_category = {}\nimage_size = {}\nn_participants = {}\n\
             samples_per_trial = {}\ncentral_sigma = {}\nobject_sigma = {}\nobject_weight = {}\n[train]\nmodels = {}\n\
             width = {}\nepochs = {}\nbatch_size = {}\nlr0 = {}\nmomentum = {}\nweight_decay = {}\nfine_tune_epochs = {}\n\
             [gradcam]\nclass = {}\n[heatmap]\nwindow = {}\nsource = {}\n[compare]\nblock_grid = {}\nhuman_threshold = {}\n\
             render_limit = {}\n[stats]\nalternative = {}\n",
            self.seed,
            s.n_categories,
            s.images_per_category,
            s.image_size,
            s.n_participants,
            s.samples_per_trial,
            s.central_sigma,
            s.object_sigma,
            s.object_weight,
            models.join(","),
            self.width,
            t.epochs,
            t.batch_size,
            t.lr0,
            t.momentum,
            t.weight_decay,
            t.fine_tune_epochs,
            match self.class_source {
                ClassSource::Predicted => "predicted",
                ClassSource::GroundTruth => "truth",
            },
            self.window.as_str(),
            self.heatmap_source.as_str(),
            self.block_grid,
            self.human_threshold,
            self.render_limit,
            self.alternative.as_str(),
        )
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    /// Seed for one named stochastic component, derived from the run seed.
    pub fn sub_seed(&self, component: &str) -> u64 {
        let d = Sha256::digest(format!("{}:{component}", self.seed).as_bytes());
        u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
    }
}
