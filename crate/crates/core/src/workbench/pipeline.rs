//! The staged run: train → gradcam → heatmaps → compare → stats.
//!
//! Every stage reads its upstream inputs from disk, so any suffix of the
//! chain can be re-run on cached artifacts. Each stage directory carries a
//! `MANIFEST` with the run seed, the config hash, a completion status and
//! the SHA-256 of every file it wrote.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::synth::parse_manifest;
use super::{RunConfig, WorkbenchError};
use crate::compare::{
    block_agreement, compare_run, CompareError, CompareInputs, CompareOptions, ComparisonTable, ImageMeta, ImageSaliency,
    ModelSaliency, PartitionLabel,
};
use crate::gaze::{build_heatmap, parse_gaze_log, trial_fixation, GazeError};
use crate::image::read_image;
use crate::imgstats::{properties, properties_csv, ImageProperties};
use crate::map::{ImageMap, HEATMAP_MAGIC, MAP_SIZE};
use crate::model::{load_weights, save_weights, ArchitectureConfig, Family, Model, Tap};
use crate::saliency::{global_maximum, gradcam_all, upsample_and_normalize, ClassChoice, ClassSource, SaliencyGrid};
use crate::stats::{
    adjust_family, hodges_lehmann_ci, kruskal_wallis, partial_spearman, report_csv, spearman, wilcoxon_paired, wilcoxon_rank_sum,
    Alternative, ReportRow, StatsError, TestResult,
};
use crate::trainer::data::RESIZE_SIZE;
use crate::trainer::{accuracy, load_training_set, metrics_csv, predict, preprocess, train, ChannelStats, DatasetIndex, TrainConfig, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Train,
    Gradcam,
    Heatmaps,
    Compare,
    Stats,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Train, Stage::Gradcam, Stage::Heatmaps, Stage::Compare, Stage::Stats];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Gradcam => "gradcam",
            Stage::Heatmaps => "heatmaps",
            Stage::Compare => "compare",
            Stage::Stats => "stats",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Stage::ALL.into_iter().find(|st| st.as_str() == s)
    }

    fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Train | Stage::Heatmaps => &[],
            Stage::Gradcam => &[Stage::Train],
            Stage::Compare => &[Stage::Gradcam, Stage::Heatmaps],
            Stage::Stats => &[Stage::Compare],
        }
    }
}

pub const MANIFEST_FILE: &str = "MANIFEST";

fn io(path: &Path, e: impl std::fmt::Display) -> WorkbenchError {
    WorkbenchError::Io { path: path.display().to_string(), detail: e.to_string() }
}

fn read_text(path: &Path) -> Result<String, WorkbenchError> {
    fs::read_to_string(path).map_err(|e| io(path, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), WorkbenchError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| io(path, e))
}

fn train_err(e: TrainError) -> WorkbenchError {
    match e {
        TrainError::Config(m) | TrainError::Input(m) => WorkbenchError::Input(m),
        TrainError::Ingest { path, detail } => WorkbenchError::Input(format!("cannot ingest {}: {detail}", path.display())),
        other => WorkbenchError::Runtime(other.to_string()),
    }
}

fn compare_err(e: CompareError) -> WorkbenchError {
    WorkbenchError::Input(e.to_string())
}

/// Image id of a corpus file: its stem.
pub fn image_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

const CROP_OFFSET: f64 = (RESIZE_SIZE - MAP_SIZE) as f64 / 2.0;
const CROP_SCALE: f64 = MAP_SIZE as f64 / RESIZE_SIZE as f64;

/// Image coordinates of a point given in the network's center-crop frame.
pub fn crop_to_image(x: f64, y: f64) -> (f64, f64) {
    ((x + CROP_OFFSET) * CROP_SCALE, (y + CROP_OFFSET) * CROP_SCALE)
}

/// Resamples a crop-frame map onto the original image pixels (bilinear,
/// edges clamped) and renormalizes it to a maximum of 1.
pub fn crop_map_to_image(map: &ImageMap) -> ImageMap {
    let hi = (MAP_SIZE - 1) as f64;
    let axis: Vec<(usize, usize, f64)> = (0..MAP_SIZE)
        .map(|p| {
            let u = ((p as f64 + 0.5) / CROP_SCALE - CROP_OFFSET - 0.5).clamp(0.0, hi);
            let i0 = u.floor() as usize;
            (i0, (i0 + 1).min(MAP_SIZE - 1), u - i0 as f64)
        })
        .collect();
    let mut vals = vec![0.0f64; MAP_SIZE * MAP_SIZE];
    for (py, &(r0, r1, fy)) in axis.iter().enumerate() {
        for (px, &(c0, c1, fx)) in axis.iter().enumerate() {
            let v = |x: usize, y: usize| map.at(x, y) as f64;
            let top = v(c0, r0) * (1.0 - fx) + v(c1, r0) * fx;
            let bot = v(c0, r1) * (1.0 - fx) + v(c1, r1) * fx;
            vals[py * MAP_SIZE + px] = top * (1.0 - fy) + bot * fy;
        }
    }
    crate::gaze::normalize_max(&vals)
}

fn file_digests(dir: &Path) -> Result<Vec<(String, String)>, WorkbenchError> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| io(&d, e))? {
            let p = entry.map_err(|e| io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != MANIFEST_FILE) {
                let bytes = fs::read(&p).map_err(|e| io(&p, e))?;
                let rel = p.strip_prefix(dir).expect("walked from dir").to_string_lossy().replace('\\', "/");
                out.push((rel, hex::encode(Sha256::digest(&bytes))));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn write_manifest(dir: &Path, stage: Stage, cfg: &RunConfig, complete: bool) -> Result<(), WorkbenchError> {
    let mut text = format!(
        "stage = {}\nstatus = {}\nseed = {}\nconfig_hash = {}\n",
        stage.as_str(),
        if complete { "complete" } else { "incomplete" },
        cfg.seed,
        cfg.hash()
    );
    if complete {
        for (rel, digest) in file_digests(dir)? {
            writeln!(text, "file = {digest}  {rel}").unwrap();
        }
    }
    write(&dir.join(MANIFEST_FILE), text)
}

/// True when `dir` holds a manifest marked complete.
pub fn stage_complete(dir: &Path) -> bool {
    fs::read_to_string(dir.join(MANIFEST_FILE)).is_ok_and(|t| t.lines().any(|l| l == "status = complete"))
}

/// Resolved locations for one run.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub images: PathBuf,
    pub gaze: PathBuf,
    pub out: PathBuf,
}

impl RunPaths {
    pub fn from_config(cfg: &RunConfig) -> Result<Self, WorkbenchError> {
        let need = |p: &Option<PathBuf>, what: &str| p.clone().ok_or_else(|| WorkbenchError::Config(format!("[paths] {what} is not set")));
        Ok(RunPaths { images: need(&cfg.images, "images")?, gaze: need(&cfg.gaze, "gaze")?, out: need(&cfg.out, "out")? })
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.out.join(stage.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSummary {
    pub stages: Vec<Stage>,
    pub config_hash: String,
}

/// Runs `stages` (sorted into pipeline order) after checking every input
/// they need. Existing stage directories are only replaced with `force`.
pub fn run_pipeline(cfg: &RunConfig, paths: &RunPaths, stages: &[Stage], force: bool) -> Result<PipelineSummary, WorkbenchError> {
    let mut stages = stages.to_vec();
    stages.sort();
    stages.dedup();
    for &st in &stages {
        let fail = |e: WorkbenchError| WorkbenchError::Stage { stage: st.as_str(), source: Box::new(e) };
        match st {
            Stage::Train | Stage::Gradcam | Stage::Compare if !paths.images.is_dir() => {
                return Err(fail(WorkbenchError::Input(format!("image corpus not found: {}", paths.images.display()))));
            }
            Stage::Heatmaps if !paths.gaze.is_file() => {
                return Err(fail(WorkbenchError::Input(format!("gaze log not found: {}", paths.gaze.display()))));
            }
            _ => {}
        }
        for up in st.upstream() {
            if !stages.contains(up) && !stage_complete(&paths.stage_dir(*up)) {
                return Err(fail(WorkbenchError::Input(format!(
                    "upstream stage `{}` has no complete artifacts in {}",
                    up.as_str(),
                    paths.stage_dir(*up).display()
                ))));
            }
        }
        let dir = paths.stage_dir(st);
        if dir.exists() && !force {
            return Err(fail(WorkbenchError::Exists(dir.display().to_string())));
        }
    }
    for &st in &stages {
        let dir = paths.stage_dir(st);
        let fail = |e: WorkbenchError| WorkbenchError::Stage { stage: st.as_str(), source: Box::new(e) };
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| fail(io(&dir, e)))?;
        }
        fs::create_dir_all(&dir).map_err(|e| fail(io(&dir, e)))?;
        write_manifest(&dir, st, cfg, false).map_err(fail)?;
        let result = match st {
            Stage::Train => train_stage(cfg, paths, &dir),
            Stage::Gradcam => gradcam_stage(cfg, paths, &dir),
            Stage::Heatmaps => heatmaps_stage(cfg, paths, &dir),
            Stage::Compare => compare_stage(cfg, paths, &dir),
            Stage::Stats => stats_stage(cfg, paths, &dir),
        };
        result.map_err(fail)?;
        write_manifest(&dir, st, cfg, true).map_err(fail)?;
    }
    Ok(PipelineSummary { stages, config_hash: cfg.hash() })
}

fn train_stage(cfg: &RunConfig, paths: &RunPaths, dir: &Path) -> Result<(), WorkbenchError> {
    let index = DatasetIndex::scan(&paths.images).map_err(train_err)?;
    let data = load_training_set(&index).map_err(train_err)?;
    write(&dir.join("channel_stats.txt"), data.stats.to_text())?;
    write(&dir.join("categories.txt"), index.categories.join("\n") + "\n")?;
    let mut summary = String::from("model,epochs,final_loss,train_acc\n");
    for family in &cfg.models {
        let name = family.as_str();
        let arch = family.config(cfg.width, index.num_classes());
        let model = Model::build(arch.clone(), cfg.sub_seed(&format!("init/{name}"))).map_err(|e| WorkbenchError::Runtime(e.to_string()))?;
        let tc = TrainConfig { seed: cfg.sub_seed(&format!("train/{name}")), ..cfg.train.clone() };
        let (model, metrics) = train(model, &data, &tc).map_err(train_err)?;
        let acc = accuracy(&predict(&model, &data, tc.batch_size).map_err(train_err)?, &data.labels);
        let loss = metrics.last().map_or(f64::NAN, |m| m.loss);
        writeln!(summary, "{name},{},{loss:.10},{acc:.10}", tc.epochs).unwrap();
        write(&dir.join(format!("{name}.arch")), arch.to_text())?;
        write(&dir.join(format!("{name}_metrics.csv")), metrics_csv(&metrics))?;
        save_weights(&model, &dir.join(format!("{name}.gzw"))).map_err(|e| WorkbenchError::Runtime(e.to_string()))?;
    }
    write(&dir.join("summary.csv"), summary)
}

fn load_stats(paths: &RunPaths) -> Result<ChannelStats, WorkbenchError> {
    let p = paths.stage_dir(Stage::Train).join("channel_stats.txt");
    ChannelStats::parse(&read_text(&p)?).ok_or_else(|| WorkbenchError::Input(format!("malformed channel statistics in {}", p.display())))
}

fn load_model(paths: &RunPaths, family: Family) -> Result<Model, WorkbenchError> {
    let d = paths.stage_dir(Stage::Train);
    let arch_path = d.join(format!("{}.arch", family.as_str()));
    let arch = ArchitectureConfig::parse(&read_text(&arch_path)?).map_err(|e| WorkbenchError::Input(format!("{}: {e}", arch_path.display())))?;
    load_weights(arch, &d.join(format!("{}.gzw", family.as_str()))).map_err(|e| WorkbenchError::Input(e.to_string()))
}

fn gradcam_stage(cfg: &RunConfig, paths: &RunPaths, dir: &Path) -> Result<(), WorkbenchError> {
    let index = DatasetIndex::scan(&paths.images).map_err(train_err)?;
    let stats = load_stats(paths)?;
    for &family in &cfg.models {
        let model = load_model(paths, family)?;
        let mdir = dir.join(family.as_str());
        let mut preds = String::from("image,truth,predicted,class_used,class_source\n");
        for (i, (path, label)) in index.records.iter().enumerate() {
            let id = image_id(path);
            let img = read_image(path).map_err(|e| WorkbenchError::Input(e.to_string()))?;
            let choice = match cfg.class_source {
                ClassSource::Predicted => ClassChoice::Predicted,
                ClassSource::GroundTruth => ClassChoice::GroundTruth(*label),
            };
            let res = gradcam_all(&model, &preprocess(&img, &stats), choice).map_err(|e| WorkbenchError::Runtime(format!("{id}: {e}")))?;
            let first = &res.grids[0];
            writeln!(preds, "{id},{label},{},{},{}", res.predicted, first.class_used, first.class_source.as_str()).unwrap();
            for grid in &res.grids {
                write(&mdir.join(format!("{id}_{}.csv", grid.tap)), grid.to_csv())?;
                if i < cfg.render_limit {
                    let map = crop_map_to_image(&upsample_and_normalize(grid));
                    write(&mdir.join("render").join(format!("{id}_{}.pgm", grid.tap)), map.to_pgm())?;
                }
            }
        }
        write(&mdir.join("predictions.csv"), preds)?;
    }
    Ok(())
}

fn heatmaps_stage(cfg: &RunConfig, paths: &RunPaths, dir: &Path) -> Result<(), WorkbenchError> {
    let gaze_err = |e: GazeError| match e {
        GazeError::Io { .. } | GazeError::Format(_) | GazeError::Input(_) => WorkbenchError::Input(e.to_string()),
        GazeError::NoSamples(_) => WorkbenchError::Runtime(e.to_string()),
    };
    let log = parse_gaze_log(&paths.gaze).map_err(gaze_err)?;
    write(&dir.join("rejects.csv"), log.rejects_csv())?;
    let index = DatasetIndex::scan(&paths.images).map_err(train_err)?;
    let refs: Vec<_> = log.trials.iter().collect();
    let mut fix = String::from("participant,trial,image,x,y,from_samples,exclusion\n");
    for t in &log.trials {
        match trial_fixation(t) {
            Ok(f) => writeln!(fix, "{},{},{},{:.6},{:.6},{},NA", t.participant, t.trial, t.image, f.x, f.y, f.from_samples).unwrap(),
            Err(e) => writeln!(fix, "{},{},{},NA,NA,NA,{}", t.participant, t.trial, t.image, e.code()).unwrap(),
        }
    }
    write(&dir.join("fixations.csv"), fix)?;
    let mut missing = String::from("image,reason\n");
    for (i, (path, _)) in index.records.iter().enumerate() {
        let id = image_id(path);
        match build_heatmap(&id, &refs, cfg.window, cfg.heatmap_source) {
            Ok(h) => {
                write(&dir.join("maps").join(format!("{id}.gzh")), h.map.encode(HEATMAP_MAGIC))?;
                if i < cfg.render_limit {
                    write(&dir.join("render").join(format!("{id}.pgm")), h.map.to_pgm())?;
                }
            }
            Err(GazeError::NoSamples(_)) => writeln!(missing, "{id},no_samples").unwrap(),
            Err(e) => return Err(gaze_err(e)),
        }
    }
    write(&dir.join("missing.csv"), missing)
}

fn compare_stage(cfg: &RunConfig, paths: &RunPaths, dir: &Path) -> Result<(), WorkbenchError> {
    let manifest = parse_manifest(&read_text(&paths.images.join("manifest.csv"))?)?;
    let meta: Vec<ImageMeta> = manifest
        .iter()
        .map(|m| ImageMeta {
            id: m.id.clone(),
            category: m.category.clone(),
            animate: m.animate,
            human_acc: m.human_acc,
            arousal: m.arousal,
            valence: m.valence,
        })
        .collect();

    let hdir = paths.stage_dir(Stage::Heatmaps);
    let mut heatmaps = Vec::new();
    for m in &manifest {
        let p = hdir.join("maps").join(format!("{}.gzh", m.id));
        if p.is_file() {
            let bytes = fs::read(&p).map_err(|e| io(&p, e))?;
            let map = ImageMap::decode(HEATMAP_MAGIC, &bytes).map_err(|e| WorkbenchError::Input(format!("{}: {e}", p.display())))?;
            heatmaps.push((m.id.clone(), map));
        }
    }
    let mut fixations: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for line in read_text(&hdir.join("fixations.csv"))?.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() == 7 && f[6] == "NA" {
            let parse = |s: &str| s.parse::<f64>().map_err(|_| WorkbenchError::Input(format!("bad fixation row {line:?}")));
            fixations.entry(f[2].to_string()).or_default().push((parse(f[3])?, parse(f[4])?));
        }
    }

    let gdir = paths.stage_dir(Stage::Gradcam);
    let mut models = Vec::new();
    for family in &cfg.models {
        let mdir = gdir.join(family.as_str());
        let mut images = Vec::new();
        for line in read_text(&mdir.join("predictions.csv"))?.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || WorkbenchError::Input(format!("bad prediction row {line:?}"));
            if f.len() != 5 {
                return Err(bad());
            }
            let (truth, predicted, class_used): (usize, usize, usize) =
                (f[1].parse().map_err(|_| bad())?, f[2].parse().map_err(|_| bad())?, f[3].parse().map_err(|_| bad())?);
            let source = if f[4] == ClassSource::GroundTruth.as_str() { ClassSource::GroundTruth } else { ClassSource::Predicted };
            let mut maps = Vec::new();
            let mut maxima = Vec::new();
            for tap in Tap::ALL {
                let p = mdir.join(format!("{}_{tap}.csv", f[0]));
                let grid = SaliencyGrid::from_csv(&read_text(&p)?, tap, class_used, source)
                    .map_err(|e| WorkbenchError::Input(format!("{}: {e}", p.display())))?;
                maps.push(crop_map_to_image(&upsample_and_normalize(&grid)));
                maxima.push(global_maximum(&grid).ok().map(|(x, y)| crop_to_image(x, y)));
            }
            images.push(ImageSaliency { id: f[0].to_string(), maps, maxima, predicted, truth });
        }
        models.push(ModelSaliency { model: family.as_str().to_string(), images });
    }

    let inputs = CompareInputs { meta, heatmaps, fixations: fixations.into_iter().collect(), models };
    let opts = CompareOptions { block_grid: cfg.block_grid, human_threshold: cfg.human_threshold, ..CompareOptions::default() };
    let table = compare_run(&inputs, &opts).map_err(compare_err)?;
    write(&dir.join("comparison.csv"), table.to_csv())?;
    write(&dir.join("orphans.csv"), table.orphans_csv())?;
    let mut agree = String::from("model,tap,pairs,matches,percent\n");
    for (mi, m) in table.models.iter().enumerate() {
        for tap in Tap::ALL {
            let pairs = table.block_pairs(mi, tap);
            let matches = pairs.iter().filter(|(a, b)| a == b).count();
            let pct = block_agreement(&pairs).map_or_else(|_| "NA".to_string(), |p| format!("{p:.10}"));
            writeln!(agree, "{m},{tap},{},{matches},{pct}", pairs.len()).unwrap();
        }
    }
    write(&dir.join("agreement.csv"), agree)?;

    let mut props = Vec::new();
    for m in &manifest {
        let img = read_image(&paths.images.join(&m.path)).map_err(|e| WorkbenchError::Input(e.to_string()))?;
        props.push((m.id.clone(), properties(&img)));
    }
    write(&dir.join("properties.csv"), properties_csv(&props))
}

/// One-sided rank-sum of per-image match indicators against `10·n`
/// simulated matches between independent uniform blocks on a grid of
/// `cells` blocks.
pub fn agreement_vs_chance(pairs: &[(usize, usize)], cells: usize, seed: u64) -> Result<TestResult, StatsError> {
    if pairs.is_empty() || cells == 0 {
        return Err(StatsError::Input("no block pairs".into()));
    }
    let hits: Vec<f64> = pairs.iter().map(|(a, b)| (a == b) as u8 as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let null: Vec<f64> = (0..10 * pairs.len()).map(|_| (rng.random_range(0..cells) == rng.random_range(0..cells)) as u8 as f64).collect();
    wilcoxon_rank_sum(&hits, &null, Alternative::Greater)
}

fn parse_properties(text: &str) -> Result<BTreeMap<String, ImageProperties>, WorkbenchError> {
    let mut out = BTreeMap::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || WorkbenchError::Input(format!("bad properties row {line:?}"));
        if f.len() != 5 {
            return Err(bad());
        }
        let v: Vec<f64> = f[1..].iter().map(|s| s.parse::<f64>().map_err(|_| bad())).collect::<Result<_, _>>()?;
        out.insert(f[0].to_string(), ImageProperties { entropy: v[0], shape: v[1], texture: v[2], peak_to_mean: v[3] });
    }
    Ok(out)
}

fn finite(v: &[f64]) -> Vec<f64> {
    v.iter().copied().filter(|x| x.is_finite()).collect()
}

fn stats_stage(cfg: &RunConfig, paths: &RunPaths, dir: &Path) -> Result<(), WorkbenchError> {
    let cdir = paths.stage_dir(Stage::Compare);
    let table = ComparisonTable::from_csv(&read_text(&cdir.join("comparison.csv"))?).map_err(compare_err)?;
    let props = parse_properties(&read_text(&cdir.join("properties.csv"))?)?;
    let alt = cfg.alternative;
    let mut rows: Vec<ReportRow> = Vec::new();
    let mut push = |analysis: String, outcome: Result<TestResult, StatsError>| rows.push(ReportRow { analysis, outcome, p_adjusted: None });

    let prop = |id: &str, f: fn(&ImageProperties) -> f64| props.get(id).map_or(f64::NAN, f);
    let covariates: [(&str, Vec<f64>); 7] = [
        ("entropy", table.rows.iter().map(|r| prop(&r.meta.id, |p| p.entropy)).collect()),
        ("shape", table.rows.iter().map(|r| prop(&r.meta.id, |p| p.shape)).collect()),
        ("texture", table.rows.iter().map(|r| prop(&r.meta.id, |p| p.texture)).collect()),
        ("peak_to_mean", table.rows.iter().map(|r| prop(&r.meta.id, |p| p.peak_to_mean)).collect()),
        ("arousal", table.rows.iter().map(|r| r.meta.arousal).collect()),
        ("valence", table.rows.iter().map(|r| r.meta.valence).collect()),
        ("human_acc", table.rows.iter().map(|r| r.meta.human_acc).collect()),
    ];
    let animacy: Vec<f64> = table.rows.iter().map(|r| r.meta.animate as u8 as f64).collect();
    let mut categories: Vec<&str> = table.rows.iter().map(|r| r.meta.category.as_str()).collect();
    categories.sort();
    categories.dedup();

    let mut hl = String::from("analysis,estimate,lo,hi,n,method\n");
    for (mi, m) in table.models.iter().enumerate() {
        for tap in Tap::ALL {
            let key = format!("{m}/{tap}");
            let pairs = table.block_pairs(mi, tap);
            push(format!("agreement_vs_chance/{key}"), agreement_vs_chance(&pairs, cfg.block_grid * cfg.block_grid, cfg.sub_seed(&format!("null/{key}"))));
            let mae = table.mae_column(mi, tap);
            let groups: Vec<Vec<f64>> = categories
                .iter()
                .map(|c| finite(&table.rows.iter().zip(&mae).filter(|(r, _)| r.meta.category == *c).map(|(_, v)| *v).collect::<Vec<_>>()))
                .filter(|g| !g.is_empty())
                .collect();
            push(format!("mae_by_category/{key}"), kruskal_wallis(&groups));
            let split = |want: &dyn Fn(&crate::compare::ComparisonRow) -> bool| {
                finite(&table.rows.iter().zip(&mae).filter(|(r, _)| want(r)).map(|(_, v)| *v).collect::<Vec<_>>())
            };
            push(format!("mae_animacy/{key}"), wilcoxon_rank_sum(&split(&|r| r.meta.animate), &split(&|r| !r.meta.animate), alt));
            push(
                format!("mae_partition/{key}"),
                wilcoxon_rank_sum(
                    &split(&|r| r.partition == Some(PartitionLabel::Control)),
                    &split(&|r| r.partition == Some(PartitionLabel::Challenge)),
                    alt,
                ),
            );
            for (name, values) in &covariates {
                push(format!("mae_vs_{name}/{key}"), spearman(values, &mae));
                push(format!("mae_vs_{name}_given_animacy/{key}"), partial_spearman(values, &mae, &animacy));
            }
        }
    }
    let pos = |name: &str| table.models.iter().position(|m| m == name);
    if let (Some(v), Some(r)) = (pos("vnet"), pos("resnet18")) {
        for tap in Tap::ALL {
            let key = format!("mae_paired/vnet-resnet18/{tap}");
            let (a, b) = (table.mae_column(v, tap), table.mae_column(r, tap));
            push(key.clone(), wilcoxon_paired(&a, &b, alt));
            let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).filter(|d| d.is_finite()).collect();
            match hodges_lehmann_ci(&diffs, 0.05) {
                Ok(h) => writeln!(hl, "{key},{:.10},{:.10},{:.10},{},{}", h.estimate, h.lo, h.hi, diffs.len(), h.method.as_str()).unwrap(),
                Err(_) => writeln!(hl, "{key},NA,NA,NA,{},NA", diffs.len()).unwrap(),
            }
        }
    }

    let mut families: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        families.entry(r.analysis.split('/').next().unwrap_or("").to_string()).or_default().push(i);
    }
    for idx in families.values() {
        let mut fam: Vec<ReportRow> = idx.iter().map(|&i| rows[i].clone()).collect();
        adjust_family(&mut fam);
        for (&i, r) in idx.iter().zip(fam) {
            rows[i] = r;
        }
    }
    write(&dir.join("report.csv"), report_csv(&rows))?;
    write(&dir.join("hodges_lehmann.csv"), hl)
}
