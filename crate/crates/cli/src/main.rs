use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gazecam::gaze::write_gaze_csv;
use gazecam::imgstats::{properties, properties_csv};
use gazecam::image::read_image;
use gazecam::model::{load_weights, save_weights, tap_grid, theoretical_rfs, validate_vnet_constraints, ArchLabel, ArchitectureConfig, Family, Tap};
use gazecam::trainer::{fine_tune, load_training_set, metrics_csv, DatasetIndex};
use gazecam::workbench::pipeline::{image_id, RunPaths};
use gazecam::workbench::{parse_manifest, run_pipeline, synth_gaze, synth_images, RunConfig, Stage, WorkbenchError, SEED_ENV};

#[derive(Parser)]
#[command(name = "gazecam", version, about = "Compare human gaze heatmaps with CNN GradCAM saliency")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration file (`key = value` with `[section]` headers).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Image corpus root, overriding `[paths] images`.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Gaze log, overriding `[paths] gaze`.
    #[arg(long)]
    gaze: Option<PathBuf>,
    /// Output root, overriding `[paths] out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic image corpus and its manifest.
    SynthImages(Common),
    /// Simulate a gaze log for a synthetic corpus (`--out` is the CSV file).
    SynthGaze(Common),
    /// Train every configured model from scratch.
    Train(Common),
    /// Retrain only the classifier of a saved model.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Architecture table of the saved model.
        #[arg(long)]
        arch: PathBuf,
        /// Saved weights.
        #[arg(long)]
        weights: PathBuf,
    },
    /// GradCAM grids for every image and model.
    Gradcam(Common),
    /// Gaze heatmaps and per-trial fixations.
    Heatmap(Common),
    /// Entropy, shape, texture and spectral peak-to-mean per image (`--out` is the CSV file).
    Imgstats(Common),
    /// Join heatmaps, saliency and metadata into the comparison table.
    Compare(Common),
    /// Hypothesis tests over the comparison table.
    Stats(Common),
    /// Run the staged pipeline.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of train,gradcam,heatmaps,compare,stats.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<String>>,
    },
    /// Print receptive fields and tap grids of an architecture table.
    ValidateArch {
        /// Table file; omit to use `--builtin`.
        file: Option<PathBuf>,
        #[arg(long, conflicts_with = "file")]
        builtin: Option<String>,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 12)]
        classes: usize,
    },
}

fn load_config(common: &Common) -> Result<RunConfig, WorkbenchError> {
    let text = match &common.config {
        Some(p) => fs::read_to_string(p).map_err(|e| WorkbenchError::Io { path: p.display().to_string(), detail: e.to_string() })?,
        None => String::new(),
    };
    let env = std::env::var(SEED_ENV).ok();
    let mut cfg = RunConfig::from_text(&text, env.as_deref())?;
    for (slot, flag) in [(&mut cfg.images, &common.images), (&mut cfg.gaze, &common.gaze), (&mut cfg.out, &common.out)] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    Ok(cfg)
}

fn required(p: &Option<PathBuf>, what: &str) -> Result<PathBuf, WorkbenchError> {
    p.clone().ok_or_else(|| WorkbenchError::Config(format!("--{what} (or [paths] {what}) is required")))
}

fn guard(path: &Path, force: bool) -> Result<(), WorkbenchError> {
    if path.exists() && !force {
        return Err(WorkbenchError::Exists(path.display().to_string()));
    }
    Ok(())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), WorkbenchError> {
    let io = |e: std::io::Error| WorkbenchError::Io { path: path.display().to_string(), detail: e.to_string() };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, bytes).map_err(io)
}

fn stage(common: &Common, stages: &[Stage]) -> Result<(), WorkbenchError> {
    let cfg = load_config(common)?;
    let paths = RunPaths::from_config(&cfg).or_else(|_| {
        // Stages that do not touch a path need not configure it.
        Ok::<_, WorkbenchError>(RunPaths {
            images: cfg.images.clone().unwrap_or_default(),
            gaze: cfg.gaze.clone().unwrap_or_default(),
            out: required(&cfg.out, "out")?,
        })
    })?;
    let summary = run_pipeline(&cfg, &paths, stages, common.force)?;
    for s in summary.stages {
        println!("{}\t{}", s.as_str(), paths.stage_dir(s).display());
    }
    println!("config_hash\t{}", summary.config_hash);
    Ok(())
}

fn run(cli: Cli) -> Result<(), WorkbenchError> {
    match cli.command {
        Command::SynthImages(c) => {
            let cfg = load_config(&c)?;
            let out = required(&cfg.out, "out")?;
            guard(&out.join("manifest.csv"), c.force)?;
            let images = synth_images(&cfg.synth, cfg.sub_seed("synth/images"), &out)?;
            println!("{} images\t{}", images.len(), out.display());
        }
        Command::SynthGaze(c) => {
            let cfg = load_config(&c)?;
            let images = required(&cfg.images, "images")?;
            let out = required(&cfg.out, "out")?;
            guard(&out, c.force)?;
            let mpath = images.join("manifest.csv");
            let text = fs::read_to_string(&mpath).map_err(|e| WorkbenchError::Input(format!("{}: {e}", mpath.display())))?;
            let trials = synth_gaze(&cfg.synth, &parse_manifest(&text)?, cfg.sub_seed("synth/gaze"))?;
            write(&out, write_gaze_csv(&trials))?;
            println!("{} trials\t{}", trials.len(), out.display());
        }
        Command::Train(c) => stage(&c, &[Stage::Train])?,
        Command::Gradcam(c) => stage(&c, &[Stage::Gradcam])?,
        Command::Heatmap(c) => stage(&c, &[Stage::Heatmaps])?,
        Command::Compare(c) => stage(&c, &[Stage::Compare])?,
        Command::Stats(c) => stage(&c, &[Stage::Stats])?,
        Command::Pipeline { common, stages } => {
            let stages = match stages {
                None => Stage::ALL.to_vec(),
                Some(names) => names
                    .iter()
                    .map(|n| Stage::parse(n.trim()).ok_or_else(|| WorkbenchError::Config(format!("unknown stage {n:?}"))))
                    .collect::<Result<_, _>>()?,
            };
            stage(&common, &stages)?;
        }
        Command::Finetune { common, arch, weights } => {
            let cfg = load_config(&common)?;
            let images = required(&cfg.images, "images")?;
            let out = required(&cfg.out, "out")?;
            let text = fs::read_to_string(&arch).map_err(|e| WorkbenchError::Input(format!("{}: {e}", arch.display())))?;
            let config = ArchitectureConfig::parse(&text).map_err(|e| WorkbenchError::Input(format!("{}: {e}", arch.display())))?;
            let name = config.label.as_str();
            let target = out.join(format!("{name}_finetuned.gzw"));
            guard(&target, common.force)?;
            let model = load_weights(config, &weights).map_err(|e| WorkbenchError::Input(e.to_string()))?;
            let index = DatasetIndex::scan(&images).map_err(|e| WorkbenchError::Input(e.to_string()))?;
            let data = load_training_set(&index).map_err(|e| WorkbenchError::Input(e.to_string()))?;
            let tc = gazecam::trainer::TrainConfig { seed: cfg.sub_seed("finetune"), fine_tune: true, ..cfg.train.clone() };
            let (model, metrics) = fine_tune(model, &data, &tc).map_err(|e| WorkbenchError::Runtime(e.to_string()))?;
            save_weights(&model, &target).map_err(|e| WorkbenchError::Runtime(e.to_string()))?;
            write(&out.join(format!("{name}_finetuned_metrics.csv")), metrics_csv(&metrics))?;
            println!("{}", target.display());
        }
        Command::Imgstats(c) => {
            let cfg = load_config(&c)?;
            let images = required(&cfg.images, "images")?;
            let out = required(&cfg.out, "out")?;
            guard(&out, c.force)?;
            let index = DatasetIndex::scan(&images).map_err(|e| WorkbenchError::Input(e.to_string()))?;
            let mut rows = Vec::new();
            for (path, _) in &index.records {
                let img = read_image(path).map_err(|e| WorkbenchError::Input(e.to_string()))?;
                rows.push((image_id(path), properties(&img)));
            }
            write(&out, properties_csv(&rows))?;
            println!("{} images\t{}", rows.len(), out.display());
        }
        Command::ValidateArch { file, builtin, width, classes } => {
            let config = match (file, builtin) {
                (Some(p), _) => {
                    let text = fs::read_to_string(&p).map_err(|e| WorkbenchError::Input(format!("{}: {e}", p.display())))?;
                    ArchitectureConfig::parse(&text).map_err(|e| WorkbenchError::Input(format!("{}: {e}", p.display())))?
                }
                (None, Some(b)) => {
                    Family::parse(&b).ok_or_else(|| WorkbenchError::Config(format!("unknown built-in {b:?}")))?.config(width, classes)
                }
                (None, None) => return Err(WorkbenchError::Config("give an architecture file or --builtin".into())),
            };
            config.validate().map_err(|e| WorkbenchError::Input(e.to_string()))?;
            println!("layer,rfs,jump");
            for rf in theoretical_rfs(&config) {
                println!("{},{},{}", rf.layer, rf.size, rf.jump);
            }
            for tap in Tap::ALL {
                let (h, w) = tap_grid(&config, tap).map_err(|e| WorkbenchError::Input(e.to_string()))?;
                println!("tap {tap}: {h}x{w}");
            }
            if config.label == ArchLabel::Vnet {
                let report = validate_vnet_constraints(&config);
                for c in &report.checks {
                    println!("check {}: {} ({})", c.name, if c.passed { "pass" } else { "FAIL" }, c.detail);
                }
                if !report.all_passed() {
                    return Err(WorkbenchError::Input("vnet constraints not met".into()));
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", serde_json::json!({ "error": "usage", "stage": null, "message": first, "exit_code": 1 }));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({
                "error": e.kind(),
                "stage": e.stage(),
                "message": e.to_string(),
                "exit_code": e.exit_code(),
            });
            eprintln!("{line}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
