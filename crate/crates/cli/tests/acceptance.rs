//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Runs without the libtest harness so the verdicts are printed even when
//! everything passes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use gazecam::compare::{block_agreement, mae};
use gazecam::gaze::{build_heatmap, GazeSample, HeatmapSource, Rect, SampleKind, Side, TrialRecord, Window};
use gazecam::map::{ImageMap, MAP_SIZE};
use gazecam::model::{resnet18, validate_vnet_constraints, vnet, Family, Model, Tap};
use gazecam::oracle::{gradcheck, stats as oracle};
use gazecam::saliency::{gradcam_all, ClassChoice};
use gazecam::stats::{hodges_lehmann_ci, kruskal_wallis, spearman, wilcoxon_rank_sum, wilcoxon_signed_rank, Alternative, Method};
use gazecam::trainer::{accuracy, fine_tune, load_training_set, predict, train, DatasetIndex, TrainConfig};
use gazecam::workbench::{synth_images, RunConfig};
use gazecam::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn c1_grid_resolution() -> Verdict {
    let img = Tensor::from_fn(&[1, 3, 224, 224], |i| ((i * 7919) % 255) as f32 / 255.0 - 0.5);
    let mut seen = Vec::new();
    for (name, cfg) in [("resnet18", resnet18(64, 12)), ("vnet", vnet(64, 12))] {
        let model = Model::build(cfg, 3).map_err(|e| e.to_string())?;
        let res = gradcam_all(&model, &img, ClassChoice::Predicted).map_err(|e| e.to_string())?;
        let late = res.grid(Tap::Late);
        seen.push(format!("{name} late {}x{}", late.rows, late.cols));
        let want = if name == "vnet" { 4 } else { 7 };
        ensure(late.rows == want && late.cols == want && late.values.len() == want * want, seen.join(", "))?;
    }
    Ok(seen.join(", "))
}

fn c2_vnet_constraints() -> Verdict {
    let report = validate_vnet_constraints(&vnet(64, 12));
    let names: Vec<String> = report.checks.iter().map(|c| format!("{}={}", c.name, if c.passed { "pass" } else { "fail" })).collect();
    ensure(report.checks.len() == 3 && report.all_passed(), names.join(", "))?;
    Ok(names.join(", "))
}

fn c3_gradients() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut params = 0;
    for seed in 0..3 {
        let r = gradcheck::check_random_network(seed, 1e-3, 1e-6);
        ensure(r.parameters <= 10_000, format!("{} parameters", r.parameters))?;
        params = r.parameters;
        worst = worst.max(r.max_relative_error);
    }
    ensure(worst < 1e-3, format!("max relative error {worst:.3e}"))?;
    Ok(format!("3 nets of {params} parameters, max relative error {worst:.3e}"))
}

fn random_map(rng: &mut ChaCha8Rng) -> ImageMap {
    let mut v: Vec<f32> = (0..MAP_SIZE * MAP_SIZE).map(|_| rng.random::<f32>() * 0.999).collect();
    let peak = rng.random_range(0..v.len());
    v[peak] = 1.0;
    ImageMap::from_values(v).expect("full map")
}

fn c4_mae_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (a, b) = (random_map(&mut rng), random_map(&mut rng));
        let mut brute = 0.0f64;
        for y in 0..MAP_SIZE {
            for x in 0..MAP_SIZE {
                brute += (a.at(x, y) as f64 - b.at(x, y) as f64).abs();
            }
        }
        brute /= (MAP_SIZE * MAP_SIZE) as f64;
        worst = worst.max((mae(&a, &b).map_err(|e| e.to_string())? - brute).abs());
        ensure(mae(&a, &a).map_err(|e| e.to_string())? == 0.0, "identity pair is not 0")?;
    }
    ensure(worst <= 1e-6, format!("max deviation {worst:.3e}"))?;
    Ok(format!("1000 pairs, max deviation {worst:.3e}, identity pairs exactly 0"))
}

fn c5_chance_agreement() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pairs: Vec<(usize, usize)> = (0..100_000).map(|_| (rng.random_range(0..16), rng.random_range(0..16))).collect();
    let pct = block_agreement(&pairs).map_err(|e| e.to_string())?;
    ensure((pct - 6.25).abs() <= 0.5, format!("{pct:.3}%"))?;
    Ok(format!("{pct:.3}% over 100000 trials"))
}

fn c6_heatmap_kernel() -> Verdict {
    let rect = Rect { x: 336.0, y: 316.0 };
    let sample = GazeSample { t: 5.0, x: rect.x + 224.0, y: rect.y + 224.0, kind: SampleKind::Sample };
    let trial = TrialRecord {
        participant: "p".into(),
        trial: "1".into(),
        image: "img".into(),
        side: Side::Left,
        rect,
        presentation_ms: 150,
        samples: vec![sample],
        invalid: None,
    };
    let h = build_heatmap("img", &[&trial], Window::Feedforward, HeatmapSource::Samples).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for y in 0..MAP_SIZE {
        for x in 0..MAP_SIZE {
            let (dx, dy) = (x as f64 - 112.0, y as f64 - 112.0);
            let want = if dx.abs() > 45.0 || dy.abs() > 45.0 { 0.0 } else { (-(dx * dx + dy * dy) / 450.0).exp() };
            worst = worst.max((h.map.at(x, y) as f64 - want).abs());
        }
    }
    ensure(worst <= 1e-6, format!("max deviation {worst:.3e}"))?;
    Ok(format!("max deviation {worst:.3e} over all pixels"))
}

fn two_sided(le: f64, ge: f64) -> f64 {
    (2.0 * le.min(ge)).min(1.0)
}

fn c7_statistics() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut stat_err, mut p_err): (f64, f64) = (0.0, 0.0);
    let mut counts = [0usize; 5];
    let track = |s: f64, p: f64, stat_err: &mut f64, p_err: &mut f64| {
        *stat_err = stat_err.max(s);
        *p_err = p_err.max(p);
    };
    while counts[0] < 100 {
        let n = rng.random_range(4..=8);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
        if let Ok(r) = spearman(&x, &y) {
            track((r.statistic - oracle::spearman_rho(&x, &y)).abs(), 0.0, &mut stat_err, &mut p_err);
            counts[0] += 1;
        }
    }
    while counts[1] < 100 {
        let n = rng.random_range(1..=8);
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(-4..=4) as f64).collect();
        let Ok(r) = wilcoxon_signed_rank(&d, 0.0, Alternative::TwoSided) else { continue };
        let (v, le, ge) = oracle::signed_rank(&d);
        ensure(r.method == Method::Exact, "signed-rank fixture not exact")?;
        track((r.statistic - v).abs(), (r.p_value - two_sided(le, ge)).abs(), &mut stat_err, &mut p_err);
        counts[1] += 1;
    }
    while counts[2] < 100 {
        let na = rng.random_range(1..=4);
        let nb = rng.random_range(1..=8 - na);
        let a: Vec<f64> = (0..na).map(|_| rng.random_range(0..6) as f64).collect();
        let b: Vec<f64> = (0..nb).map(|_| rng.random_range(0..6) as f64).collect();
        let (w, le, ge) = oracle::rank_sum(&a, &b);
        for (alt, p) in [(Alternative::TwoSided, two_sided(le, ge)), (Alternative::Less, le), (Alternative::Greater, ge)] {
            let r = wilcoxon_rank_sum(&a, &b, alt).map_err(|e| e.to_string())?;
            ensure(r.method == Method::Exact, "rank-sum fixture not exact")?;
            track((r.statistic - w).abs(), (r.p_value - p).abs(), &mut stat_err, &mut p_err);
        }
        counts[2] += 1;
    }
    while counts[3] < 100 {
        // Three groups: the chi-square(2) tail is exp(-H/2).
        let groups: Vec<Vec<f64>> = (0..3).map(|_| (0..rng.random_range(2..=5)).map(|_| rng.random_range(0..8) as f64).collect()).collect();
        let Ok(r) = kruskal_wallis(&groups) else { continue };
        let h = oracle::kruskal_h(&groups);
        if !h.is_finite() {
            continue;
        }
        track((r.statistic - h).abs(), (r.p_value - (-h / 2.0).exp()).abs(), &mut stat_err, &mut p_err);
        counts[3] += 1;
    }
    while counts[4] < 100 {
        let n = rng.random_range(2..=8);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-50..=50) as f64 / 10.0).collect();
        let c = hodges_lehmann_ci(&x, 0.05).map_err(|e| e.to_string())?;
        let (e, lo, hi) = oracle::hodges_lehmann(&x, 0.05);
        track((c.estimate - e).abs().max((c.lo - lo).abs()).max((c.hi - hi).abs()), 0.0, &mut stat_err, &mut p_err);
        counts[4] += 1;
    }
    ensure(stat_err <= 1e-9 && p_err <= 1e-6, format!("statistic error {stat_err:.3e}, p error {p_err:.3e}"))?;
    Ok(format!(
        "{counts:?} fixtures (spearman, signed-rank, rank-sum, kruskal-wallis, hodges-lehmann); statistic error {stat_err:.1e}, p error {p_err:.1e}"
    ))
}

const SEED: u64 = 7;

fn run_config(out: &Path, images: &Path, gaze: &Path) -> String {
    format!(
        "[run]\nseed = {SEED}\n[paths]\nimages = {}\ngaze = {}\nout = {}\n\
         [synth]\nn_categories = 4\nimages_per_category = 20\nobject_weight = 1.0\n\
         [train]\nepochs = 10\nbatch_size = 16\n",
        images.display(),
        gaze.display(),
        out.display()
    )
}

fn c8_training(root: &Path) -> Verdict {
    let cfg = RunConfig::from_text(&run_config(root, &root.join("images"), &root.join("gaze.csv")), None).map_err(|e| e.to_string())?;
    let images = root.join("c8_images");
    synth_images(&cfg.synth, cfg.sub_seed("synth/images"), &images).map_err(|e| e.to_string())?;
    let index = DatasetIndex::scan(&images).map_err(|e| e.to_string())?;
    ensure(index.num_classes() == 4 && index.records.len() == 80, "corpus is not 4 x 20")?;
    let data = load_training_set(&index).map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut ok = true;
    for family in [Family::Resnet18, Family::Vnet] {
        let model = Model::build(family.config(cfg.width, 4), cfg.sub_seed(&format!("init/{}", family.as_str()))).map_err(|e| e.to_string())?;
        let tc = TrainConfig { seed: cfg.sub_seed(&format!("train/{}", family.as_str())), ..cfg.train.clone() };
        let (model, _) = train(model, &data, &tc).map_err(|e| e.to_string())?;
        let acc = accuracy(&predict(&model, &data, 16).map_err(|e| e.to_string())?, &data.labels);
        ok &= acc >= 0.95;

        let head = model.classifier_params();
        let before: Vec<(String, Vec<u32>)> = model
            .tensors()
            .filter(|(n, _)| !head.contains(*n))
            .map(|(n, t)| (n.clone(), t.data().iter().map(|v| v.to_bits()).collect()))
            .collect();
        let ft = TrainConfig { fine_tune: true, fine_tune_epochs: 5, ..tc };
        let (tuned, _) = fine_tune(model, &data, &ft).map_err(|e| e.to_string())?;
        let after: Vec<(String, Vec<u32>)> = tuned
            .tensors()
            .filter(|(n, _)| !head.contains(*n))
            .map(|(n, t)| (n.clone(), t.data().iter().map(|v| v.to_bits()).collect()))
            .collect();
        let frozen = before == after;
        ok &= frozen;
        lines.push(format!("{} acc {:.1}% frozen backbone {}", family.as_str(), 100.0 * acc, if frozen { "bit-identical" } else { "CHANGED" }));
    }
    ensure(ok, lines.join("; "))?;
    Ok(lines.join("; "))
}

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_gazecam")).args(args).env_remove("GAZECAM_SEED").output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), format!("gazecam {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
}

const COMPARED: [&str; 7] = [
    "compare/comparison.csv",
    "compare/agreement.csv",
    "compare/properties.csv",
    "compare/orphans.csv",
    "stats/report.csv",
    "stats/hodges_lehmann.csv",
    "train/summary.csv",
];

fn c9_determinism(root: &Path) -> Verdict {
    let images = root.join("images");
    let gaze = root.join("gaze.csv");
    let s = |p: &Path| p.display().to_string();
    for (i, out) in ["run_a", "run_b"].iter().enumerate() {
        let cfg_path = root.join(format!("{out}.cfg"));
        fs::write(&cfg_path, run_config(&root.join(out), &images, &gaze)).map_err(|e| e.to_string())?;
        if i == 0 {
            cli(&["synth-images", "--config", &s(&cfg_path), "--out", &s(&images)])?;
            cli(&["synth-gaze", "--config", &s(&cfg_path), "--out", &s(&gaze)])?;
        }
        cli(&["pipeline", "--config", &s(&cfg_path)])?;
    }
    let mut differing = Vec::new();
    for rel in COMPARED {
        let read = |run: &str| fs::read(root.join(run).join(rel)).map_err(|e| format!("{run}/{rel}: {e}"));
        if read("run_a")? != read("run_b")? {
            differing.push(rel);
        }
    }
    ensure(differing.is_empty(), format!("differ: {differing:?}"))?;
    Ok(format!("{} artifact CSVs byte-identical across two pipeline runs", COMPARED.len()))
}

fn c10_directional(root: &Path) -> Verdict {
    let report = fs::read_to_string(root.join("run_a/stats/report.csv")).map_err(|e| e.to_string())?;
    let agreement = fs::read_to_string(root.join("run_a/compare/agreement.csv")).map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut ok = true;
    for model in ["resnet18", "vnet"] {
        let key = format!("agreement_vs_chance/{model}/late,");
        let row = report.lines().find(|l| l.starts_with(&key)).ok_or(format!("no report row {key}"))?;
        let p: f64 = row.split(',').nth(3).and_then(|v| v.parse().ok()).ok_or(format!("unparsable row {row}"))?;
        let pct = agreement
            .lines()
            .find(|l| l.starts_with(&format!("{model},late,")))
            .and_then(|l| l.rsplit(',').next())
            .unwrap_or("NA")
            .to_string();
        ok &= p < 0.01;
        lines.push(format!("{model} late agreement {pct}% (p = {p:.2e})"));
    }
    ensure(ok, lines.join("; "))?;
    Ok(lines.join("; "))
}

fn main() {
    let root = tempfile::tempdir().expect("temporary directory");
    let root_path: PathBuf = root.path().to_path_buf();
    type Check<'a> = (u32, &'a str, Duration, Box<dyn Fn() -> Verdict + 'a>);
    let minute = Duration::from_secs(60);
    let checks: Vec<Check> = vec![
        (1, "late GradCAM grid sizes", minute, Box::new(c1_grid_resolution)),
        (2, "vnet geometric constraints", Duration::from_secs(1), Box::new(c2_vnet_constraints)),
        (3, "gradients vs central differences", 5 * minute, Box::new(c3_gradients)),
        (4, "MAE vs brute-force oracle", minute, Box::new(c4_mae_oracle)),
        (5, "chance-level block agreement", minute, Box::new(c5_chance_agreement)),
        (6, "single-sample heatmap kernel", minute, Box::new(c6_heatmap_kernel)),
        (7, "statistics vs enumeration oracles", 5 * minute, Box::new(c7_statistics)),
        (8, "reduced-scale training and frozen fine-tune", 15 * minute, Box::new(|| c8_training(&root_path))),
        (9, "end-to-end pipeline determinism", 20 * minute, Box::new(|| c9_determinism(&root_path))),
        (10, "synthetic fixations vs GradCAM maxima above chance", minute, Box::new(|| c10_directional(&root_path))),
    ];
    let mut failed = 0;
    for (id, name, limit, check) in &checks {
        let t = Instant::now();
        let verdict = check();
        let took = t.elapsed();
        let (ok, detail) = match verdict {
            Ok(d) if took <= *limit => (true, d),
            Ok(d) => (false, format!("{d}; took longer than {limit:?}")),
            Err(d) => (false, d),
        };
        failed += !ok as usize;
        println!("criterion {id:>2} {} {name}: {detail} [{took:.1?}]", if ok { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {} of {} criteria passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
