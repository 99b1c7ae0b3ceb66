use std::fs;

use gazecam::gaze::write_gaze_csv;
use gazecam::model::{Family, Model};
use gazecam::trainer::{accuracy, load_training_set, predict, train, DatasetIndex, TrainConfig};
use gazecam::workbench::pipeline::{stage_complete, RunPaths};
use gazecam::workbench::{parse_manifest, run_pipeline, synth_gaze, synth_images, RunConfig, Stage, SyntheticSpec};

#[test]
fn full_corpus_is_learnable() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec::default();
    let rows = synth_images(&spec, 11, dir.path()).unwrap();
    assert_eq!(rows.len(), 360);
    let data = load_training_set(&DatasetIndex::scan(dir.path()).unwrap()).unwrap();
    let model = Model::build(Family::Vnet.config(8, 12), 3).unwrap();
    let tc = TrainConfig { epochs: 4, batch_size: 16, seed: 5, ..TrainConfig::default() };
    let (model, _) = train(model, &data, &tc).unwrap();
    let acc = accuracy(&predict(&model, &data, 16).unwrap(), &data.labels);
    assert!(acc >= 0.6, "train accuracy {acc}");
}

#[test]
fn tiny_pipeline_completes_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    let gaze = dir.path().join("gaze.csv");
    let text = format!(
        "[run]\nseed = 3\n[paths]\nimages = {}\ngaze = {}\nout = {}\n[synth]\nn_categories = 3\nimages_per_category = 4\nn_participants = 3\n[train]\nwidth = 4\nepochs = 1\n",
        images.display(),
        gaze.display(),
        dir.path().join("out").display()
    );
    let cfg = RunConfig::from_text(&text, None).unwrap();
    synth_images(&cfg.synth, cfg.sub_seed("synth/images"), &images).unwrap();
    let manifest = parse_manifest(&fs::read_to_string(images.join("manifest.csv")).unwrap()).unwrap();
    fs::write(&gaze, write_gaze_csv(&synth_gaze(&cfg.synth, &manifest, cfg.sub_seed("synth/gaze")).unwrap())).unwrap();

    let paths = RunPaths::from_config(&cfg).unwrap();
    let summary = run_pipeline(&cfg, &paths, &Stage::ALL, false).unwrap();
    assert_eq!(summary.stages, Stage::ALL.to_vec());
    for s in Stage::ALL {
        assert!(stage_complete(&paths.stage_dir(s)), "{} incomplete", s.as_str());
    }
    let report = fs::read_to_string(paths.stage_dir(Stage::Stats).join("report.csv")).unwrap();
    assert!(report.lines().any(|l| l.starts_with("agreement_vs_chance/vnet/late")));
}
