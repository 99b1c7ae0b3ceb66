//! Synthesizes a small corpus and gaze log, then runs every stage.
//!
//! `cargo run --release -p gazecam --example reduced_run -- <out-dir> [seed]`

use std::time::Instant;

use gazecam::gaze::write_gaze_csv;
use gazecam::workbench::pipeline::RunPaths;
use gazecam::workbench::{run_pipeline, synth_gaze, synth_images, RunConfig, Stage};

fn main() {
    let mut args = std::env::args().skip(1);
    let root = std::path::PathBuf::from(args.next().expect("output directory"));
    let seed: u64 = args.next().map_or(1, |s| s.parse().expect("numeric seed"));
    let text = format!(
        "[run]\nseed = {seed}\n[synth]\nn_categories = 4\nimages_per_category = 20\nobject_weight = 1.0\n\
         [train]\nepochs = 10\nbatch_size = 16\n"
    );
    let cfg = RunConfig::from_text(&text, None).unwrap();
    let paths = RunPaths { images: root.join("images"), gaze: root.join("gaze.csv"), out: root.join("out") };
    let manifest = synth_images(&cfg.synth, cfg.sub_seed("synth/images"), &paths.images).unwrap();
    std::fs::write(&paths.gaze, write_gaze_csv(&synth_gaze(&cfg.synth, &manifest, cfg.sub_seed("synth/gaze")).unwrap())).unwrap();
    for stage in Stage::ALL {
        let t = Instant::now();
        run_pipeline(&cfg, &paths, &[stage], true).unwrap();
        println!("{}: {:.1?}", stage.as_str(), t.elapsed());
    }
}
