use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::saliency::ClassSource;

fn random_map(rng: &mut ChaCha8Rng) -> ImageMap {
    let mut v: Vec<f32> = (0..MAP_LEN).map(|_| rng.random::<f32>()).collect();
    let m = v.iter().copied().fold(0.0, f32::max);
    v.iter_mut().for_each(|x| *x /= m);
    ImageMap::from_values(v).unwrap()
}

fn brute_mae(e: &ImageMap, s: &ImageMap) -> f64 {
    let mut sum = 0.0f64;
    for y in 0..MAP_SIZE {
        for x in 0..MAP_SIZE {
            sum += (e.at(x, y) as f64 - s.at(x, y) as f64).abs();
        }
    }
    sum / (MAP_SIZE * MAP_SIZE) as f64
}

#[test]
fn mae_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_map(&mut rng);
    assert_eq!(mae(&a, &a).unwrap(), 0.0);
    let ones = ImageMap::from_values(vec![1.0; MAP_LEN]).unwrap();
    assert_eq!(mae(&ones, &ImageMap::zeros()).unwrap(), 1.0);
    let b = random_map(&mut rng);
    assert!((mae(&a, &b).unwrap() - brute_mae(&a, &b)).abs() < 1e-6);
    let short = ImageMap { values: vec![0.0; 10] };
    assert!(matches!(mae(&a, &short), Err(CompareError::Input(_))));
}

#[test]
fn block_examples() {
    assert_eq!(block_of(0.0, 0.0).unwrap().index, 0);
    assert_eq!(block_of(223.0, 223.0).unwrap().index, 15);
    assert_eq!(block_of(112.0, 50.0).unwrap(), TargetBlock { index: 2, row: 0, col: 2 });
    assert!(block_of(224.0, 0.0).is_err());
    assert!(block_of(-0.5, 3.0).is_err());
    assert_eq!(block_on_grid(223.9, 0.0, 7).unwrap(), TargetBlock { index: 6, row: 0, col: 6 });
}

#[test]
fn blocks_tile_the_image_evenly() {
    let mut counts = [0usize; 16];
    for y in 0..MAP_SIZE {
        for x in 0..MAP_SIZE {
            let b = block_of(x as f64, y as f64).unwrap();
            assert_eq!(b.index, 4 * b.row + b.col);
            assert_eq!((b.col, b.row), (x / 56, y / 56));
            counts[b.index] += 1;
        }
    }
    assert!(counts.iter().all(|&c| c == 56 * 56));
}

#[test]
fn agreement_examples() {
    assert_eq!(block_agreement(&[(3, 3), (9, 9)]).unwrap(), 100.0);
    let seven = [(0, 0), (1, 2), (5, 5), (6, 7), (8, 9), (10, 11), (14, 15)];
    assert!((block_agreement(&seven).unwrap() - 200.0 / 7.0).abs() < 1e-12);
    assert!(block_agreement(&[]).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pairs: Vec<(usize, usize)> = (0..100_000).map(|_| (rng.random_range(0..16), rng.random_range(0..16))).collect();
    assert!((block_agreement(&pairs).unwrap() - 6.25).abs() < 0.5);
}

fn pin(id: &str, acc: f64, a: Option<bool>, b: Option<bool>) -> PartitionInput {
    PartitionInput { id: id.into(), human_acc: acc, correct: [a, b] }
}

#[test]
fn partition_examples() {
    let p = partition_images(
        &[
            pin("c", 1.0, Some(true), Some(true)),
            pin("h", 1.0, Some(false), Some(false)),
            pin("s", 1.0, Some(true), Some(false)),
            pin("lo", 0.9, Some(true), Some(true)),
        ],
        1.0,
    )
    .unwrap();
    assert_eq!(p.control.iter().collect::<Vec<_>>(), ["c"]);
    assert_eq!(p.challenge.iter().collect::<Vec<_>>(), ["h"]);
    assert_eq!(p.unclassified.iter().collect::<Vec<_>>(), ["lo", "s"]);
    let relaxed = partition_images(&[pin("lo", 0.9, Some(true), Some(true))], 0.8).unwrap();
    assert!(relaxed.control.contains("lo"));
    assert!(matches!(partition_images(&[pin("x", 1.0, None, Some(true))], 1.0), Err(CompareError::Input(_))));
    assert!(matches!(partition_images(&vec![pin("x", 1.0, Some(true), Some(true)); 2], 1.0), Err(CompareError::Duplicate { .. })));
}

fn grid(tap: Tap, n: usize, hot: usize) -> SaliencyGrid {
    let mut values = vec![0.1; n * n];
    values[hot] = 1.0;
    SaliencyGrid { tap, rows: n, cols: n, values, class_used: 0, class_source: ClassSource::Predicted }
}

fn meta(id: &str, cat: &str, arousal: f64) -> ImageMeta {
    ImageMeta { id: id.into(), category: cat.into(), animate: cat == "dog", human_acc: 1.0, arousal, valence: 8.0 - arousal }
}

fn fixture() -> CompareInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ids = ["a", "b", "c"];
    let sal = |model: &str, hot_late: usize, wrong: &str| ModelSaliency {
        model: model.into(),
        images: ids
            .iter()
            .map(|id| {
                let grids = [grid(Tap::Early, 28, 0), grid(Tap::Middle, 14, 15), grid(Tap::Late, 4, hot_late)];
                ImageSaliency::from_grids(id, &grids, if *id == wrong { 1 } else { 0 }, 0)
            })
            .collect(),
    };
    CompareInputs {
        meta: vec![meta("a", "dog", 1.0), meta("b", "car", 4.0), meta("c", "car", 7.0)],
        heatmaps: ids.iter().map(|id| (id.to_string(), random_map(&mut rng))).collect(),
        fixations: vec![
            ("a".into(), vec![(10.0, 10.0), (120.0, 130.0), (130.0, 120.0)]),
            ("b".into(), vec![(200.0, 10.0)]),
            ("c".into(), vec![]),
        ],
        models: vec![sal("resnet18", 10, "b"), sal("vnet", 5, "c")],
    }
}

#[test]
fn compare_run_matches_direct_metrics() {
    let inputs = fixture();
    let t = compare_run(&inputs, &CompareOptions::default()).unwrap();
    assert_eq!(t.rows.len(), 3);
    assert!(t.orphans.is_empty());
    let a = &t.rows[0];
    assert_eq!(a.human_block, Some(10));
    assert_eq!(t.rows[1].human_block, Some(3));
    assert_eq!(t.rows[2].human_block, None);
    assert_eq!(a.models[0].taps[2].block, Some(10));
    assert_eq!(a.models[1].taps[2].block, Some(5));
    // Early grid: cell (0,0) of 28 maps to the top-left block.
    assert_eq!(a.models[0].taps[0].block, Some(0));
    let want = mae(&inputs.heatmaps[1].1, &upsample_and_normalize(&grid(Tap::Middle, 14, 15))).unwrap();
    assert_eq!(t.rows[1].models[1].taps[1].mae, Some(want));
    assert_eq!(a.partition, Some(PartitionLabel::Control));
    assert_eq!(t.rows[1].partition, Some(PartitionLabel::Unclassified));
    assert_eq!(t.block_pairs(0, Tap::Late), vec![(10, 10), (3, 10)]);
    use Tertile::*;
    assert_eq!(t.rows.iter().map(|r| r.arousal_tertile).collect::<Vec<_>>(), vec![Low, Medium, High]);

    let csv = t.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0].split(',').count(), 10 + 2 * 7);
    assert!(lines[0].starts_with("image,category,animate,human_acc,arousal,arousal_tertile,valence,valence_tertile,human_block,partition,resnet18_correct,resnet18_early_block,resnet18_early_mae"));
    assert!(lines[3].contains(",NA,"));

    let back = ComparisonTable::from_csv(&csv).unwrap();
    assert_eq!(back.to_csv(), csv);
    assert_eq!(back.block_pairs(0, Tap::Late), t.block_pairs(0, Tap::Late));
    assert!(ComparisonTable::from_csv("image,category\n").is_err());
}

#[test]
fn missing_and_orphan_inputs_are_flagged() {
    let mut inputs = fixture();
    inputs.models.iter_mut().for_each(|m| m.images.clear());
    let t = compare_run(&inputs, &CompareOptions::default()).unwrap();
    for r in &t.rows {
        assert!(r.models.iter().all(|m| m.correct.is_none() && m.taps.iter().all(|t| t.block.is_none() && t.mae.is_none())));
        assert_eq!(r.partition, None);
    }
    let mut inputs = fixture();
    inputs.heatmaps.push(("zzz".into(), ImageMap::zeros()));
    inputs.fixations.push(("yyy".into(), vec![]));
    let t = compare_run(&inputs, &CompareOptions::default()).unwrap();
    assert_eq!(t.orphans, vec![Orphan { id: "zzz".into(), source: "heatmaps".into() }, Orphan { id: "yyy".into(), source: "fixations".into() }]);
}

#[test]
fn duplicates_and_unnormalized_maps_are_rejected() {
    let mut inputs = fixture();
    inputs.meta.push(meta("b", "car", 2.0));
    match compare_run(&inputs, &CompareOptions::default()) {
        Err(CompareError::Duplicate { id, .. }) => assert_eq!(id, "b"),
        other => panic!("{other:?}"),
    }
    let mut inputs = fixture();
    inputs.heatmaps[0].1.values[0] = 2.0;
    assert!(matches!(compare_run(&inputs, &CompareOptions::default()), Err(CompareError::Input(_))));
    let mut inputs = fixture();
    inputs.models[0].images[2].maps[1].values[7] = 0.5 * f32::MAX;
    assert!(matches!(compare_run(&inputs, &CompareOptions::default()), Err(CompareError::Input(_))));
}

fn small_map() -> impl Strategy<Value = ImageMap> {
    (any::<u64>()).prop_map(|s| random_map(&mut ChaCha8Rng::seed_from_u64(s)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mae_is_a_metric(e in small_map(), s in small_map(), t in small_map()) {
        let es = mae(&e, &s).unwrap();
        prop_assert_eq!(es, mae(&s, &e).unwrap());
        prop_assert!(es <= mae(&e, &t).unwrap() + mae(&t, &s).unwrap() + 1e-6);
        prop_assert!((0.0..=1.0).contains(&es));
    }

    #[test]
    fn agreement_ignores_order(pairs in proptest::collection::vec((0usize..16, 0usize..16), 1..60), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(block_agreement(&pairs).unwrap(), block_agreement(&shuffled).unwrap());
    }

    #[test]
    fn partition_covers_inputs_disjointly(flags in proptest::collection::vec((0u8..3, any::<bool>(), any::<bool>()), 0..40)) {
        let inputs: Vec<PartitionInput> = flags.iter().enumerate()
            .map(|(i, &(h, a, b))| pin(&format!("i{i}"), h as f64 / 2.0, Some(a), Some(b)))
            .collect();
        let p = partition_images(&inputs, 1.0).unwrap();
        let total = p.control.len() + p.challenge.len() + p.unclassified.len();
        let union: BTreeSet<&String> = p.control.iter().chain(&p.challenge).chain(&p.unclassified).collect();
        prop_assert_eq!(total, inputs.len());
        prop_assert_eq!(union.len(), inputs.len());
    }
}
