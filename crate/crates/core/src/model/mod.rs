//! Architecture tables, geometry, parameter containers and weight files.

pub mod builtin;
pub mod geometry;
pub mod network;
pub mod spec;
pub mod weights;

pub use builtin::{resnet18, vnet, Family};
pub use geometry::{output_grid, tap_grid, theoretical_rfs, validate_vnet_constraints, ReceptiveField, VnetReport};
pub use network::{argmax_rows, ForwardPass, Mode, Model, ModelError, ParamGrads, Provenance};
pub use spec::{ArchLabel, ArchitectureConfig, ConfigError, LayerKind, LayerSpec, Norm, Tap};
pub use weights::{load_weights, save_weights, WeightsError};

#[cfg(test)]
mod tests {
    use super::geometry::{LayerShape, CHECK_CONV_COUNT, CHECK_LATE_GRID, CHECK_RFS_INCREASING};
    use super::*;
    use crate::autodiff::Graph;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn toy(layers: Vec<LayerSpec>) -> ArchitectureConfig {
        ArchitectureConfig::new(ArchLabel::Custom, layers)
    }

    #[test]
    fn resnet18_has_four_stages_and_late_tap_on_stage_four() {
        let cfg = resnet18(64, 12);
        cfg.validate().unwrap();
        let stages: std::collections::BTreeSet<_> =
            cfg.layers.iter().filter_map(|l| l.name.strip_prefix('s').and_then(|r| r.chars().next())).filter(char::is_ascii_digit).collect();
        assert_eq!(stages.len(), 4);
        let residual_convs = cfg.layers.iter().filter(|l| l.residual_source.is_some() && l.kind == LayerKind::Conv).count();
        assert_eq!(residual_convs, 8);
        assert_eq!(cfg.tap_layer(Tap::Early).unwrap().name, "s1b2_conv2");
        assert_eq!(cfg.tap_layer(Tap::Middle).unwrap().name, "s3b2_conv2");
        assert_eq!(cfg.tap_layer(Tap::Late).unwrap().name, "s4b2_conv2");
        assert_eq!(cfg.num_classes(), 12);
    }

    #[test]
    fn vnet_has_ten_convs_with_taps_after_2_6_9() {
        let cfg = vnet(64, 12);
        cfg.validate().unwrap();
        let convs: Vec<_> = cfg.layers.iter().filter(|l| l.kind == LayerKind::Conv).collect();
        assert_eq!(convs.len(), 10);
        assert!(convs.iter().all(|l| matches!(l.norm, Norm::Group(_))));
        assert_eq!(convs[1].tap, Some(Tap::Early));
        assert_eq!(convs[5].tap, Some(Tap::Middle));
        assert_eq!(convs[8].tap, Some(Tap::Late));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::build(vnet(8, 4), 7).unwrap();
        let b = Model::build(vnet(8, 4), 7).unwrap();
        let c = Model::build(vnet(8, 4), 8).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn output_grids_of_builtin_taps() {
        assert_eq!(tap_grid(&resnet18(64, 12), Tap::Late).unwrap(), (7, 7));
        assert_eq!(tap_grid(&vnet(64, 12), Tap::Late).unwrap(), (4, 4));
        assert_eq!(tap_grid(&resnet18(64, 12), Tap::Early).unwrap(), (56, 56));
        assert_eq!(tap_grid(&resnet18(64, 12), Tap::Middle).unwrap(), (14, 14));
        assert_eq!(tap_grid(&vnet(64, 12), Tap::Early).unwrap(), (56, 56));
        assert_eq!(tap_grid(&vnet(64, 12), Tap::Middle).unwrap(), (14, 14));
        let single = toy(vec![
            LayerSpec::conv("c", 3, 1, 1, 4, Norm::None).with_tap(Tap::Early),
            LayerSpec::conv("d", 3, 1, 1, 4, Norm::None).with_tap(Tap::Middle),
            LayerSpec::conv("e", 3, 1, 1, 4, Norm::None).with_tap(Tap::Late),
            LayerSpec::gap("p"),
            LayerSpec::linear("fc", 2),
        ]);
        assert_eq!(output_grid(&single, "c").unwrap(), (224, 224));
        assert!(matches!(output_grid(&single, "nope"), Err(ConfigError::UnknownLayer(_))));
    }

    #[test]
    fn receptive_field_recurrence_examples() {
        let two = toy(vec![LayerSpec::conv("a", 3, 1, 1, 1, Norm::None), LayerSpec::conv("b", 3, 1, 1, 1, Norm::None)]);
        assert_eq!(theoretical_rfs(&two).last().unwrap().size, 5);
        let stem = toy(vec![LayerSpec::conv("a", 7, 2, 3, 1, Norm::None), LayerSpec::maxpool("p", 3, 2, 1)]);
        let last = theoretical_rfs(&stem).pop().unwrap();
        assert_eq!((last.size, last.jump), (11, 4));
        assert_eq!(geometry::final_rfs(&toy(vec![])), 1);
    }

    #[test]
    fn vnet_constraint_report() {
        let report = validate_vnet_constraints(&vnet(64, 12));
        assert!(report.all_passed(), "{report:?}");

        let report = validate_vnet_constraints(&resnet18(64, 12));
        assert!(!report.check(CHECK_CONV_COUNT).unwrap().passed);
        assert!(!report.check(CHECK_LATE_GRID).unwrap().passed);
        assert!(report.check(CHECK_LATE_GRID).unwrap().detail.contains("7x7"));

        let mut layers: Vec<LayerSpec> = (0..10).map(|i| LayerSpec::conv(&format!("c{i}"), 1, 1, 0, 4, Norm::None)).collect();
        layers[1].tap = Some(Tap::Early);
        layers[5].tap = Some(Tap::Middle);
        layers[8].tap = Some(Tap::Late);
        layers.push(LayerSpec::gap("p"));
        layers.push(LayerSpec::linear("fc", 2));
        let report = validate_vnet_constraints(&toy(layers));
        assert!(report.check(CHECK_CONV_COUNT).unwrap().passed);
        assert!(!report.check(CHECK_RFS_INCREASING).unwrap().passed);
    }

    #[test]
    fn output_grid_agrees_with_forward_shapes() {
        for cfg in [resnet18(4, 3), vnet(4, 3)] {
            let model = Model::build(cfg.clone(), 1).unwrap();
            let mut g = Graph::new();
            let x = g.leaf(Tensor::zeros(&[1, 3, 224, 224]), false);
            let pass = model.forward(&mut g, x, Mode::Eval, ParamGrads::None).unwrap();
            let shapes = geometry::layer_shapes(&cfg).unwrap();
            for ((l, &id), shape) in cfg.layers.iter().zip(&pass.layer_outputs).zip(&shapes) {
                let actual = g.value(id).shape();
                match *shape {
                    LayerShape::Spatial { channels, h, w } => {
                        assert_eq!(actual, &[1, channels, h, w], "{}", l.name);
                        assert_eq!(output_grid(&cfg, &l.name).unwrap(), (h, w));
                    }
                    LayerShape::Flat { features } => assert_eq!(actual, &[1, features]),
                }
            }
        }
    }

    #[test]
    fn config_text_round_trip() {
        for cfg in [resnet18(64, 12), vnet(16, 4)] {
            let parsed = ArchitectureConfig::parse(&cfg.to_text()).unwrap();
            assert_eq!(parsed, cfg);
        }
    }

    #[test]
    fn config_errors_name_the_layer() {
        let tail = "b conv 3 3 1 1 8 none - middle\nc conv 3 3 1 1 8 none - late\np gap - - - - - none - -\nfc linear 1 1 1 0 2 none - -\n";
        let text = format!("# comment\na conv 3 3 1 1 8 group:3 - early\n{tail}");
        match ArchitectureConfig::parse(&text) {
            Err(ConfigError::Layer { layer, .. }) => assert_eq!(layer, "a"),
            other => panic!("{other:?}"),
        }
        let text = format!("a conv 3 3 1 1 8 none missing early  # trailing\n{tail}");
        match ArchitectureConfig::parse(&text) {
            Err(ConfigError::Layer { layer, .. }) => assert_eq!(layer, "a"),
            other => panic!("{other:?}"),
        }
        assert!(ArchitectureConfig::parse(&format!("a conv 3 3 1 1 8 group:4 - early\n{tail}")).is_ok());
        assert!(matches!(ArchitectureConfig::parse("a conv 3 3\n"), Err(ConfigError::Parse { line: 1, .. })));
    }

    #[test]
    fn weights_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gzw");
        let model = Model::build(resnet18(4, 5), 3).unwrap();
        save_weights(&model, &path).unwrap();
        let loaded = load_weights(resnet18(4, 5), &path).unwrap();
        assert_eq!(loaded.params(), model.params());
        assert_eq!(loaded.buffers(), model.buffers());
        for (a, b) in loaded.params().values().zip(model.params().values()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncated_weights_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gzw");
        let model = Model::build(vnet(4, 2), 3).unwrap();
        save_weights(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(load_weights(vnet(4, 2), &path), Err(WeightsError::Entry { .. })));
        std::fs::write(&path, b"NOTMAGIC").unwrap();
        assert!(matches!(load_weights(vnet(4, 2), &path), Err(WeightsError::Magic)));
    }

    #[test]
    fn shape_mismatched_entry_names_the_layer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gzw");
        let model = Model::build(vnet(4, 2), 3).unwrap();
        save_weights(&model, &path).unwrap();
        // Same names, different width in conv3 onward.
        match load_weights(vnet(8, 2), &path) {
            Err(WeightsError::Mismatch(ModelError::Parameter { name, .. })) => assert!(name.starts_with("conv1"), "{name}"),
            other => panic!("{other:?}"),
        }
    }

    fn layer_strategy() -> impl Strategy<Value = LayerSpec> {
        (1usize..6, 1usize..4, any::<bool>()).prop_map(|(k, s, pool)| {
            if pool {
                LayerSpec::maxpool("p", k, s, 0)
            } else {
                LayerSpec::conv("c", k, s, 0, 1, Norm::None)
            }
        })
    }

    proptest! {
        #[test]
        fn rfs_is_monotone(layers in proptest::collection::vec(layer_strategy(), 0..12)) {
            let cfg = toy(layers);
            let rfs = theoretical_rfs(&cfg);
            let mut prev = (1, 1);
            for rf in rfs {
                prop_assert!(rf.size >= prev.0 && rf.jump >= prev.1);
                prev = (rf.size, rf.jump);
            }
        }
    }
}
