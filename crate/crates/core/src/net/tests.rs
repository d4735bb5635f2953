use super::*;
use crate::autograd::testing::random_tensor;

fn tiny(levels: usize, embed: EmbedKind) -> ModelConfig {
    ModelConfig {
        height: 8,
        width: 16,
        levels,
        base_channels: 4,
        num_heads: 2,
        k_samples: 9,
        lattice_spacing: 1.0,
        ffn_expansion: 2,
        embed,
    }
}

#[test]
fn param_count_matches_store() {
    for levels in 0..3 {
        for embed in [EmbedKind::ConvStack, EmbedKind::Single] {
            let cfg = tiny(levels, embed);
            let model = Model::new(cfg.clone(), 1).unwrap();
            assert_eq!(model.params().numel(), param_count(&cfg), "levels {levels} {embed:?}");
        }
    }
}

#[test]
fn hand_count_single_level() {
    // embed 3 stages: (3·4·9+4 + 8) + 2·(4·4·9+4 + 8) = 120 + 2·156
    let cfg = ModelConfig { levels: 0, ..tiny(0, EmbedKind::ConvStack) };
    assert_eq!(param_count(&cfg), 120 + 2 * 156 + (4 * 3 * 9 + 3));
}

#[test]
fn output_shapes_coarse_to_fine() {
    let cfg = tiny(2, EmbedKind::ConvStack);
    let model = Model::new(cfg.clone(), 3).unwrap();
    let x = random_tensor(&[2, 3, 8, 16], 4);
    let outs = model.predict(&x).unwrap();
    let shapes: Vec<Vec<usize>> = outs.iter().map(|t| t.shape().to_vec()).collect();
    assert_eq!(shapes, vec![vec![2, 3, 4, 8], vec![2, 3, 8, 16]]);
    assert_eq!(cfg.output_sizes(), vec![(4, 8), (8, 16)]);
    for t in &outs {
        assert!(t.data().iter().all(|v| v.abs() < 1.0));
    }
}

#[test]
fn zero_level_emits_one_full_map() {
    let model = Model::new(tiny(0, EmbedKind::Single), 3).unwrap();
    let outs = model.predict(&random_tensor(&[1, 3, 8, 16], 5)).unwrap();
    assert_eq!(outs.len(), 1);
    assert_eq!(outs[0].shape(), &[1, 3, 8, 16]);
}

#[test]
fn seeded_init_is_deterministic() {
    let a = Model::new(tiny(1, EmbedKind::ConvStack), 9).unwrap();
    let b = Model::new(tiny(1, EmbedKind::ConvStack), 9).unwrap();
    let c = Model::new(tiny(1, EmbedKind::ConvStack), 10).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
}

#[test]
fn flow_starts_at_zero() {
    let model = Model::new(tiny(1, EmbedKind::ConvStack), 2).unwrap();
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, false);
    let x = g.constant(random_tensor(&[1, 3, 8, 16], 6));
    let out = model.forward_graph(&mut g, &p, x, Mode::Train, true).unwrap();
    let names: Vec<&str> = out.trace.iter().map(|t| t.block.as_str()).collect();
    assert_eq!(names, vec!["enc.0", "bottleneck", "dec.0"]);
    let t = &out.trace[0];
    assert!(t.offsets.data().iter().all(|&o| o == 0.0));
    let q = t.grid.spec().width() * 3 + 5;
    let centre = t.grid.center_index();
    assert_eq!(t.position(0, q, 1, centre), (5.0, 3.0));
    for m in 0..2 {
        let s: f64 = (0..9).map(|k| t.weights.data()[(m * 9 + k) * 128 + q]).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn rejects_bad_configs_and_inputs() {
    assert!(ModelConfig { width: 15, ..tiny(1, EmbedKind::Single) }.validate().is_err());
    assert!(ModelConfig { levels: 4, ..tiny(1, EmbedKind::Single) }.validate().is_err());
    assert!(ModelConfig { k_samples: 8, ..tiny(1, EmbedKind::Single) }.validate().is_err());
    assert!(ModelConfig { base_channels: 3, ..tiny(1, EmbedKind::Single) }.validate().is_err());
    let model = Model::new(tiny(1, EmbedKind::Single), 0).unwrap();
    assert!(matches!(model.predict(&random_tensor(&[1, 3, 4, 8], 0)), Err(Error::Shape(_))));
}

#[test]
fn non_finite_input_names_layer() {
    let model = Model::new(tiny(1, EmbedKind::ConvStack), 0).unwrap();
    let mut x = random_tensor(&[1, 3, 8, 16], 0);
    x.data_mut()[3 * 16 + 7] = f64::NAN;
    match model.predict(&x) {
        Err(Error::NonFinite { layer, .. }) => assert_eq!(layer, "input"),
        other => panic!("expected non-finite error, got {other:?}"),
    }
}

#[test]
fn running_stats_update_is_ema() {
    let mut model = Model::new(tiny(0, EmbedKind::ConvStack), 0).unwrap();
    let batch = vec![BatchStats { mean: vec![1.0; 4], var: vec![3.0; 4] }; 3];
    model.update_running_stats(&batch, 0.1);
    assert!((model.running_stats()[0].mean[0] - 0.1).abs() < 1e-15);
    assert!((model.running_stats()[2].var[3] - 1.2).abs() < 1e-15);
    assert!(model.set_running_stats(vec![]).is_err());
}
