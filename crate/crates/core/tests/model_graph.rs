use msad_core::model::{build_msadnet, Branch, LayerKind, ModelConfig, ModelGraph};
use msad_core::{Error, Mode, Padding, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(input: usize) -> ModelConfig {
    ModelConfig {
        input_size: input,
        ..ModelConfig::width_reduced(8)
    }
}

#[test]
fn default_base_path_halves_five_times() {
    let m = build_msadnet::<f32>(&ModelConfig::default()).unwrap();
    assert_eq!(m.base_pool_trace(), vec![224, 112, 56, 28, 14, 7]);
    let block3 = m.tap("block3_out").unwrap();
    assert_eq!(m.node(block3).shape, vec![96, 28, 28]);
    assert_eq!(m.node(m.tap("block5_out").unwrap()).shape[0], 224);
}

#[test]
fn narrow_blocks_keep_the_trace() {
    let cfg = ModelConfig {
        block_filters: [8, 8, 8],
        ..Default::default()
    };
    let m = build_msadnet::<f32>(&cfg).unwrap();
    assert_eq!(m.node(m.tap("block3_out").unwrap()).shape, vec![8, 28, 28]);
}

#[test]
fn classifier_width_follows_attention_toggle() {
    let with = build_msadnet::<f32>(&ModelConfig::default()).unwrap();
    assert_eq!(with.classifier_width(), 320);
    assert_eq!(with.num_classes(), 4);
    let without = build_msadnet::<f32>(&ModelConfig {
        enable_sam: false,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(without.classifier_width(), 224);
}

#[test]
fn attention_branch_has_expected_layers_and_no_gate() {
    let m = build_msadnet::<f32>(&ModelConfig::default()).unwrap();
    let sam: Vec<_> = m
        .nodes()
        .iter()
        .filter(|n| n.spec.branch == Branch::Attention)
        .collect();
    let kinds: Vec<LayerKind> = sam.iter().map(|n| n.spec.kind).collect();
    use LayerKind::*;
    assert_eq!(
        kinds,
        vec![Dwsc, Relu, DilConv, Relu, BatchNorm, MaxPool, Dwsc, Relu, BatchNorm, Gap]
    );
    let dil = sam.iter().find(|n| n.spec.kind == DilConv).unwrap();
    assert_eq!((dil.spec.kernel, dil.spec.dilation), (3, 2));
    assert_eq!(msad_core::model::receptive_extent(&dil.spec), 5);
    assert_eq!(m.node(m.tap("sam_out").unwrap()).shape, vec![96, 8, 8]);
    // tapped at the bottleneck of dense module 1
    let tap = m.node(m.tap("block4_mid").unwrap());
    assert_eq!(tap.shape, vec![64, 28, 28]);
}

#[test]
fn plain_5x5_ablation_swaps_the_dilated_stage() {
    let m = build_msadnet::<f32>(&ModelConfig {
        sam_uses_plain_conv5x5: true,
        ..Default::default()
    })
    .unwrap();
    assert!(m.nodes().iter().all(|n| n.spec.kind != LayerKind::DilConv));
    assert!(m.nodes().iter().any(|n| n.spec.kind == LayerKind::Conv5x5));
}

#[test]
fn invalid_toggles_and_small_inputs_are_rejected() {
    let bad = ModelConfig {
        enable_sam: false,
        sam_uses_plain_conv5x5: true,
        ..Default::default()
    };
    assert!(matches!(build_msadnet::<f32>(&bad), Err(Error::Config(_))));
    // 64 px gives an 8×8 tap, too small for two valid 5×5 stages and a pool
    assert!(matches!(build_msadnet::<f32>(&small(64)), Err(Error::Dimension { .. })));
}

#[test]
fn topology_is_seed_invariant() {
    let a = build_msadnet::<f32>(&ModelConfig { seed: 1, ..small(128) }).unwrap();
    let b = build_msadnet::<f32>(&ModelConfig { seed: 2, ..small(128) }).unwrap();
    assert_eq!(a.nodes(), b.nodes());
    assert_ne!(a.params()[0].tensor, b.params()[0].tensor);
}

fn random_batch(n: usize, size: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(&[n, 1, size, size], 0.0, 1.0, &mut rng)
}

#[test]
fn probability_rows_sum_to_one() {
    let m = build_msadnet::<f64>(&small(128)).unwrap();
    let probs = m.predict(&random_batch(3, 128, 4)).unwrap();
    assert_eq!(probs.shape(), &[3, 4]);
    for row in probs.data().chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn identical_images_get_identical_rows() {
    let one = random_batch(1, 128, 9);
    let batch = Tensor::stack(&[&one, &one]).unwrap();
    let m = build_msadnet::<f64>(&small(128)).unwrap();
    let probs = m.predict(&batch).unwrap();
    assert_eq!(probs.data()[..4], probs.data()[4..]);
}

#[test]
fn zeroed_parameters_give_uniform_rows() {
    let mut m: ModelGraph<f64> = build_msadnet(&small(128)).unwrap();
    m.zero_params();
    let probs = m.predict(&random_batch(2, 128, 1)).unwrap();
    assert!(probs.data().iter().all(|&p| (p - 0.25).abs() < 1e-12));
}

#[test]
fn wrong_input_size_is_rejected() {
    let m = build_msadnet::<f64>(&small(128)).unwrap();
    assert!(matches!(m.predict(&random_batch(1, 96, 0)), Err(Error::Shape { .. })));
}

#[test]
fn train_mode_updates_running_statistics() {
    let mut m = build_msadnet::<f64>(&small(128)).unwrap();
    let before = m.buffers()[0].tensor.clone();
    let mut tape = Tape::new();
    let x = tape.constant(random_batch(2, 128, 3));
    m.forward(&mut tape, x, Mode::Train).unwrap();
    assert_ne!(m.buffers()[0].tensor, before);
    let running_mean_changed = m.buffers()[0].tensor.data().iter().any(|&v| v != 0.0);
    assert!(running_mean_changed);
}

#[test]
fn same_padded_attention_allows_tiny_inputs() {
    let cfg = ModelConfig {
        input_size: 8,
        block_pooling: [true, true, false, false, false],
        sam_stage_padding: Padding::Same,
        ..ModelConfig::width_reduced(16)
    };
    let m = build_msadnet::<f64>(&cfg).unwrap();
    assert_eq!(m.base_pool_trace(), vec![8, 4, 2]);
    let probs = m.predict(&random_batch(2, 8, 0)).unwrap();
    assert_eq!(probs.shape(), &[2, 4]);
}
