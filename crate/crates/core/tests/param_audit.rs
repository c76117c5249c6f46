use msad_core::audit::{
    audit, count_batch_norm, count_conv, count_conv1x1, count_dense, count_dwsc_full, count_dwsc_quoted,
    count_sandwich,
};
use msad_core::model::{build_msadnet, Branch, GraphBuilder, LayerKind, LayerSpec, ModelConfig, ModelGraph};
use msad_core::{Error, Padding};
use proptest::prelude::*;

/// Element count of the tensors a layer owns, found by name prefix.
fn tensor_elems(m: &ModelGraph<f32>, layer: &str) -> usize {
    let prefix = format!("{layer}.");
    m.params()
        .iter()
        .filter(|p| p.name.starts_with(&prefix) && !p.name[prefix.len()..].contains('.'))
        .map(|p| p.tensor.numel())
        .sum()
}

fn toy(channels: usize, size: usize, layer: LayerSpec) -> ModelGraph<f32> {
    let mut g = GraphBuilder::new(channels, size);
    let l = g.push(layer).unwrap();
    let gap = g.push(LayerSpec::new("gap", LayerKind::Gap, vec![l], Branch::Base)).unwrap();
    let mut head = LayerSpec::new("classifier", LayerKind::DenseSoftmax, vec![gap], Branch::Head);
    head.filters = Some(2);
    g.push(head).unwrap();
    g.finish(ModelConfig::default()).unwrap()
}

fn conv_spec(kind: LayerKind, filters: usize, kernel: usize) -> LayerSpec {
    let mut s = LayerSpec::new("layer", kind, vec![0], Branch::Base);
    s.filters = Some(filters);
    s.kernel = kernel;
    s.padding = Padding::Same;
    s
}

#[test]
fn block1_conv_on_rgb_matches_tensors() {
    let m = build_msadnet::<f32>(&ModelConfig {
        input_channels: 3,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(count_conv(3, 32, 3), 896);
    assert_eq!(tensor_elems(&m, "block1.conv"), 896);
}

#[test]
fn pointwise_classifier_count_matches_tensors() {
    let m = build_msadnet::<f32>(&ModelConfig {
        enable_sam: false,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(count_conv1x1(224, 4), 900);
    assert_eq!(tensor_elems(&m, "classifier"), 900);
}

#[test]
fn published_sandwich_figures() {
    let s = count_sandwich(128, 64, 160);
    assert_eq!(s.with_bottleneck, 100_576);
    assert_eq!(s.without_bottleneck, 184_480);
    assert_eq!(s.savings, 83_904);
    let report = audit(&build_msadnet::<f32>(&ModelConfig::default()).unwrap()).unwrap();
    let block4 = report.sandwiches.iter().find(|s| s.module == "block4").unwrap();
    assert_eq!((block4.f0, block4.f1x1, block4.f1), (128, 64, 160));
    assert_eq!(block4.counts.savings, 83_904);
}

#[test]
fn wide_sandwich_matches_built_tensors() {
    let cfg = ModelConfig {
        dense_module1: vec![64, 256, 64, 256, 64, 64],
        ..Default::default()
    };
    let m = build_msadnet::<f32>(&cfg).unwrap();
    let s = count_sandwich(256, 64, 256);
    let built = tensor_elems(&m, "block4.bottleneck") + tensor_elems(&m, "block4.conv2");
    assert_eq!(s.with_bottleneck, built);
    assert_eq!(s.with_bottleneck, (9 * 64 + 1) * 256 + (256 + 1) * 64);
    assert_eq!(s.without_bottleneck, (9 * 256 + 1) * 256);
}

#[test]
fn dwsc_full_count_matches_tensors() {
    assert_eq!(count_dwsc_full(4, 6, 5), 130);
    let m = toy(4, 12, conv_spec(LayerKind::Dwsc, 6, 5));
    assert_eq!(tensor_elems(&m, "layer"), 130);
}

#[test]
fn one_layer_toy_report_is_count_conv() {
    let m = toy(3, 10, conv_spec(LayerKind::Conv3x3, 5, 3));
    let report = audit(&m).unwrap();
    let entry = report.layers.iter().find(|l| l.layer == "layer").unwrap();
    assert_eq!(entry.closed_form, count_conv(3, 5, 3));
    assert_eq!(entry.actual, count_conv(3, 5, 3));
    assert_eq!(report.total, count_conv(3, 5, 3) + count_dense(5, 2));
}

#[test]
fn default_total_is_in_band_and_canonical() {
    let m = build_msadnet::<f32>(&ModelConfig::default()).unwrap();
    let report = audit(&m).unwrap();
    assert!((880_000..=1_320_000).contains(&report.total), "{}", report.total);
    assert_eq!(report.total, 1_161_924);
    assert_eq!(report.total, report.layers.iter().map(|l| l.actual).sum::<usize>());
    assert!(report.layers.iter().all(|l| l.closed_form == l.actual));
}

#[test]
fn conformance_values_sit_beside_full_counts() {
    let report = audit(&build_msadnet::<f32>(&ModelConfig::default()).unwrap()).unwrap();
    let dwsc1 = report.layers.iter().find(|l| l.layer == "sam.dwsc1").unwrap();
    // the branch taps the 64-channel bottleneck
    assert_eq!(dwsc1.dwsc_quoted_form, Some(640));
    assert_eq!(dwsc1.closed_form, count_dwsc_full(64, 64, 5));
    assert!(report
        .layers
        .iter()
        .filter(|l| l.kind != LayerKind::Dwsc)
        .all(|l| l.dwsc_quoted_form.is_none()));
}

#[test]
fn disabling_attention_removes_exactly_its_branch() {
    let with = audit(&build_msadnet::<f32>(&ModelConfig::default()).unwrap()).unwrap();
    let without = audit(
        &build_msadnet::<f32>(&ModelConfig {
            enable_sam: false,
            ..Default::default()
        })
        .unwrap(),
    )
    .unwrap();
    let sam = with.branch_total(Branch::Attention);
    let head_delta = with.branch_total(Branch::Head) - without.branch_total(Branch::Head);
    assert_eq!(head_delta, 96 * 4);
    assert_eq!(with.total - without.total, sam + head_delta);
    assert_eq!(with.branch_total(Branch::Base), without.branch_total(Branch::Base));
    assert_eq!(without.branch_total(Branch::Attention), 0);
}

#[test]
fn totals_do_not_depend_on_seed_or_precision() {
    let a = audit(&build_msadnet::<f32>(&ModelConfig { seed: 5, ..Default::default() }).unwrap()).unwrap();
    let b = audit(&build_msadnet::<f64>(&ModelConfig { seed: 6, ..Default::default() }).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn report_serializes_with_stable_keys() {
    let report = audit(&build_msadnet::<f32>(&ModelConfig::width_reduced(4)).unwrap()).unwrap();
    let json: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    let first = &json["layers"][0];
    for key in ["layer", "kind", "closed_form", "actual"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    assert_eq!(first["kind"], "conv3x3");
    assert_eq!(json["total"], report.total);
    let text = report.to_text();
    assert!(text.lines().next().unwrap().starts_with("layer"));
    assert!(text.ends_with(&format!("total {}", report.total)));
}

#[test]
fn mismatch_names_the_layer() {
    let mut m = build_msadnet::<f32>(&ModelConfig::width_reduced(8)).unwrap();
    let idx = m.params().iter().position(|p| p.name == "block2.conv.bias").unwrap();
    m.params_mut()[idx].tensor = msad_core::Tensor::zeros(&[3]);
    match audit(&m) {
        Err(Error::Audit { layer, .. }) => assert_eq!(layer, "block2.conv"),
        other => panic!("expected audit failure, got {other:?}"),
    }
}

#[test]
fn batch_norm_counts_two_per_channel() {
    let m = build_msadnet::<f32>(&ModelConfig::default()).unwrap();
    assert_eq!(tensor_elems(&m, "block1.bn"), count_batch_norm(32));
    assert_eq!(count_dwsc_quoted(96), 960);
}

#[test]
fn savings_grow_with_width_product() {
    let widths = [64usize, 96, 128, 160, 224, 256];
    for &f0 in &widths {
        for &f1 in &widths {
            let s = count_sandwich(f0, 64, f1).savings;
            if f0 > 64 {
                assert!(s > 0, "({f0}, 64, {f1})");
            }
            for &g0 in widths.iter().filter(|&&g| g >= f0) {
                for &g1 in widths.iter().filter(|&&g| g >= f1) {
                    assert!(count_sandwich(g0, 64, g1).savings >= s);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dwsc_count_matches_random_tensor_shapes(c in 1usize..9, f in 1usize..9, half in 0usize..3) {
        let k = 2 * half + 1;
        let m = toy(c, 8, conv_spec(LayerKind::Dwsc, f, k));
        prop_assert_eq!(tensor_elems(&m, "layer"), count_dwsc_full(c, f, k));
        prop_assert!(audit(&m).is_ok());
    }

    #[test]
    fn conv_count_matches_random_tensor_shapes(c in 1usize..9, f in 1usize..9, half in 0usize..3) {
        let k = 2 * half + 1;
        let kind = if k == 1 { LayerKind::Conv1x1 } else if k == 3 { LayerKind::Conv3x3 } else { LayerKind::Conv5x5 };
        let m = toy(c, 8, conv_spec(kind, f, k));
        prop_assert_eq!(tensor_elems(&m, "layer"), count_conv(c, f, k));
    }
}
