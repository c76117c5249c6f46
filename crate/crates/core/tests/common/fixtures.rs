//! Shared training setups and hand-computed metric fixtures.

use msad_core::data::{generate_synthetic, SyntheticSet, SyntheticSpec};
use msad_core::train::{evaluate, fit, MetricsReport, PreparedData, SplitPlan, TrainConfig};
use msad_core::{build_msadnet, ModelConfig, Padding};

pub fn names(k: usize) -> Vec<String> {
    (0..k).map(|c| format!("c{c}")).collect()
}

/// Width/8 network on 32 px inputs; the attention branch is same-padded
/// because its valid 5×5 stages do not fit a 4×4 tap.
pub fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        input_size: 32,
        sam_stage_padding: Padding::Same,
        seed,
        ..ModelConfig::width_reduced(8)
    }
}

pub fn synthetic(images_per_class: usize, image_size: usize, seed: u64) -> SyntheticSet {
    generate_synthetic(&SyntheticSpec {
        images_per_class,
        image_size,
        seed,
        ..SyntheticSpec::default()
    })
    .expect("synthetic set")
}

pub struct Overfit {
    pub steps: usize,
    /// First step whose training-mode batch was classified perfectly.
    pub first_perfect_step: Option<usize>,
    /// Accuracy of the training-mode forward pass of the last step.
    pub last_step_acc: f64,
    /// Inference-mode accuracy on the same 16 images after training.
    pub infer_acc: f64,
    pub secs: f64,
}

/// 16 synthetic images (4 per class) fitted as one full batch for 200 Adam
/// steps at lr 1e-3.
pub fn overfit(seed: u64) -> Overfit {
    let start = std::time::Instant::now();
    let set = synthetic(4, 32, seed);
    let mut model = build_msadnet::<f32>(&small_config(seed)).unwrap();
    let data = PreparedData::for_model(&set.dataset, &model).unwrap();
    let all: Vec<usize> = (0..data.len()).collect();
    let plan = SplitPlan::from_indices(&data.labels, all.clone(), Vec::new(), Vec::new());
    let cfg = TrainConfig {
        batch_size: 16,
        base_lr: 1e-3,
        epochs: 200,
        seed,
        ..TrainConfig::default()
    };
    let history = fit(&mut model, &data, &plan, &cfg).unwrap();
    let report = evaluate(&model, &data, &all, 16).unwrap();
    Overfit {
        steps: history.epochs.len(),
        first_perfect_step: history.epochs.iter().find(|e| e.train_acc == 1.0).map(|e| e.epoch),
        last_step_acc: history.epochs.last().unwrap().train_acc,
        infer_acc: report.accuracy,
        secs: start.elapsed().as_secs_f64(),
    }
}

/// Confusion `[[2,0],[1,1]]`.
pub fn two_class_fixture() -> MetricsReport {
    MetricsReport::from_confusion(vec![vec![2, 0], vec![1, 1]], names(2)).unwrap()
}

/// Four balanced classes of 5, everything predicted as class 0.
pub fn constant_predictor_fixture() -> MetricsReport {
    let labels: Vec<usize> = (0..20).map(|i| i / 5).collect();
    let scores: Vec<Vec<f64>> = labels.iter().map(|_| vec![0.7, 0.1, 0.1, 0.1]).collect();
    MetricsReport::from_scores(&labels, &scores, names(4)).unwrap()
}

/// Three classes, perfectly separated scores.
pub fn perfect_fixture() -> MetricsReport {
    let labels = vec![0, 1, 2, 0, 1, 2];
    let scores: Vec<Vec<f64>> = labels
        .iter()
        .map(|&l| {
            let mut r = vec![0.1; 3];
            r[l] = 0.8;
            r
        })
        .collect();
    MetricsReport::from_scores(&labels, &scores, names(3)).unwrap()
}

/// Binary scores with one inverted pair: AUC = 8/9 for each class by pair
/// counting (one of nine positive/negative pairs mis-ordered).
pub fn auc_fixture() -> MetricsReport {
    let labels = vec![0, 0, 0, 1, 1, 1];
    let p1 = [0.1, 0.2, 0.6, 0.5, 0.7, 0.9];
    let scores = p1.iter().map(|&p| vec![1.0 - p, p]).collect::<Vec<_>>();
    MetricsReport::from_scores(&labels, &scores, names(2)).unwrap()
}
