use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::dense::{cce_loss, one_hot};
use crate::kernels::norm::Mode;
use crate::model::{build_msadnet, ModelConfig, ModelGraph};
use crate::tensor::{Element, Tensor};

use super::adam::{adam_step, AdamState};
use super::config::TrainConfig;
use super::metrics::{argmax, mean_std, MetricsReport};
use super::split::{kfold_plans, SplitPlan};

/// Model-ready inputs: one `[1, C, S, S]` tensor per sample.
#[derive(Debug, Clone)]
pub struct PreparedData<T> {
    pub inputs: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl<T: Element> PreparedData<T> {
    pub fn new(inputs: Vec<Tensor<T>>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Dataset(format!("{} inputs but {} labels", inputs.len(), labels.len())));
        }
        Ok(Self {
            inputs,
            labels,
            class_names,
        })
    }

    /// Resizes and scales every image for `model`'s input.
    pub fn for_model(dataset: &Dataset, model: &ModelGraph<T>) -> Result<Self> {
        let cfg = model.config();
        if dataset.num_classes() != model.num_classes() {
            return Err(Error::Config(format!(
                "dataset has {} classes but the model predicts {}",
                dataset.num_classes(),
                model.num_classes()
            )));
        }
        Self::new(
            dataset.tensors(cfg.input_size, cfg.input_channels)?,
            dataset.labels.clone(),
            dataset.class_names.clone(),
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let parts: Vec<&Tensor<T>> = indices.iter().map(|&i| &self.inputs[i]).collect();
        Tensor::stack(&parts)
    }

    fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub lr: f64,
    pub secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch with the lowest validation loss.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl History {
    pub fn seconds_per_epoch(&self) -> f64 {
        mean_std(&self.epochs.iter().map(|e| e.secs).collect::<Vec<_>>()).0
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc,lr,secs\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                e.epoch,
                e.train_loss,
                e.train_acc,
                opt(e.val_loss),
                opt(e.val_acc),
                e.lr,
                e.secs
            );
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Inference-mode mean loss and accuracy over `indices`.
pub fn loss_and_accuracy<T: Element>(
    model: &ModelGraph<T>,
    data: &PreparedData<T>,
    indices: &[usize],
    batch_size: usize,
) -> Result<(f64, f64)> {
    let k = model.num_classes();
    let (mut loss, mut correct) = (0.0, 0);
    for chunk in indices.chunks(batch_size.max(1)) {
        let probs = model.predict(&data.batch(chunk)?)?;
        let labels = data.labels_of(chunk);
        loss += cce_loss(&probs, &one_hot::<T>(&labels, k)?)?.as_f64() * chunk.len() as f64;
        correct += count_correct(&probs, &labels);
    }
    let n = indices.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

fn count_correct<T: Element>(probs: &Tensor<T>, labels: &[usize]) -> usize {
    let k = probs.shape()[1];
    probs
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(&row.iter().map(|v| v.as_f64()).collect::<Vec<_>>()) == l)
        .count()
}

pub fn fit<T: Element>(
    model: &mut ModelGraph<T>,
    data: &PreparedData<T>,
    plan: &SplitPlan,
    cfg: &TrainConfig,
) -> Result<History> {
    fit_with(model, data, plan, cfg, &mut |_| {})
}

/// Mini-batch Adam training on `plan.train`, monitoring `plan.valid`.
///
/// Training accuracy is measured on the training-mode forward passes.
/// With early stopping, the parameters of the best validation epoch are
/// restored. On divergence the model is reset to the end of the last
/// finished epoch and [`Error::Diverged`] is returned.
pub fn fit_with<T: Element>(
    model: &mut ModelGraph<T>,
    data: &PreparedData<T>,
    plan: &SplitPlan,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<History> {
    cfg.validate()?;
    if plan.train.is_empty() {
        return Err(Error::Dataset("training partition is empty".into()));
    }
    if cfg.early_stopping.is_some() && plan.valid.is_empty() {
        return Err(Error::Config("early stopping needs a validation partition".into()));
    }
    let k = model.num_classes();
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut adam = AdamState::new(
        model.params().iter().map(|p| &p.tensor),
        cfg.adam_betas[0],
        cfg.adam_betas[1],
        cfg.adam_eps,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = plan.train.clone();
    let mut history = History::default();
    let mut best: Option<(f64, ModelGraph<T>)> = None;
    let mut last_good = model.clone();

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let lr = cfg.lr_at(epoch)?;
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let labels = data.labels_of(chunk);
            let step = (|| -> Result<(f64, usize)> {
                let mut tape = Tape::new();
                let x = tape.constant(data.batch(chunk)?);
                let pass = model.forward(&mut tape, x, Mode::Train)?;
                let loss = tape.cce_loss(pass.probs, one_hot(&labels, k)?)?;
                let loss_value = tape.value(loss).item().as_f64();
                if !loss_value.is_finite() {
                    return Err(Error::NonFinite(format!("batch loss is {loss_value}")));
                }
                let hits = count_correct(tape.value(pass.probs), &labels);
                let grads = tape.backward(loss)?;
                let zeros: Vec<Tensor<T>> = pass
                    .params
                    .iter()
                    .map(|&v| Tensor::zeros(tape.value(v).shape()))
                    .collect();
                let grad_refs: Vec<&Tensor<T>> = pass
                    .params
                    .iter()
                    .zip(&zeros)
                    .map(|(&v, z)| grads.get(v).unwrap_or(z))
                    .collect();
                let mut params: Vec<&mut Tensor<T>> = model.params_mut().iter_mut().map(|p| &mut p.tensor).collect();
                adam_step(&mut params, &grad_refs, &mut adam, lr, &name_refs)?;
                Ok((loss_value, hits))
            })();
            match step {
                Ok((l, hits)) => {
                    loss_sum += l * chunk.len() as f64;
                    correct += hits;
                }
                Err(e @ Error::NonFinite(_)) => {
                    model.load_state_from(&last_good)?;
                    return Err(Error::Diverged {
                        epoch,
                        detail: e.to_string(),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        let n = order.len() as f64;
        let (val_loss, val_acc) = if plan.valid.is_empty() {
            (None, None)
        } else {
            let (l, a) = loss_and_accuracy(model, data, &plan.valid, cfg.batch_size)?;
            (Some(l), Some(a))
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_loss,
            val_acc,
            lr,
            secs: start.elapsed().as_secs_f64(),
        };
        observer(&record);
        history.epochs.push(record);
        last_good = model.clone();

        if let Some(vl) = val_loss {
            if best.as_ref().is_none_or(|(b, _)| vl < *b) {
                history.best_epoch = Some(epoch);
                best = Some((vl, model.clone()));
            }
        }
        if let (Some(es), Some(b)) = (cfg.early_stopping, history.best_epoch) {
            if epoch - b >= es.patience {
                history.stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }
    if cfg.early_stopping.is_some() {
        if let Some((_, snapshot)) = &best {
            model.load_state_from(snapshot)?;
        }
    }
    Ok(history)
}

/// Argmax predictions and the full report over `indices`.
pub fn evaluate<T: Element>(
    model: &ModelGraph<T>,
    data: &PreparedData<T>,
    indices: &[usize],
    batch_size: usize,
) -> Result<MetricsReport> {
    let k = model.num_classes();
    let mut scores = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let probs = model.predict(&data.batch(chunk)?)?;
        scores.extend(probs.data().chunks(k).map(|r| r.iter().map(|v| v.as_f64()).collect::<Vec<_>>()));
    }
    MetricsReport::from_scores(&data.labels_of(indices), &scores, data.class_names.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub metric: &'static str,
    pub mean: f64,
    pub std: f64,
}

/// Per-fold reports and their mean ± sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossValReport {
    pub folds: Vec<MetricsReport>,
    pub plans: Vec<SplitPlan>,
    pub summary: Vec<SummaryRow>,
}

/// Metrics summarized across folds: accuracy, the weighted precision, recall
/// and F1, and the macro one-vs-rest AUC.
pub const FOLD_METRICS: [&str; 5] = ["accuracy", "precision", "recall", "f1-score", "auc"];

fn fold_values(r: &MetricsReport) -> [f64; 5] {
    [
        r.accuracy,
        r.weighted_avg.precision,
        r.weighted_avg.recall,
        r.weighted_avg.f1,
        r.auc.unwrap_or(f64::NAN),
    ]
}

impl CrossValReport {
    pub fn from_folds(folds: Vec<MetricsReport>, plans: Vec<SplitPlan>) -> Self {
        let values: Vec<[f64; 5]> = folds.iter().map(fold_values).collect();
        let summary = FOLD_METRICS
            .iter()
            .enumerate()
            .map(|(j, &metric)| {
                let column: Vec<f64> = values.iter().map(|v| v[j]).collect();
                let (mean, std) = mean_std(&column);
                SummaryRow { metric, mean, std }
            })
            .collect();
        Self {
            folds,
            plans,
            summary,
        }
    }

    /// Fold rows followed by a `Mean ± Std` row.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<10}", "fold");
        for m in FOLD_METRICS {
            let _ = write!(out, "  {m:>17}");
        }
        out.push('\n');
        for (i, r) in self.folds.iter().enumerate() {
            let _ = write!(out, "{:<10}", format!("fold{}", i + 1));
            for v in fold_values(r) {
                let _ = write!(out, "  {v:>17.4}");
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<10}", "Mean ± Std");
        for row in &self.summary {
            let _ = write!(out, "  {:>17}", format!("{:.4} ± {:.4}", row.mean, row.std));
        }
        out.push('\n');
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold");
        for m in FOLD_METRICS {
            let _ = write!(out, ",{m}");
        }
        out.push('\n');
        for (i, r) in self.folds.iter().enumerate() {
            let _ = write!(out, "fold{}", i + 1);
            for v in fold_values(r) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        for (label, pick) in [("mean", 0), ("std", 1)] {
            out.push_str(label);
            for row in &self.summary {
                let _ = write!(out, ",{}", if pick == 0 { row.mean } else { row.std });
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Stratified k-fold cross-validation. Every fold trains a freshly
/// initialized model (seed offset by the fold index) and is scored on its
/// held-out fold.
pub fn crossval<T: Element>(
    model_config: &ModelConfig,
    data: &PreparedData<T>,
    k: usize,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(usize, &EpochRecord),
) -> Result<CrossValReport> {
    let plans = kfold_plans(&data.labels, k, [cfg.split_weights[0], cfg.split_weights[1]], cfg.seed)?;
    let mut folds = Vec::with_capacity(k);
    for (f, plan) in plans.iter().enumerate() {
        let mut model = build_msadnet::<T>(&ModelConfig {
            seed: model_config.seed.wrapping_add(f as u64),
            ..model_config.clone()
        })?;
        let history = fit_with(&mut model, data, plan, cfg, &mut |e| observer(f + 1, e))?;
        let mut report = evaluate(&model, data, &plan.test, cfg.batch_size)?;
        report.seconds_per_epoch = Some(history.seconds_per_epoch());
        folds.push(report);
    }
    Ok(CrossValReport::from_folds(folds, plans))
}
