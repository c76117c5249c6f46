//! Optimization, learning-rate schedules, splits, metrics and cross-validation.

mod adam;
mod config;
mod fit;
mod metrics;
mod split;

pub use adam::{adam_step, AdamState};
pub use config::{lr_at, EarlyStopping, Schedule, TrainConfig};
pub use fit::{
    crossval, evaluate, fit, fit_with, loss_and_accuracy, CrossValReport, EpochRecord, History, PreparedData,
    SummaryRow, FOLD_METRICS,
};
pub use metrics::{argmax, auc_one_vs_rest, mean_std, roc_auc, Averages, ClassMetrics, MetricsReport};
pub use split::{kfold_plans, stratified_split, SplitPlan};
