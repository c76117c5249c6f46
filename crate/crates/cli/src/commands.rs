use std::fs;
use std::path::{Path, PathBuf};

use msad_core::audit::audit;
use msad_core::data::{
    generate_synthetic, load_pnm, materialize, resize_bilinear, to_tensor, Dataset, Partition,
};
use msad_core::gradcam::{export, gradcam};
use msad_core::model::{load_checkpoint, read_checkpoint, save_checkpoint};
use msad_core::train::{crossval, evaluate, fit_with, stratified_split, EpochRecord, PreparedData, SplitPlan};
use msad_core::{build_msadnet, Element, Error, ModelGraph, Precision};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> CliResult<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn print_epoch(prefix: &str, e: &EpochRecord) {
    let val = match (e.val_loss, e.val_acc) {
        (Some(l), Some(a)) => format!("  val_loss {l:.4}  val_acc {a:.4}"),
        _ => String::new(),
    };
    println!(
        "{prefix}epoch {:>3}  lr {:.3e}  loss {:.4}  acc {:.4}{val}  {:.1}s",
        e.epoch, e.lr, e.train_loss, e.train_acc, e.secs
    );
}

/// The configured dataset directory, or the synthetic set when none is set.
fn load_dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    match &cfg.data.root {
        Some(root) => Ok(Dataset::open(root)?),
        None => {
            let set = generate_synthetic(&cfg.synth)?;
            println!(
                "synthetic set: {} images, nearest-centroid baseline {:.3}",
                set.dataset.len(),
                set.baseline_accuracy
            );
            Ok(set.dataset)
        }
    }
}

/// Pre-split trees keep their partitions; anything else is split with the
/// configured weights and seed.
fn split_plan(dataset: &Dataset, cfg: &RunConfig) -> CliResult<SplitPlan> {
    let parts = [Partition::Train, Partition::Valid, Partition::Test].map(|p| dataset.presplit(p));
    if let [Some(train), Some(valid), Some(test)] = parts {
        return Ok(SplitPlan::from_indices(&dataset.labels, train, valid, test));
    }
    Ok(stratified_split(&dataset.labels, cfg.train.split_weights, cfg.train.seed)?)
}

fn check_classes<T: Element>(model: &ModelGraph<T>, dataset: &Dataset) -> CliResult<()> {
    if model.num_classes() != dataset.num_classes() {
        return Err(Error::Config(format!(
            "model has {} classes but the dataset has {}",
            model.num_classes(),
            dataset.num_classes()
        ))
        .into());
    }
    Ok(())
}

pub fn params(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let model = build_msadnet::<f32>(&cfg.model)?;
    let report = audit(&model)?;
    println!("{}", report.to_text().trim_end());
    write(out, "params.txt", report.to_text())?;
    write(out, "params.json", report.to_json()?)?;
    Ok(())
}

pub fn synth(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let set = generate_synthetic(&cfg.synth)?;
    materialize(&set, out)?;
    println!(
        "wrote {} images in {} classes to {} (nearest-centroid baseline {:.3})",
        set.dataset.len(),
        set.manifest.class_names.len(),
        out.display(),
        set.baseline_accuracy
    );
    Ok(())
}

pub fn train(cfg: &mut RunConfig, out: &Path, resume: Option<&Path>) -> CliResult<()> {
    let precision = match resume {
        Some(p) => read_checkpoint(p)?.precision(),
        None => cfg.model.precision,
    };
    match precision {
        Precision::Single => train_as::<f32>(cfg, out, resume),
        Precision::Double => train_as::<f64>(cfg, out, resume),
    }
}

fn train_as<T: Element>(cfg: &mut RunConfig, out: &Path, resume: Option<&Path>) -> CliResult<()> {
    let mut model = match resume {
        Some(p) => {
            let m = load_checkpoint::<T>(p)?;
            cfg.model = m.config().clone();
            m
        }
        None => build_msadnet::<T>(&cfg.model)?,
    };
    write(out, "config.resolved.json", cfg.to_json())?;
    let dataset = load_dataset(cfg)?;
    check_classes(&model, &dataset)?;
    let data = PreparedData::for_model(&dataset, &model)?;
    let plan = split_plan(&dataset, cfg)?;
    write(out, "split.json", serde_json::to_string_pretty(&plan).map_err(Error::from)?)?;
    println!(
        "training {} parameters on {} / {} / {} samples",
        model.trainable_count(),
        plan.train.len(),
        plan.valid.len(),
        plan.test.len()
    );
    let checkpoint = out.join("model.msad");
    let history = match fit_with(&mut model, &data, &plan, &cfg.train, &mut |e| print_epoch("", e)) {
        Ok(h) => h,
        Err(e @ Error::Diverged { .. }) => {
            save_checkpoint(&model, &checkpoint)?;
            eprintln!("last good parameters saved to {}", checkpoint.display());
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(&model, &checkpoint)?;
    write(out, "history.csv", history.to_csv())?;
    write(out, "history.json", history.to_json()?)?;
    if !plan.test.is_empty() {
        let mut report = evaluate(&model, &data, &plan.test, cfg.train.batch_size)?;
        report.seconds_per_epoch = Some(history.seconds_per_epoch());
        println!("{report}");
        write(out, "test_metrics.txt", report.to_string())?;
        write(out, "test_metrics.json", report.to_json()?)?;
        write(out, "test_confusion.csv", report.confusion_csv())?;
    }
    println!("checkpoint written to {}", checkpoint.display());
    Ok(())
}

pub fn eval(cfg: &mut RunConfig, out: &Path, checkpoint: &Path) -> CliResult<()> {
    match read_checkpoint(checkpoint)?.precision() {
        Precision::Single => eval_as::<f32>(cfg, out, checkpoint),
        Precision::Double => eval_as::<f64>(cfg, out, checkpoint),
    }
}

fn eval_as<T: Element>(cfg: &mut RunConfig, out: &Path, checkpoint: &Path) -> CliResult<()> {
    let model = load_checkpoint::<T>(checkpoint)?;
    cfg.model = model.config().clone();
    write(out, "config.resolved.json", cfg.to_json())?;
    let dataset = load_dataset(cfg)?;
    check_classes(&model, &dataset)?;
    let data = PreparedData::for_model(&dataset, &model)?;
    let indices = match cfg.data.eval_split.as_str() {
        "all" => (0..data.len()).collect(),
        name => {
            let plan = split_plan(&dataset, cfg)?;
            match Partition::parse(name)? {
                Partition::Train => plan.train,
                Partition::Valid => plan.valid,
                Partition::Test => plan.test,
            }
        }
    };
    if indices.is_empty() {
        return Err(CliError::Usage(format!("partition `{}` is empty", cfg.data.eval_split)));
    }
    let report = evaluate(&model, &data, &indices, cfg.train.batch_size)?;
    println!("{report}");
    write(out, "metrics.txt", report.to_string())?;
    write(out, "metrics.json", report.to_json()?)?;
    write(out, "confusion.csv", report.confusion_csv())?;
    Ok(())
}

pub fn crossval_cmd(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    match cfg.model.precision {
        Precision::Single => crossval_as::<f32>(cfg, out),
        Precision::Double => crossval_as::<f64>(cfg, out),
    }
}

fn crossval_as<T: Element>(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let dataset = load_dataset(cfg)?;
    let probe = build_msadnet::<T>(&cfg.model)?;
    check_classes(&probe, &dataset)?;
    let data = PreparedData::for_model(&dataset, &probe)?;
    let report = crossval(&cfg.model, &data, cfg.crossval.folds, &cfg.train, &mut |fold, e| {
        print_epoch(&format!("fold {fold}  "), e)
    })?;
    let table = report.to_table();
    print!("{table}");
    write(out, "crossval.txt", table)?;
    write(out, "crossval.csv", report.to_csv())?;
    write(out, "crossval.json", report.to_json()?)?;
    Ok(())
}

pub fn gradcam_cmd(cfg: &mut RunConfig, out: &Path, checkpoint: &Path, images: &[PathBuf]) -> CliResult<()> {
    match read_checkpoint(checkpoint)?.precision() {
        Precision::Single => gradcam_as::<f32>(cfg, out, checkpoint, images),
        Precision::Double => gradcam_as::<f64>(cfg, out, checkpoint, images),
    }
}

fn gradcam_as<T: Element>(cfg: &mut RunConfig, out: &Path, checkpoint: &Path, images: &[PathBuf]) -> CliResult<()> {
    let model = load_checkpoint::<T>(checkpoint)?;
    cfg.model = model.config().clone();
    write(out, "config.resolved.json", cfg.to_json())?;
    model.tap(&cfg.gradcam.tap)?;
    let size = model.config().input_size;
    let channels = model.config().input_channels;
    for path in images {
        let img = resize_bilinear(&load_pnm(path)?, size, size)?;
        let x = to_tensor::<T>(&img, channels)?.reshape(&[1, channels, size, size])?;
        let hm = gradcam(&model, &x, cfg.gradcam.class, &cfg.gradcam.tap)?;
        let stem = path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
        export(&img, &hm, cfg.gradcam.alpha, out, &stem)?;
        let (y, x) = hm.peak();
        println!(
            "{}: class {} via {}, peak at ({y}, {x}) -> {stem}_map.pgm, {stem}_overlay.ppm",
            path.display(),
            hm.class,
            hm.tap
        );
    }
    Ok(())
}
