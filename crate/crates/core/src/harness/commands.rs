//! The pipeline stages. Each reads and writes files in the configured output
//! directory while holding its advisory lock.

use std::path::{Path, PathBuf};

use log::info;
use serde_json::json;

use super::archive;
use super::config::{ArchKind, ExperimentConfig, StageSeeds};
use super::lock::DirLock;
use super::manifest::{sha256_hex, Manifest};
use crate::dataset::{distribution, scan_dataset, split_stratified, LabeledSet};
use crate::denoise::denoise;
use crate::error::{Error, Result};
use crate::imaging::{normalize, resize_bilinear, to_grayscale, Image};
use crate::metrics::{evaluate, MetricsReport};
use crate::nn::checkpoint::{read_checkpoint, save_checkpoint};
use crate::nn::{build_mini_cnn, build_toy_vit, train, Model};
use crate::smote::{balance_detailed, Gap};

pub const TRAIN_ARCHIVE: &str = "train.nsds";
pub const TEST_ARCHIVE: &str = "test.nsds";
pub const BALANCED_ARCHIVE: &str = "train_balanced.nsds";
pub const DISTRIBUTION_CSV: &str = "distribution.csv";
pub const CHECKPOINT: &str = "model.nspm";
pub const HISTORY_CSV: &str = "history.csv";
pub const REPORT_JSON: &str = "report.json";
pub const CONFUSION_CSV: &str = "confusion.csv";

/// A validated config with its seeds resolved.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: ExperimentConfig,
    pub seeds: StageSeeds,
}

impl Run {
    /// `env_seed` is the value of `NEUROSCAN_SEED`, if set.
    pub fn new(config: ExperimentConfig, env_seed: Option<&str>) -> Result<Self> {
        config.validate()?;
        let seeds = StageSeeds::from_experiment(config.resolve_seed(env_seed)?);
        Ok(Run { config, seeds })
    }

    fn out(&self) -> &Path {
        &self.config.output_dir
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out().join(name)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads an archive and checks it against the hash the manifest recorded.
fn read_verified(run: &Run, manifest: &Manifest, name: &str) -> Result<LabeledSet> {
    let bytes = read_file(&run.path(name))?;
    match manifest.files.get(name) {
        Some(h) if *h == sha256_hex(&bytes) => archive::decode(&bytes),
        Some(_) => Err(Error::ArchiveFormat(format!(
            "{name} does not match the hash recorded in the manifest"
        ))),
        None => Err(Error::State(format!("{name} is not recorded in the manifest"))),
    }
}

/// grayscale → diffusion denoising → bilinear resize → scale to [0, 1].
pub fn preprocess_image(img: &Image, config: &ExperimentConfig) -> Result<Image> {
    let side = config.input_size();
    let gray = to_grayscale(img)?;
    let smooth = denoise(&gray, &config.diffusion)?;
    Ok(normalize(&resize_bilinear(&smooth, side, side)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessSummary {
    pub classes: Vec<String>,
    pub source_counts: Vec<usize>,
    pub train_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
}

pub fn cmd_preprocess(run: &Run) -> Result<PreprocessSummary> {
    let cfg = &run.config;
    let root = cfg
        .dataset_root
        .as_ref()
        .ok_or_else(|| Error::Config("dataset_root is required for preprocess".into()))?;
    let _lock = DirLock::acquire(run.out())?;
    for stale in [BALANCED_ARCHIVE, CHECKPOINT, HISTORY_CSV, REPORT_JSON, CONFUSION_CSV] {
        let _ = std::fs::remove_file(run.path(stale));
    }

    let source = scan_dataset(root)?;
    info!("read {} images in {} classes", source.len(), source.num_classes());
    let processed = source.map_images(|img| preprocess_image(img, cfg))?;
    let (train_set, test_set) =
        split_stratified(&processed, cfg.split.train_fraction, run.seeds.split)?;

    let mut manifest = Manifest::new(source.class_names().to_vec(), run.seeds);
    let train_bytes = archive::write(&train_set, &run.path(TRAIN_ARCHIVE))?;
    let test_bytes = archive::write(&test_set, &run.path(TEST_ARCHIVE))?;
    let dist = distribution(&train_set)?.to_csv();
    write_file(&run.path(DISTRIBUTION_CSV), dist.as_bytes())?;
    manifest.record_file(TRAIN_ARCHIVE, &train_bytes);
    manifest.record_file(TEST_ARCHIVE, &test_bytes);
    manifest.record_file(DISTRIBUTION_CSV, dist.as_bytes());

    let summary = PreprocessSummary {
        classes: source.class_names().to_vec(),
        source_counts: source.counts(),
        train_counts: train_set.counts(),
        test_counts: test_set.counts(),
    };
    manifest.counts.insert("source".into(), summary.source_counts.clone());
    manifest.counts.insert("train".into(), summary.train_counts.clone());
    manifest.counts.insert("test".into(), summary.test_counts.clone());
    manifest.record_stage(
        "preprocess",
        json!({
            "dataset_root": root,
            "arch": cfg.arch.name(),
            "input_size": cfg.input_size(),
            "grayscale": "rec601",
            "diffusion": cfg.diffusion,
            "normalize": "divide_by_255",
            "train_fraction": cfg.split.train_fraction,
            "applied_to": ["train", "test"],
        }),
    );
    manifest
        .notes
        .push("test images receive the same preprocessing as training images".into());
    manifest.save(run.out())?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceSummary {
    pub target: usize,
    pub counts: Vec<usize>,
    pub synthesized: Vec<usize>,
    pub removed: Vec<usize>,
}

/// Balances the training archive. The test archive is neither read nor written.
pub fn cmd_balance(run: &Run) -> Result<BalanceSummary> {
    let _lock = DirLock::acquire(run.out())?;
    let mut manifest = Manifest::load(run.out())?;
    let train_set = read_verified(run, &manifest, TRAIN_ARCHIVE)?;
    let params = run.config.smote_params(run.seeds.smote);
    let balanced = balance_detailed(&train_set, &params, Gap::Uniform)?;
    let bytes = archive::write(&balanced.set, &run.path(BALANCED_ARCHIVE))?;

    let summary = BalanceSummary {
        target: balanced.target,
        counts: balanced.set.counts(),
        synthesized: balanced.synthesized.clone(),
        removed: balanced.removed.clone(),
    };
    manifest.seeds = run.seeds;
    manifest.record_file(BALANCED_ARCHIVE, &bytes);
    manifest.counts.insert("train_balanced".into(), summary.counts.clone());
    manifest.record_stage(
        "balance",
        json!({
            "input": TRAIN_ARCHIVE,
            "k_neighbors": params.k_neighbors,
            "target_per_class": params.target,
            "resolved_target": summary.target,
            "synthesized": summary.synthesized,
            "removed": summary.removed,
            "synthetic_flags": "stored per sample in the archive",
        }),
    );
    manifest.save(run.out())?;
    Ok(summary)
}

pub fn build_model(run: &Run, num_classes: usize) -> Result<Model> {
    let cfg = &run.config;
    match cfg.arch {
        ArchKind::MiniCnn => build_mini_cnn(num_classes, cfg.resize.mini_cnn, run.seeds.init),
        ArchKind::ToyVit => build_toy_vit(&cfg.vit, num_classes, run.seeds.init),
    }
}

/// Trains on the balanced archive when one exists, else the plain split.
pub fn cmd_train(run: &Run) -> Result<crate::nn::History> {
    let _lock = DirLock::acquire(run.out())?;
    let mut manifest = Manifest::load(run.out())?;
    let source = if manifest.has_stage("balance") {
        BALANCED_ARCHIVE
    } else {
        TRAIN_ARCHIVE
    };
    let train_set = read_verified(run, &manifest, source)?;
    let mut model = build_model(run, train_set.num_classes())?;
    let config = run.config.train_config(run.seeds.train);
    info!(
        "training {} ({} parameters) on {} samples",
        model.architecture(),
        model.num_parameters(),
        train_set.len()
    );
    let history = train(&mut model, &train_set, &config)?;

    let ckpt = save_checkpoint(&model);
    write_file(&run.path(CHECKPOINT), &ckpt)?;
    let csv = history.to_csv();
    write_file(&run.path(HISTORY_CSV), csv.as_bytes())?;
    manifest.seeds = run.seeds;
    manifest.record_file(CHECKPOINT, &ckpt);
    manifest.record_file(HISTORY_CSV, csv.as_bytes());
    manifest.record_stage(
        "train",
        json!({
            "input": source,
            "architecture": model.architecture().to_string(),
            "epochs": config.epochs,
            "batch_size": config.batch_size,
            "learning_rate": config.learning_rate,
            "optimizer": config.optimizer,
            "loss": "cross_entropy",
        }),
    );
    manifest.save(run.out())?;
    Ok(history)
}

/// File-name-safe version of a class name.
fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn roc_file_name(class: &str) -> String {
    format!("roc_{}.csv", slug(class))
}

/// Scores the test archive with a checkpoint (default `<out>/model.nspm`).
pub fn cmd_evaluate(run: &Run, checkpoint: Option<&Path>) -> Result<MetricsReport> {
    let _lock = DirLock::acquire(run.out())?;
    let mut manifest = Manifest::load(run.out())?;
    let ckpt_path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| run.path(CHECKPOINT));
    let model = read_checkpoint(&ckpt_path)?;
    let arch = model.architecture();
    if arch.name() != run.config.arch.name() {
        return Err(Error::CheckpointFormat(format!(
            "checkpoint holds {arch}, config selects {}",
            run.config.arch.name()
        )));
    }
    let test_set = read_verified(run, &manifest, TEST_ARCHIVE)?;
    if test_set.num_classes() != model.num_classes() {
        return Err(Error::CheckpointFormat(format!(
            "checkpoint has {} classes, test archive has {}",
            model.num_classes(),
            test_set.num_classes()
        )));
    }
    let [_, h, w] = model.input_shape();
    if let Some(s) = test_set.samples().first() {
        if (s.image.height(), s.image.width()) != (h, w) {
            return Err(Error::CheckpointFormat(format!(
                "checkpoint expects {h}x{w} inputs, test archive holds {}x{}",
                s.image.height(),
                s.image.width()
            )));
        }
    }

    let images: Vec<&Image> = test_set.samples().iter().map(|s| &s.image).collect();
    let probs = model.predict_many(&images, 32)?;
    let truth: Vec<usize> = test_set.samples().iter().map(|s| s.label).collect();
    let (mut report, curves) = evaluate(&probs, &truth, test_set.class_names())?;
    report.model = Some(run.config.arch.name().to_owned());

    let json = report.to_json() + "\n";
    write_file(&run.path(REPORT_JSON), json.as_bytes())?;
    manifest.record_file(REPORT_JSON, json.as_bytes());
    let m = crate::metrics::ConfusionMatrix::from_rows(&report.confusion)?;
    let csv = m.to_csv(test_set.class_names());
    write_file(&run.path(CONFUSION_CSV), csv.as_bytes())?;
    manifest.record_file(CONFUSION_CSV, csv.as_bytes());
    let mut roc_files = Vec::new();
    for (class, curve) in test_set.class_names().iter().zip(&curves) {
        let name = roc_file_name(class);
        let _ = std::fs::remove_file(run.path(&name));
        if let Some(curve) = curve {
            let csv = curve.to_csv();
            write_file(&run.path(&name), csv.as_bytes())?;
            manifest.record_file(&name, csv.as_bytes());
            roc_files.push(name);
        }
    }
    manifest.record_stage(
        "evaluate",
        json!({
            "checkpoint_sha256": sha256_hex(&read_file(&ckpt_path)?),
            "architecture": arch.to_string(),
            "input": TEST_ARCHIVE,
            "roc_files": roc_files,
        }),
    );
    manifest.save(run.out())?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Averaging {
    #[default]
    Macro,
    Weighted,
}

impl std::str::FromStr for Averaging {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro" => Ok(Averaging::Macro),
            "weighted" => Ok(Averaging::Weighted),
            other => Err(Error::invalid(format!("averaging must be macro or weighted, got {other:?}"))),
        }
    }
}

impl Averaging {
    pub fn name(self) -> &'static str {
        match self {
            Averaging::Macro => "macro",
            Averaging::Weighted => "weighted",
        }
    }
}

pub const COMPARISON_HEADER: &str = "model,accuracy,f1,precision,recall,averaging";

/// One row per report: `model,accuracy,f1,precision,recall,averaging`.
pub fn comparison_table(reports: &[PathBuf], averaging: Averaging) -> Result<String> {
    let mut out = format!("{COMPARISON_HEADER}\n");
    for path in reports {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report = MetricsReport::from_json(&text).map_err(|e| {
            Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
        })?;
        let label = report.model.clone().unwrap_or_else(|| {
            path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
        });
        let agg = match averaging {
            Averaging::Macro => &report.macro_avg,
            Averaging::Weighted => &report.weighted,
        };
        out.push_str(&format!(
            "{label},{},{},{},{},{}\n",
            report.accuracy,
            agg.f1,
            agg.precision,
            agg.recall,
            averaging.name()
        ));
    }
    Ok(out)
}

pub fn cmd_report(reports: &[PathBuf], output: &Path, averaging: Averaging) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::invalid("report needs at least one metrics report"));
    }
    let table = comparison_table(reports, averaging)?;
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_file(output, table.as_bytes())?;
    Ok(table)
}
