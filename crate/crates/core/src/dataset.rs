//! Labelled image collections: directory scanning, stratified splitting,
//! shuffling, one-hot encoding, batching and class-share summaries.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::{self, Image};
use crate::rng::Stream;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
    /// Set for samples produced by oversampling rather than read from disk.
    pub synthetic: bool,
}

impl Sample {
    pub fn new(image: Image, label: usize) -> Self {
        Sample {
            image,
            label,
            synthetic: false,
        }
    }
}

/// Ordered samples plus the class-name table their labels index into.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    class_names: Vec<String>,
    samples: Vec<Sample>,
}

impl LabeledSet {
    pub fn new(class_names: Vec<String>, samples: Vec<Sample>) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.label >= class_names.len()) {
            return Err(Error::invalid(format!(
                "label {} out of range for {} classes",
                s.label,
                class_names.len()
            )));
        }
        Ok(LabeledSet {
            class_names,
            samples,
        })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn with_samples(&self, samples: Vec<Sample>) -> Result<Self> {
        LabeledSet::new(self.class_names.clone(), samples)
    }

    pub fn map_images(&self, f: impl Fn(&Image) -> Result<Image> + Sync) -> Result<Self> {
        let samples = self
            .samples
            .par_iter()
            .map(|s| {
                Ok(Sample {
                    image: f(&s.image)?,
                    ..s.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.with_samples(samples)
    }
}

/// Reads `<root>/<class>/<image>`; classes and files are visited in sorted order.
pub fn scan_dataset(root: &Path) -> Result<LabeledSet> {
    if !root.is_dir() {
        return Err(Error::DatasetLayout(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let mut class_dirs: Vec<(String, PathBuf)> = read_sorted(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .filter_map(|p| {
            let name = p.file_name()?.to_str()?.to_owned();
            (!name.starts_with('.')).then_some((name, p))
        })
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::DatasetLayout(format!(
            "dataset root {} has no class directories",
            root.display()
        )));
    }

    let mut files = Vec::new();
    for (label, (_, dir)) in class_dirs.iter().enumerate() {
        let entries: Vec<PathBuf> = read_sorted(dir)?
            .into_iter()
            .filter(|p| p.is_file())
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| !n.starts_with('.'))
            })
            .collect();
        if entries.is_empty() {
            warn!("class directory {} is empty", dir.display());
        }
        files.extend(entries.into_iter().map(|p| (p, label)));
    }

    let samples = files
        .par_iter()
        .map(|(path, label)| Ok(Sample::new(imaging::load_image(path)?, *label)))
        .collect::<Result<Vec<_>>>()?;
    LabeledSet::new(class_dirs.into_iter().map(|(n, _)| n).collect(), samples)
}

fn read_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Per-class split: each class is shuffled with its own stream and the first
/// `floor(train_fraction * n)` samples go to the training side.
pub fn split_stratified(
    set: &LabeledSet,
    train_fraction: f64,
    seed: u64,
) -> Result<(LabeledSet, LabeledSet)> {
    if set.is_empty() {
        return Err(Error::invalid("cannot split an empty set"));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let root = Stream::new(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..set.num_classes() {
        let mut members: Vec<usize> = (0..set.len())
            .filter(|&i| set.samples[i].label == class)
            .collect();
        root.split(class as u64).shuffle(&mut members);
        let cut = (train_fraction * members.len() as f64).floor() as usize;
        train.extend(members[..cut].iter().map(|&i| set.samples[i].clone()));
        test.extend(members[cut..].iter().map(|&i| set.samples[i].clone()));
    }
    Ok((set.with_samples(train)?, set.with_samples(test)?))
}

/// Seeded Fisher–Yates permutation of the samples.
pub fn shuffle(set: &LabeledSet, seed: u64) -> LabeledSet {
    let mut samples = set.samples.clone();
    Stream::new(seed).shuffle(&mut samples);
    LabeledSet {
        class_names: set.class_names.clone(),
        samples,
    }
}

pub fn one_hot(class_index: usize, num_classes: usize) -> Result<Vec<f64>> {
    if class_index >= num_classes {
        return Err(Error::invalid(format!(
            "class index {class_index} out of range for {num_classes} classes"
        )));
    }
    let mut v = vec![0.0; num_classes];
    v[class_index] = 1.0;
    Ok(v)
}

pub fn batches(set: &LabeledSet, batch_size: usize) -> Result<Vec<&[Sample]>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    Ok(set.samples.chunks(batch_size).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution {
    pub classes: Vec<String>,
    pub counts: Vec<usize>,
    /// Exact shares in percent; round only for display.
    pub percents: Vec<f64>,
}

impl ClassDistribution {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `class,count,percent` rows, percent with two decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,count,percent\n");
        for ((c, n), p) in self.classes.iter().zip(&self.counts).zip(&self.percents) {
            writeln!(out, "{c},{n},{p:.2}").unwrap();
        }
        out
    }
}

pub fn distribution(set: &LabeledSet) -> Result<ClassDistribution> {
    if set.is_empty() {
        return Err(Error::invalid("distribution of an empty set"));
    }
    distribution_from_counts(set.class_names.clone(), set.counts())
}

pub fn distribution_from_counts(classes: Vec<String>, counts: Vec<usize>) -> Result<ClassDistribution> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid("distribution of an empty set"));
    }
    let percents = counts
        .iter()
        .map(|&n| 100.0 * n as f64 / total as f64)
        .collect();
    Ok(ClassDistribution {
        classes,
        counts,
        percents,
    })
}
