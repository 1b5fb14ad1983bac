//! End-to-end helpers: corpus generation, full runs, artifact comparison.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use neuroscan::dataset::{LabeledSet, Sample};
use neuroscan::harness::archive;
use neuroscan::harness::commands::{BalanceSummary, TRAIN_ARCHIVE};
use neuroscan::harness::manifest::Manifest;
use neuroscan::harness::{
    cmd_balance, cmd_evaluate, cmd_preprocess, cmd_train, ArchKind, ExperimentConfig, Run, StageSeeds,
};
use neuroscan::imaging::Image;
use neuroscan::metrics::MetricsReport;
use neuroscan::nn::{History, ViTConfig};
use neuroscan::rng::Stream;
use neuroscan::smote::Target;
use neuroscan::synth::{write_corpus, CorpusSpec};

use super::suites::{Outcome, FOUR_CLASS_COUNTS};

pub fn write_shapes(dir: &Path, counts: [usize; 4], size: usize, seed: u64) {
    let spec = CorpusSpec { size, counts, noise: 20.0, seed };
    write_corpus(&spec, dir).unwrap();
}

/// Small enough that a full run takes a few seconds.
pub fn tiny_config(root: &Path, out: &Path, arch: ArchKind) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.dataset_root = Some(root.to_path_buf());
    c.output_dir = out.to_path_buf();
    c.seed = Some(5);
    c.arch = arch;
    c.diffusion.iterations = 3;
    c.resize.mini_cnn = 16;
    c.resize.toy_vit = 12;
    c.vit = ViTConfig {
        image_size: 12,
        patch_size: 3,
        embed_dim: 8,
        num_heads: 2,
        transformer_layers: 2,
        mlp_hidden: 16,
    };
    c.train.epochs = 2;
    c.train.batch_size = 4;
    c
}

pub struct Outputs {
    pub balance: BalanceSummary,
    pub history: History,
    pub report: MetricsReport,
}

/// preprocess → balance → train → evaluate.
pub fn run_all(config: &ExperimentConfig) -> neuroscan::Result<Outputs> {
    let run = Run::new(config.clone(), None)?;
    cmd_preprocess(&run)?;
    let balance = cmd_balance(&run)?;
    let history = cmd_train(&run)?;
    let report = cmd_evaluate(&run, None)?;
    Ok(Outputs { balance, history, report })
}

/// Every regular file in `dir`, by name.
pub fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_file() {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            out.insert(name, std::fs::read(&path).unwrap());
        }
    }
    out
}

/// Names of files that differ between two output directories, including
/// files present in only one.
pub fn differing_files(a: &Path, b: &Path) -> Vec<String> {
    let (x, y) = (dir_contents(a), dir_contents(b));
    let mut names: Vec<&String> = x.keys().chain(y.keys()).collect();
    names.sort();
    names.dedup();
    names
        .into_iter()
        .filter(|n| x.get(*n) != y.get(*n))
        .cloned()
        .collect()
}

/// Two full runs of each architecture into separate directories; every
/// artifact must match byte for byte.
pub fn determinism(work: &Path) -> Outcome {
    let root = work.join("corpus");
    write_shapes(&root, [8, 6, 7, 8], 24, 3);
    let mut compared = 0;
    for arch in [ArchKind::MiniCnn, ArchKind::ToyVit] {
        let dirs: Vec<PathBuf> = (0..2).map(|i| work.join(format!("{}_{i}", arch.name()))).collect();
        for d in &dirs {
            run_all(&tiny_config(&root, d, arch)).map_err(|e| e.to_string())?;
        }
        let files = dir_contents(&dirs[0]);
        for required in ["train.nsds", "test.nsds", "train_balanced.nsds", "model.nspm", "history.csv", "report.json"] {
            if !files.contains_key(required) {
                return Err(format!("{}: {required} missing", arch.name()));
            }
        }
        let diff = differing_files(&dirs[0], &dirs[1]);
        if !diff.is_empty() {
            return Err(format!("{}: {diff:?} differ", arch.name()));
        }
        compared += files.len();
    }
    Ok(format!("{compared} artifacts identical across runs"))
}

/// Train counts {833, 841, 814, 849} of 8×8 dummy images, balanced to 841
/// through the command layer.
pub fn balance_four_class_counts(out: &Path) -> Outcome {
    let mut rng = Stream::new(841);
    let mut samples = Vec::new();
    for (c, &n) in FOUR_CLASS_COUNTS.iter().enumerate() {
        for _ in 0..n {
            let img = Image::from_fn(8, 8, |_, _| rng.next_f64());
            samples.push(Sample::new(img, c));
        }
    }
    let names = ["glioma", "meningioma", "notumor", "pituitary"].map(String::from).to_vec();
    let set = LabeledSet::new(names.clone(), samples).map_err(|e| e.to_string())?;

    let mut config = ExperimentConfig::default();
    config.output_dir = out.to_path_buf();
    config.seed = Some(1);
    config.smote.target_per_class = Target::Count(841);
    let run = Run::new(config, None).map_err(|e| e.to_string())?;
    std::fs::create_dir_all(out).map_err(|e| e.to_string())?;
    let bytes = archive::write(&set, &out.join(TRAIN_ARCHIVE)).map_err(|e| e.to_string())?;
    let mut manifest = Manifest::new(names, StageSeeds::from_experiment(1));
    manifest.record_file(TRAIN_ARCHIVE, &bytes);
    manifest.save(out).map_err(|e| e.to_string())?;

    let s = cmd_balance(&run).map_err(|e| e.to_string())?;
    let check = |ok: bool, what: &str| if ok { Ok(()) } else { Err(format!("{what}: {s:?}")) };
    check(s.counts == [841; 4], "counts")?;
    check(s.synthesized == [8, 0, 27, 0], "synthesized")?;
    check(s.removed == [0, 0, 0, 8], "removed")?;
    Ok(format!("counts {:?}, +{:?} synthetic, -{:?} removed", s.counts, s.synthesized, s.removed))
}
