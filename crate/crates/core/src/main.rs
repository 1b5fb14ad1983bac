use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use neuroscan::harness::config::SEED_ENV;
use neuroscan::harness::{self, ArchKind, Averaging, ExperimentConfig, Overrides, Run};
use neuroscan::smote::Target;
use neuroscan::synth::{write_corpus, CorpusSpec};
use neuroscan::{Error, Result};

#[derive(Parser)]
#[command(name = "neuroscan", version, about = "Denoise, balance, train and evaluate image classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Experiment seed; wins over the config and NEUROSCAN_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_arch)]
    arch: Option<ArchKind>,
    /// Dataset root: one sub-directory of images per class.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    iterations: Option<usize>,
    #[arg(long, global = true)]
    kappa: Option<f64>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    k_neighbors: Option<usize>,
    /// Per-class count after balancing, or "max-class".
    #[arg(long, global = true, value_parser = parse_target)]
    target: Option<Target>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Grayscale, denoise, resize and split the dataset into archives.
    Preprocess,
    /// Balance the training archive with SMOTE.
    Balance,
    /// Train the selected architecture.
    Train,
    /// Score the test archive with a checkpoint.
    Evaluate {
        /// Defaults to <out>/model.nspm.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Merge metrics reports into one comparison table.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Defaults to <out>/comparison.csv.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value = "macro", value_parser = parse_averaging)]
        averaging: Averaging,
    },
    /// Write the synthetic shapes corpus.
    Generate {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 20.0)]
        noise: f64,
    },
}

fn parse_arch(s: &str) -> std::result::Result<ArchKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_target(s: &str) -> std::result::Result<Target, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_averaging(s: &str) -> std::result::Result<Averaging, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: c.seed,
        dataset_root: c.dataset.clone(),
        output_dir: c.out.clone(),
        arch: c.arch,
        iterations: c.iterations,
        kappa: c.kappa,
        lambda: c.lambda,
        k_neighbors: c.k_neighbors,
        target: c.target,
        epochs: c.epochs,
        batch_size: c.batch_size,
        learning_rate: c.lr,
    });
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let env_seed = std::env::var(SEED_ENV).ok();
    let stage = || Run::new(cfg.clone(), env_seed.as_deref());
    match cli.command {
        Command::Preprocess => {
            let s = harness::cmd_preprocess(&stage()?)?;
            info!("train {:?}, test {:?}", s.train_counts, s.test_counts);
        }
        Command::Balance => {
            let s = harness::cmd_balance(&stage()?)?;
            info!("balanced to {:?} ({:?} synthesized)", s.counts, s.synthesized);
        }
        Command::Train => {
            let h = harness::cmd_train(&stage()?)?;
            if let Some(last) = h.last() {
                info!("final loss {:.4}, accuracy {:.4}", last.loss, last.accuracy);
            }
        }
        Command::Evaluate { checkpoint } => {
            let r = harness::cmd_evaluate(&stage()?, checkpoint.as_deref())?;
            println!("accuracy {:.4}, macro f1 {:.4}", r.accuracy, r.macro_avg.f1);
        }
        Command::Report {
            reports,
            output,
            averaging,
        } => {
            let output = output.unwrap_or_else(|| cfg.output_dir.join("comparison.csv"));
            print!("{}", harness::cmd_report(&reports, &output, averaging)?);
        }
        Command::Generate {
            dir,
            per_class,
            size,
            noise,
        } => {
            let seed = cfg.resolve_seed(env_seed.as_deref())?;
            let spec = CorpusSpec {
                size,
                counts: [per_class; 4],
                noise,
                seed,
            };
            write_corpus(&spec, &dir)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("{}: {message}", e.code());
            ExitCode::FAILURE
        }
    }
}
