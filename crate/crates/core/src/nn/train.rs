//! The mini-batch training loop.

use log::info;
use serde::Serialize;

use super::layers::{cross_entropy, softmax_cross_entropy_grad};
use super::model::Model;
use super::optim::{Optimizer, TrainConfig};
use super::tensor::Tensor;
use crate::dataset::{one_hot, LabeledSet, Sample};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's samples.
    pub loss: f64,
    /// Fraction of samples whose pre-update prediction was correct.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochStats>,
}

impl History {
    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,accuracy\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.loss, e.accuracy));
        }
        out
    }
}

/// Owns the optimizer state and epoch counter for one model.
pub struct Trainer<'m> {
    model: &'m mut Model,
    optimizer: Optimizer,
    config: TrainConfig,
    shuffle_root: Stream,
    epoch: usize,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m mut Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            optimizer: Optimizer::from_config(&config),
            shuffle_root: Stream::new(derive_seed(config.seed, "shuffle")),
            model,
            config,
            epoch: 0,
        })
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    /// Confirms every sample fits the model before any parameter changes.
    pub fn preflight(&self, set: &LabeledSet) -> Result<()> {
        if set.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        if set.num_classes() != self.model.num_classes() {
            return Err(Error::shape(format!(
                "training set has {} classes, model outputs {}",
                set.num_classes(),
                self.model.num_classes()
            )));
        }
        let [c, h, w] = self.model.input_shape();
        for (i, s) in set.samples().iter().enumerate() {
            let img = &s.image;
            if (img.channels(), img.height(), img.width()) != (c, h, w) {
                return Err(Error::shape(format!(
                    "sample {i} is {}x{}x{}, model expects {h}x{w}x{c}",
                    img.height(),
                    img.width(),
                    img.channels()
                )));
            }
        }
        Ok(())
    }

    /// One pass over `set` in a freshly shuffled order.
    pub fn run_epoch(&mut self, set: &LabeledSet) -> Result<EpochStats> {
        self.epoch += 1;
        let mut order: Vec<&Sample> = set.samples().iter().collect();
        self.shuffle_root.split(self.epoch as u64).shuffle(&mut order);

        let classes = self.model.num_classes();
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(self.config.batch_size) {
            let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
            let x = self.model.batch_tensor(&images)?;
            let mut targets = Vec::with_capacity(batch.len() * classes);
            for s in batch {
                targets.extend(one_hot(s.label, classes)?);
            }
            let t = Tensor::new(vec![batch.len(), classes], targets)?;

            let probs = self.model.forward_train(&x)?;
            loss_sum += cross_entropy(&probs, &t)? * batch.len() as f64;
            for (row, s) in probs.data().chunks_exact(classes).zip(batch) {
                if crate::metrics::argmax(row) == s.label {
                    correct += 1;
                }
            }
            let grad = softmax_cross_entropy_grad(&probs, &t)?;
            self.model.backward_from_logits(&grad)?;
            self.optimizer.step(self.model)?;
        }
        let n = order.len() as f64;
        Ok(EpochStats {
            epoch: self.epoch,
            loss: loss_sum / n,
            accuracy: correct as f64 / n,
        })
    }
}

/// Trains for `config.epochs` epochs and returns the per-epoch history.
pub fn train(model: &mut Model, set: &LabeledSet, config: &TrainConfig) -> Result<History> {
    let mut trainer = Trainer::new(model, *config)?;
    trainer.preflight(set)?;
    let mut history = History::default();
    for _ in 0..config.epochs {
        let stats = trainer.run_epoch(set)?;
        info!(
            "epoch {:>3}: loss {:.4}, accuracy {:.4}",
            stats.epoch, stats.loss, stats.accuracy
        );
        history.epochs.push(stats);
    }
    Ok(history)
}
