//! Frozen regularizers: a CNN style classifier and a transformer coherence
//! classifier, each with its own pre-training routine.

mod coherence;
mod style;

pub use coherence::{encode_pairs, pretrain_coherence_classifier, CoherenceClassifier, CoherenceClassifierConfig, EncodedPair, Pooling};
pub use style::{pretrain_style_classifier, StyleClassifier, StyleClassifierConfig};

use crate::error::{CastError, Result};
use autograd::{Adam, GradBuffer, Graph, ParamStore, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Optimizer settings shared by the classifier and language-model pre-training loops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of the data held out for the reported accuracy.
    pub heldout_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 4, batch_size: 32, learning_rate: 2e-3, heldout_fraction: 0.1 }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CastError::Config("pretraining needs epochs >= 1 and batch_size >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CastError::Config("pretraining learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(CastError::Config("heldout_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub train_examples: usize,
    pub heldout_examples: usize,
    /// Percent; `None` without a held-out slice.
    pub heldout_accuracy: Option<f64>,
    /// Language models only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heldout_perplexity: Option<f64>,
}

/// A model fitted by minibatch Adam on per-example losses.
pub(crate) trait Fit {
    type Example;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn example_loss<'a>(&'a self, g: &mut Graph<'a>, ex: &Self::Example) -> Result<Var>;
}

/// A fitted model with a right-or-wrong verdict per example.
pub(crate) trait Classify: Fit {
    fn is_correct(&self, ex: &Self::Example) -> Result<bool>;
}

/// Shuffles, holds out a slice, trains, and scores the held-out slice.
pub(crate) fn fit<M: Classify>(model: &mut M, examples: &[M::Example], cfg: &PretrainConfig, seed: u64) -> Result<PretrainReport> {
    let (mut report, heldout) = fit_split(model, examples, cfg, seed)?;
    if !heldout.is_empty() {
        let mut correct = 0;
        for &i in &heldout {
            correct += usize::from(model.is_correct(&examples[i])?);
        }
        report.heldout_accuracy = Some(100.0 * correct as f64 / heldout.len() as f64);
    }
    Ok(report)
}

/// The training part of [`fit`]; returns the held-out indices unscored.
pub(crate) fn fit_split<M: Fit>(
    model: &mut M,
    examples: &[M::Example],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(PretrainReport, Vec<usize>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let heldout_n = (examples.len() as f64 * cfg.heldout_fraction).round() as usize;
    let (train, heldout) = order.split_at(examples.len() - heldout_n);
    let mut train = train.to_vec();
    if train.is_empty() {
        return Err(CastError::InvalidData("no training examples left after the held-out split".into()));
    }

    let mut adam = Adam::new(model.params(), cfg.learning_rate);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        train.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in train.chunks(cfg.batch_size) {
            let mut buf = GradBuffer::new(model.params());
            for &i in batch {
                let mut g = Graph::new(Some(model.params()));
                let loss = model.example_loss(&mut g, &examples[i])?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(CastError::NonFinite { step: epoch as u64, detail: format!("pretraining loss {value}") });
                }
                total += value;
                g.backward(loss).accumulate_into(&g, &mut buf);
            }
            buf.scale(1.0 / batch.len() as f64);
            adam.step(model.params_mut(), &buf);
        }
        epoch_losses.push(total / train.len() as f64);
    }

    let report = PretrainReport {
        epoch_losses,
        train_examples: train.len(),
        heldout_examples: heldout.len(),
        heldout_accuracy: None,
        heldout_perplexity: None,
    };
    Ok((report, heldout.to_vec()))
}

/// Index of the larger entry of a two-class row; ties go to class 0.
pub(crate) fn argmax2(row: &[f64]) -> usize {
    usize::from(row[1] > row[0])
}
