//! Word-level LSTM language model used to score fluency as perplexity.

use crate::checkpoint::{copy_named, Checkpoint, CheckpointKind};
use crate::classifiers::{fit_split, Fit, PretrainConfig, PretrainReport};
use crate::error::{CastError, Result};
use crate::model::layers::{Init, Linear};
use crate::vocab::{BOS, EOS};
use autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LanguageModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for LanguageModelConfig {
    fn default() -> Self {
        LanguageModelConfig { embed_dim: 32, hidden_dim: 64 }
    }
}

impl LanguageModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(CastError::Config("language model sizes must be at least 1".into()));
        }
        Ok(())
    }
}

/// One LSTM layer over word embeddings with a softmax over the vocabulary.
/// Gate order in the packed weights: input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct LanguageModel {
    config: LanguageModelConfig,
    vocab_size: usize,
    params: ParamStore,
    embed: ParamId,
    input: Linear,
    recurrent: ParamId,
    output: Linear,
}

impl LanguageModel {
    pub fn new(config: LanguageModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let (e, h) = (config.embed_dim, config.hidden_dim);
        let mut params = ParamStore::new();
        let mut init = Init { store: &mut params, rng: ChaCha8Rng::seed_from_u64(seed) };
        let bound = 1.0 / (h as f64).sqrt();
        let embed = init.uniform("embed", vocab_size, e, 0.1);
        let input = Linear::with_bound(&mut init, "lstm.input", e, 4 * h, bound);
        let recurrent = init.uniform("lstm.recurrent.w", h, 4 * h, bound);
        let output = Linear::with_bound(&mut init, "output", h, vocab_size, bound);
        let forget = params.get_mut(input.bias);
        for c in h..2 * h {
            forget.set(0, c, 1.0);
        }
        Ok(LanguageModel { config, vocab_size, params, embed, input, recurrent, output })
    }

    pub fn config(&self) -> &LanguageModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Zeroes the output layer, making every next-token distribution uniform.
    pub fn zero_head(&mut self) {
        for id in [self.output.weight, self.output.bias] {
            let t = self.params.get_mut(id);
            *t = Tensor::zeros(t.rows(), t.cols());
        }
    }

    /// `log p(w_1..w_n, EOS)` given BOS, for content ids `w`.
    pub fn sentence_log_prob<'a>(&'a self, g: &mut Graph<'a>, ids: &[usize]) -> Result<Var> {
        if let Some(&id) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(CastError::IdOutOfRange { id, size: self.vocab_size });
        }
        let h = self.config.hidden_dim;
        let inputs: Vec<usize> = std::iter::once(BOS).chain(ids.iter().copied()).collect();
        let table = g.param(&self.params, self.embed);
        let x = g.gather(table, &inputs);
        let projected = self.input.forward(g, &self.params, x);
        let u = g.param(&self.params, self.recurrent);
        let mut state = g.constant(Tensor::zeros(1, h));
        let mut cell = g.constant(Tensor::zeros(1, h));
        let mut outputs = Vec::with_capacity(inputs.len());
        for t in 0..inputs.len() {
            let xt = g.slice_rows(projected, t, 1);
            let rec = g.matmul(state, u);
            let gates = g.add(xt, rec);
            let i = g.slice_cols(gates, 0, h);
            let i = g.sigmoid(i);
            let f = g.slice_cols(gates, h, h);
            let f = g.sigmoid(f);
            let c = g.slice_cols(gates, 2 * h, h);
            let c = g.tanh(c);
            let o = g.slice_cols(gates, 3 * h, h);
            let o = g.sigmoid(o);
            let kept = g.mul(f, cell);
            let written = g.mul(i, c);
            cell = g.add(kept, written);
            let squashed = g.tanh(cell);
            state = g.mul(o, squashed);
            outputs.push(state);
        }
        let hs = if outputs.len() == 1 { outputs[0] } else { g.concat_rows(&outputs) };
        let logits = self.output.forward(g, &self.params, hs);
        let logp = g.log_softmax(logits);
        let gold: Vec<(usize, usize)> = ids.iter().copied().chain([EOS]).enumerate().collect();
        let picked = g.pick(logp, &gold);
        Ok(g.sum(picked))
    }

    /// `exp` of the mean negative log-likelihood per predicted token, the
    /// end-of-sentence token included.
    pub fn perplexity(&self, sentences: &[Vec<usize>]) -> Result<f64> {
        if sentences.is_empty() {
            return Err(CastError::InvalidData("perplexity of an empty set".into()));
        }
        let mut nll = 0.0;
        let mut tokens = 0usize;
        for s in sentences {
            let mut g = Graph::inference();
            let lp = self.sentence_log_prob(&mut g, s)?;
            nll -= g.value(lp).item();
            tokens += s.len() + 1;
        }
        Ok((nll / tokens as f64).exp())
    }

    pub fn save(&self, path: &Path, provenance: serde_json::Value) -> Result<()> {
        let config = serde_json::json!({ "language_model": self.config, "vocab_size": self.vocab_size });
        Checkpoint::new(CheckpointKind::LanguageModel, &config, provenance, &self.params).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path, CheckpointKind::LanguageModel)?;
        let bad = |m: String| CastError::Checkpoint { path: path.to_path_buf(), message: m };
        let config: LanguageModelConfig = serde_json::from_value(ck.config["language_model"].clone()).map_err(|e| bad(e.to_string()))?;
        let vocab_size = ck.config["vocab_size"].as_u64().ok_or_else(|| bad("missing vocab_size".into()))? as usize;
        let mut lm = LanguageModel::new(config, vocab_size, 0)?;
        copy_named(&mut lm.params, &ck.param_store()?)?;
        Ok(lm)
    }
}

impl Fit for LanguageModel {
    type Example = Vec<usize>;

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn example_loss<'a>(&'a self, g: &mut Graph<'a>, ex: &Vec<usize>) -> Result<Var> {
        let lp = self.sentence_log_prob(g, ex)?;
        Ok(g.scale(lp, -1.0 / (ex.len() + 1) as f64))
    }
}

/// Trains on content-id sentences (no BOS/EOS) and reports held-out perplexity.
pub fn train_language_model(
    sentences: &[Vec<usize>],
    vocab_size: usize,
    config: LanguageModelConfig,
    pretrain: &PretrainConfig,
    seed: u64,
) -> Result<(LanguageModel, PretrainReport)> {
    if sentences.is_empty() {
        return Err(CastError::InvalidData("no sentences to train the language model on".into()));
    }
    let mut lm = LanguageModel::new(config, vocab_size, seed)?;
    let (mut report, heldout) = fit_split(&mut lm, sentences, pretrain, seed)?;
    if !heldout.is_empty() {
        let held: Vec<Vec<usize>> = heldout.iter().map(|&i| sentences[i].clone()).collect();
        report.heldout_perplexity = Some(lm.perplexity(&held)?);
    }
    Ok((lm, report))
}
