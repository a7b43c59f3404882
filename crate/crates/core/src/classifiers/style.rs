use super::{argmax2, fit, Classify, Fit, PretrainConfig, PretrainReport};
use crate::checkpoint::{copy_named, Checkpoint, CheckpointKind};
use crate::corpus::{NonParallelSample, StyleLabel};
use crate::error::{CastError, Result};
use crate::model::layers::{Init, Linear};
use crate::model::TokenInput;
use crate::vocab::Vocabulary;
use autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleClassifierConfig {
    pub embed_dim: usize,
    pub filter_widths: Vec<usize>,
    pub num_filters: usize,
}

impl Default for StyleClassifierConfig {
    fn default() -> Self {
        StyleClassifierConfig { embed_dim: 32, filter_widths: vec![2, 3, 4], num_filters: 32 }
    }
}

impl StyleClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_filters == 0 || self.filter_widths.is_empty() || self.filter_widths.contains(&0) {
            return Err(CastError::Config("style classifier sizes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Convolutions of several widths over token embeddings, ReLU, max-pooling
/// over time, and a linear two-way softmax.
#[derive(Clone, Debug)]
pub struct StyleClassifier {
    config: StyleClassifierConfig,
    vocab_size: usize,
    params: ParamStore,
    embed: ParamId,
    convs: Vec<(usize, Linear)>,
    head: Linear,
    frozen: bool,
}

impl StyleClassifier {
    pub fn new(config: StyleClassifierConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init { store: &mut params, rng: ChaCha8Rng::seed_from_u64(seed) };
        let e = config.embed_dim;
        let embed = init.uniform("embed", vocab_size, e, 1.0);
        let convs =
            config.filter_widths.iter().map(|&w| (w, Linear::new(&mut init, &format!("conv{w}"), w * e, config.num_filters))).collect();
        let head = Linear::new(&mut init, "head", config.filter_widths.len() * config.num_filters, 2);
        Ok(StyleClassifier { config, vocab_size, params, embed, convs, head, frozen: false })
    }

    pub fn config(&self) -> &StyleClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Direct parameter access, for inspection and perturbation tools.
    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    /// Zeroes the output layer, making every prediction uniform.
    pub fn zero_head(&mut self) {
        for id in [self.head.weight, self.head.bias] {
            let t = self.params.get_mut(id);
            *t = Tensor::zeros(t.rows(), t.cols());
        }
    }

    fn min_len(&self) -> usize {
        self.config.filter_widths.iter().copied().max().unwrap_or(1)
    }

    /// `1 x 2` log-probabilities, column `StyleLabel::index`.
    pub fn log_probs<'a>(&'a self, g: &mut Graph<'a>, input: TokenInput<'_>) -> Result<Var> {
        let table = g.param(&self.params, self.embed);
        let x = match input {
            TokenInput::Ids(ids) => {
                if let Some(&id) = ids.iter().find(|&&i| i >= self.vocab_size) {
                    return Err(CastError::IdOutOfRange { id, size: self.vocab_size });
                }
                if ids.is_empty() {
                    return Err(CastError::InvalidData("style classifier input is empty".into()));
                }
                g.gather(table, ids)
            }
            TokenInput::Weights(w) => {
                let (n, v) = g.shape(w);
                if v != self.vocab_size || n == 0 {
                    return Err(CastError::Shape(format!("style classifier got a {n}x{v} input")));
                }
                g.matmul(w, table)
            }
        };
        let n = g.shape(x).0;
        let x = if n < self.min_len() {
            let pad = g.constant(Tensor::zeros(self.min_len() - n, self.config.embed_dim));
            g.concat_rows(&[x, pad])
        } else {
            x
        };
        let n = g.shape(x).0;
        let mut pooled = Vec::with_capacity(self.convs.len());
        for (w, conv) in &self.convs {
            let windows = n + 1 - w;
            let shifted: Vec<Var> = (0..*w).map(|k| g.slice_rows(x, k, windows)).collect();
            let unfolded = if shifted.len() == 1 { shifted[0] } else { g.concat_cols(&shifted) };
            let h = conv.forward(g, &self.params, unfolded);
            let h = g.relu(h);
            pooled.push(g.max_rows(h));
        }
        let feats = if pooled.len() == 1 { pooled[0] } else { g.concat_cols(&pooled) };
        let logits = self.head.forward(g, &self.params, feats);
        Ok(g.log_softmax(logits))
    }

    pub fn log_prob<'a>(&'a self, g: &mut Graph<'a>, input: TokenInput<'_>, label: StyleLabel) -> Result<Var> {
        let lp = self.log_probs(g, input)?;
        Ok(g.pick(lp, &[(0, label.index())]))
    }

    /// `[p(A), p(B)]` for a token sequence.
    pub fn probabilities(&self, ids: &[usize]) -> Result<[f64; 2]> {
        let mut g = Graph::inference();
        let lp = self.log_probs(&mut g, TokenInput::Ids(ids))?;
        let row = g.value(lp).row(0);
        Ok([row[0].exp(), row[1].exp()])
    }

    pub fn predict(&self, ids: &[usize]) -> Result<StyleLabel> {
        let p = self.probabilities(ids)?;
        Ok(if argmax2(&p) == 1 { StyleLabel::B } else { StyleLabel::A })
    }

    pub fn save(&self, path: &Path, provenance: serde_json::Value) -> Result<()> {
        let config = serde_json::json!({ "classifier": self.config, "vocab_size": self.vocab_size });
        Checkpoint::new(CheckpointKind::StyleClassifier, &config, provenance, &self.params).save(path)
    }

    /// Loads a frozen classifier.
    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path, CheckpointKind::StyleClassifier)?;
        let (config, vocab_size): (StyleClassifierConfig, usize) = split_config(&ck, path)?;
        let mut clf = StyleClassifier::new(config, vocab_size, 0)?;
        copy_named(&mut clf.params, &ck.param_store()?)?;
        clf.frozen = true;
        Ok(clf)
    }
}

pub(super) fn split_config<C: serde::de::DeserializeOwned>(ck: &Checkpoint, path: &Path) -> Result<(C, usize)> {
    let bad = |m: String| CastError::Checkpoint { path: path.to_path_buf(), message: m };
    let config = serde_json::from_value(ck.config["classifier"].clone()).map_err(|e| bad(e.to_string()))?;
    let vocab_size = ck.config["vocab_size"].as_u64().ok_or_else(|| bad("missing vocab_size".into()))? as usize;
    Ok((config, vocab_size))
}

impl Fit for StyleClassifier {
    type Example = (Vec<usize>, StyleLabel);

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn example_loss<'a>(&'a self, g: &mut Graph<'a>, ex: &Self::Example) -> Result<Var> {
        let lp = self.log_prob(g, TokenInput::Ids(&ex.0), ex.1)?;
        Ok(g.scale(lp, -1.0))
    }
}

impl Classify for StyleClassifier {
    fn is_correct(&self, ex: &Self::Example) -> Result<bool> {
        Ok(self.predict(&ex.0)? == ex.1)
    }
}

/// Cross-entropy training on labelled sentences; the result is frozen.
pub fn pretrain_style_classifier(
    data: &[NonParallelSample],
    vocab: &Vocabulary,
    config: StyleClassifierConfig,
    pretrain: &PretrainConfig,
    seed: u64,
) -> Result<(StyleClassifier, PretrainReport)> {
    for label in StyleLabel::ALL {
        if !data.iter().any(|s| s.style == label) {
            return Err(CastError::InvalidData(format!("style classifier data has no {label:?} sentences")));
        }
    }
    let examples: Vec<_> = data.iter().map(|s| (vocab.encode(&s.sentence, false), s.style)).collect();
    let mut clf = StyleClassifier::new(config, vocab.len(), seed)?;
    let report = fit(&mut clf, &examples, pretrain, seed.wrapping_add(1))?;
    clf.freeze();
    Ok((clf, report))
}
