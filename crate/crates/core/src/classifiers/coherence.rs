use super::style::split_config;
use super::{argmax2, fit, Classify, Fit, PretrainConfig, PretrainReport};
use crate::checkpoint::{copy_named, Checkpoint, CheckpointKind};
use crate::corpus::CoherencePair;
use crate::error::{CastError, Result};
use crate::model::layers::{positional_encoding, Encoder, Init, Linear};
use crate::model::TokenInput;
use crate::vocab::{EncodedContext, Vocabulary};
use autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoherenceClassifierConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub max_context_words: usize,
    pub max_sentence_len: usize,
    pub pooling: Pooling,
    /// Query and key projections start out equal, scaled by this factor, so
    /// that attention initially favours matching tokens; 0 keeps them independent.
    pub query_key_tie: f64,
}

impl Default for CoherenceClassifierConfig {
    fn default() -> Self {
        CoherenceClassifierConfig {
            num_layers: 1,
            num_heads: 4,
            head_dim: 8,
            ffn_dim: 64,
            max_context_words: 50,
            max_sentence_len: 32,
            pooling: Pooling::Candidate,
            query_key_tie: 2.0,
        }
    }
}

impl CoherenceClassifierConfig {
    pub fn width(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.num_layers, self.num_heads, self.head_dim, self.ffn_dim, self.max_context_words, self.max_sentence_len];
        if dims.contains(&0) {
            return Err(CastError::Config("coherence classifier sizes must be at least 1".into()));
        }
        if !(self.query_key_tie >= 0.0 && self.query_key_tie.is_finite()) {
            return Err(CastError::Config("query_key_tie must be a finite value >= 0".into()));
        }
        Ok(())
    }
}

/// Rows averaged into the pooled vector `u`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Every position of the reconstructed paragraph.
    All,
    /// The candidate's positions only.
    Candidate,
}

/// A coherence pair in token ids, context already truncated.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedPair {
    pub context: EncodedContext,
    pub candidate: Vec<usize>,
    pub label: bool,
}

/// Transformer encoder over `[before; candidate; after]` with a segment
/// embedding marking the candidate, mean-pooled to `u` (over the candidate
/// by default, see [`Pooling`]), then
/// `softmax(tanh(W u + b))` over {incoherent, coherent}.
#[derive(Clone, Debug)]
pub struct CoherenceClassifier {
    config: CoherenceClassifierConfig,
    vocab_size: usize,
    params: ParamStore,
    embed: ParamId,
    segment: ParamId,
    encoder: Encoder,
    head: Linear,
    positions: Tensor,
    frozen: bool,
}

impl CoherenceClassifier {
    pub fn new(config: CoherenceClassifierConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.width();
        let mut params = ParamStore::new();
        let mut init = Init { store: &mut params, rng: ChaCha8Rng::seed_from_u64(seed) };
        let bound = 3f64.sqrt();
        let embed = init.uniform("embed", vocab_size, d, bound);
        let segment = init.uniform("segment", 2, d, bound);
        let encoder = Encoder::new(&mut init, "enc", config.num_layers, config.num_heads, config.head_dim, config.ffn_dim);
        // a small head keeps the pooled features from being ignored early on
        let head = Linear::with_bound(&mut init, "head", d, 2, 1.0 / (d as f64).sqrt());
        if config.query_key_tie > 0.0 {
            for layer in &encoder.layers {
                let mut q = params.get(layer.attn.query.weight).clone();
                q.scale_assign(config.query_key_tie);
                *params.get_mut(layer.attn.key.weight) = q.clone();
                *params.get_mut(layer.attn.query.weight) = q;
            }
        }
        let positions = positional_encoding(config.max_context_words + config.max_sentence_len + 1, d);
        Ok(CoherenceClassifier { config, vocab_size, params, embed, segment, encoder, head, positions, frozen: false })
    }

    pub fn config(&self) -> &CoherenceClassifierConfig {
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

    /// Zeroes `W` and `b`, making every prediction 0.5.
    pub fn zero_head(&mut self) {
        for id in [self.head.weight, self.head.bias] {
            let t = self.params.get_mut(id);
            *t = Tensor::zeros(t.rows(), t.cols());
        }
    }

    /// `1 x 2` log-probabilities; column 1 is "coherent".
    pub fn log_probs<'a>(&'a self, g: &mut Graph<'a>, context: &EncodedContext, candidate: TokenInput<'_>) -> Result<Var> {
        let h = self.encode(g, context, candidate)?;
        Ok(self.classify(g, h, context))
    }

    fn classify<'a>(&'a self, g: &mut Graph<'a>, h: Var, context: &EncodedContext) -> Var {
        let pooled = match self.config.pooling {
            Pooling::All => h,
            Pooling::Candidate => {
                let n = g.shape(h).0 - context.len();
                g.slice_rows(h, context.before.len(), n)
            }
        };
        let u = g.mean_rows(pooled);
        let z = self.head.forward(g, &self.params, u);
        let z = g.tanh(z);
        g.log_softmax(z)
    }

    /// Encoder states of `[before; candidate; after]`.
    fn encode<'a>(&'a self, g: &mut Graph<'a>, context: &EncodedContext, candidate: TokenInput<'_>) -> Result<Var> {
        if context.is_empty() {
            return Err(CastError::InvalidData("coherence classifier needs a non-empty context".into()));
        }
        if context.len() > self.config.max_context_words {
            return Err(CastError::InvalidData(format!(
                "context of {} tokens exceeds max_context_words {}",
                context.len(),
                self.config.max_context_words
            )));
        }
        let check = |ids: &[usize]| match ids.iter().find(|&&i| i >= self.vocab_size) {
            Some(&id) => Err(CastError::IdOutOfRange { id, size: self.vocab_size }),
            None => Ok(()),
        };
        check(&context.before)?;
        check(&context.after)?;
        let table = g.param(&self.params, self.embed);
        let (tokens, cand_len) = match candidate {
            TokenInput::Ids(c) => {
                check(c)?;
                if c.is_empty() {
                    return Err(CastError::InvalidData("empty coherence candidate".into()));
                }
                let ids: Vec<usize> = context.before.iter().chain(c).chain(&context.after).copied().collect();
                (g.gather(table, &ids), c.len())
            }
            TokenInput::Weights(w) => {
                let (n, v) = g.shape(w);
                if v != self.vocab_size || n == 0 {
                    return Err(CastError::Shape(format!("coherence classifier got a {n}x{v} candidate")));
                }
                let cand = g.matmul(w, table);
                let mut parts = Vec::with_capacity(3);
                if !context.before.is_empty() {
                    parts.push(g.gather(table, &context.before));
                }
                parts.push(cand);
                if !context.after.is_empty() {
                    parts.push(g.gather(table, &context.after));
                }
                (g.concat_rows(&parts), n)
            }
        };
        if cand_len > self.config.max_sentence_len + 1 {
            return Err(CastError::InvalidData(format!("candidate of {cand_len} tokens is too long")));
        }
        let n = g.shape(tokens).0;
        let d = self.config.width();
        let before = context.before.len();
        let segments: Vec<usize> = (0..n).map(|i| usize::from(i >= before && i < before + cand_len)).collect();
        let seg_table = g.param(&self.params, self.segment);
        let seg = g.gather(seg_table, &segments);
        let pos = g.constant(Tensor::from_vec(n, d, self.positions.data()[..n * d].to_vec()));
        let x = g.add(tokens, seg);
        let x = g.add(x, pos);
        Ok(self.encoder.forward(g, &self.params, x))
    }

    /// `log p(s = 1 | context, candidate)`.
    pub fn coherence_log_prob<'a>(&'a self, g: &mut Graph<'a>, context: &EncodedContext, candidate: TokenInput<'_>) -> Result<Var> {
        let lp = self.log_probs(g, context, candidate)?;
        Ok(g.pick(lp, &[(0, 1)]))
    }

    /// `p(s = 1)`.
    pub fn probability(&self, context: &EncodedContext, candidate: &[usize]) -> Result<f64> {
        let mut g = Graph::inference();
        let lp = self.log_probs(&mut g, context, TokenInput::Ids(candidate))?;
        Ok(g.value(lp).get(0, 1).exp())
    }

    pub fn predict(&self, context: &EncodedContext, candidate: &[usize]) -> Result<bool> {
        let mut g = Graph::inference();
        let lp = self.log_probs(&mut g, context, TokenInput::Ids(candidate))?;
        Ok(argmax2(g.value(lp).row(0)) == 1)
    }

    pub fn save(&self, path: &Path, provenance: serde_json::Value) -> Result<()> {
        let config = serde_json::json!({ "classifier": self.config, "vocab_size": self.vocab_size });
        Checkpoint::new(CheckpointKind::CoherenceClassifier, &config, provenance, &self.params).save(path)
    }

    /// Loads a frozen classifier.
    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path, CheckpointKind::CoherenceClassifier)?;
        let (config, vocab_size): (CoherenceClassifierConfig, usize) = split_config(&ck, path)?;
        let mut clf = CoherenceClassifier::new(config, vocab_size, 0)?;
        copy_named(&mut clf.params, &ck.param_store()?)?;
        clf.frozen = true;
        Ok(clf)
    }
}

impl Fit for CoherenceClassifier {
    type Example = EncodedPair;

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn example_loss<'a>(&'a self, g: &mut Graph<'a>, ex: &EncodedPair) -> Result<Var> {
        let lp = self.log_probs(g, &ex.context, TokenInput::Ids(&ex.candidate))?;
        let picked = g.pick(lp, &[(0, usize::from(ex.label))]);
        Ok(g.scale(picked, -1.0))
    }
}

impl Classify for CoherenceClassifier {
    fn is_correct(&self, ex: &EncodedPair) -> Result<bool> {
        Ok(self.predict(&ex.context, &ex.candidate)? == ex.label)
    }
}

/// Encodes pairs with `vocab`, truncating contexts to the classifier's cap.
pub fn encode_pairs(pairs: &[CoherencePair], vocab: &Vocabulary, max_context_words: usize) -> Result<Vec<EncodedPair>> {
    pairs
        .iter()
        .map(|p| {
            Ok(EncodedPair {
                context: vocab.encode_context(&p.context, max_context_words)?,
                candidate: vocab.encode(&p.candidate, false),
                label: p.label,
            })
        })
        .collect()
}

/// Binary cross-entropy training on coherence pairs; the result is frozen.
pub fn pretrain_coherence_classifier(
    pairs: &[CoherencePair],
    vocab: &Vocabulary,
    config: CoherenceClassifierConfig,
    pretrain: &PretrainConfig,
    seed: u64,
) -> Result<(CoherenceClassifier, PretrainReport)> {
    for label in [false, true] {
        if !pairs.iter().any(|p| p.label == label) {
            return Err(CastError::InvalidData(format!("coherence data has no pairs labelled {}", u8::from(label))));
        }
    }
    let examples = encode_pairs(pairs, vocab, config.max_context_words)?;
    let mut clf = CoherenceClassifier::new(config, vocab.len(), seed)?;
    let report = fit(&mut clf, &examples, pretrain, seed.wrapping_add(1))?;
    clf.freeze();
    Ok((clf, report))
}
