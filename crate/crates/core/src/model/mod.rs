//! The dual-encoder transfer network: sentence encoder, context encoder,
//! linear fusion, and a style-conditioned decoder with differentiable
//! generation.

pub mod layers;

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::corpus::StyleLabel;
use crate::error::{CastError, Result};
use crate::vocab::{BOS, EOS};
use autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use layers::{positional_encoding, Decoder, Encoder, Init, KeyValues, Linear, StepCache};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub max_context_words: usize,
    pub max_sentence_len: usize,
    pub num_styles: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { num_layers: 1, num_heads: 4, head_dim: 64, ffn_dim: 1024, max_context_words: 50, max_sentence_len: 32, num_styles: 2 }
    }
}

impl ModelConfig {
    /// Width 8, for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig { num_layers: 1, num_heads: 2, head_dim: 4, ffn_dim: 16, max_context_words: 50, max_sentence_len: 32, num_styles: 2 }
    }

    pub fn width(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
            ("max_context_words", self.max_context_words),
            ("max_sentence_len", self.max_sentence_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(CastError::Config(format!("model.{name} must be at least 1")));
            }
        }
        if self.num_styles != StyleLabel::ALL.len() {
            return Err(CastError::Config(format!("model.num_styles must be {}", StyleLabel::ALL.len())));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenMode {
    Greedy,
    HardSample,
    Soft,
}

#[derive(Clone, Copy, Debug)]
pub struct GenerateOptions {
    pub mode: GenMode,
    pub max_len: usize,
    pub temperature: f64,
}

impl GenerateOptions {
    pub fn greedy(max_len: usize) -> Self {
        GenerateOptions { mode: GenMode::Greedy, max_len, temperature: 1.0 }
    }
}

/// Output of [`CastModel::generate`]. Row `i` of `token_weights` is the
/// vocabulary distribution standing in for token `i`: one-hot in the forward
/// pass for greedy and sampled decoding (with the softmax as the backward
/// surrogate), the softmax itself in soft mode. `features` is that row times
/// the decoder's embedding table.
#[derive(Clone, Debug)]
pub struct GeneratedSequence {
    pub token_ids: Vec<usize>,
    pub token_weights: Var,
    pub features: Var,
    pub step_log_probs: Vec<f64>,
}

impl GeneratedSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn ended_with_eos(&self) -> bool {
        self.token_ids.last() == Some(&EOS)
    }

    /// Number of leading rows that are sentence content: a trailing EOS is
    /// dropped unless it is the only token.
    pub fn content_len(&self) -> usize {
        if self.ended_with_eos() && self.len() > 1 {
            self.len() - 1
        } else {
            self.len()
        }
    }

    /// Token ids without the trailing EOS.
    pub fn content_ids(&self) -> &[usize] {
        let n = if self.ended_with_eos() { self.len() - 1 } else { self.len() };
        &self.token_ids[..n]
    }

    /// The rows of `token_weights` covering [`content_len`](Self::content_len).
    pub fn content_weights(&self, g: &mut Graph<'_>) -> Var {
        if self.content_len() == self.len() {
            self.token_weights
        } else {
            g.slice_rows(self.token_weights, 0, self.content_len())
        }
    }
}

/// Either token ids or per-position vocabulary distributions.
#[derive(Clone, Copy, Debug)]
pub enum TokenInput<'t> {
    Ids(&'t [usize]),
    Weights(Var),
}

#[derive(Clone, Debug)]
struct Layout {
    embed: ParamId,
    style: ParamId,
    null_context: ParamId,
    sentence_encoder: Encoder,
    context_encoder: Encoder,
    fusion: Linear,
    decoder: Decoder,
    output: Linear,
}

#[derive(Clone, Debug)]
pub struct CastModel {
    config: ModelConfig,
    vocab_size: usize,
    params: ParamStore,
    layout: Layout,
    positions: Tensor,
}

impl CastModel {
    pub fn new(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size <= crate::vocab::NUM_SPECIALS {
            return Err(CastError::Config(format!("vocabulary of {vocab_size} tokens has no words")));
        }
        let mut params = ParamStore::new();
        let d = config.width();
        let mut init = Init { store: &mut params, rng: ChaCha8Rng::seed_from_u64(seed) };
        let emb_bound = 3f64.sqrt();
        let layout = Layout {
            embed: init.uniform("embed", vocab_size, d, emb_bound),
            style: init.uniform("style", config.num_styles, d, emb_bound),
            null_context: init.uniform("null_context", 1, d, emb_bound),
            sentence_encoder: Encoder::new(&mut init, "sent_enc", config.num_layers, config.num_heads, config.head_dim, config.ffn_dim),
            context_encoder: Encoder::new(&mut init, "ctx_enc", config.num_layers, config.num_heads, config.head_dim, config.ffn_dim),
            fusion: Linear::new(&mut init, "fusion", d, d),
            decoder: Decoder::new(&mut init, "dec", config.num_layers, config.num_heads, config.head_dim, config.ffn_dim),
            output: Linear::new(&mut init, "out", d, vocab_size),
        };
        let longest = config.max_context_words.max(config.max_sentence_len + 2);
        let positions = positional_encoding(longest, d);
        Ok(CastModel { config, vocab_size, params, layout, positions })
    }

    /// Rebuilds a model from named parameters (see [`crate::checkpoint`]).
    pub fn from_params(config: ModelConfig, vocab_size: usize, named: &ParamStore) -> Result<Self> {
        let mut m = CastModel::new(config, vocab_size, 0)?;
        crate::checkpoint::copy_named(&mut m.params, named)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path, provenance: serde_json::Value) -> Result<()> {
        let config = serde_json::json!({ "model": self.config, "vocab_size": self.vocab_size });
        Checkpoint::new(CheckpointKind::CastModel, &config, provenance, &self.params).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path, CheckpointKind::CastModel)?;
        let bad = |m: String| CastError::Checkpoint { path: path.to_path_buf(), message: m };
        let config: ModelConfig = serde_json::from_value(ck.config["model"].clone()).map_err(|e| bad(e.to_string()))?;
        let vocab_size = ck.config["vocab_size"].as_u64().ok_or_else(|| bad("missing vocab_size".into()))? as usize;
        CastModel::from_params(config, vocab_size, &ck.param_store()?)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn width(&self) -> usize {
        self.config.width()
    }

    pub fn embedding(&self) -> &Tensor {
        self.params.get(self.layout.embed)
    }

    pub fn null_context_vector(&self) -> &Tensor {
        self.params.get(self.layout.null_context)
    }

    /// Ids of the context encoder's parameters.
    pub fn context_encoder_params(&self) -> Vec<ParamId> {
        self.params.ids().filter(|&id| self.params.name(id).starts_with("ctx_enc.")).collect()
    }

    /// Sets the output projection to zero so every step predicts the uniform
    /// distribution.
    pub fn zero_output_head(&mut self) {
        for id in [self.layout.output.weight, self.layout.output.bias] {
            let t = self.params.get_mut(id);
            *t = Tensor::zeros(t.rows(), t.cols());
        }
    }

    pub fn zero_fusion(&mut self) {
        for id in [self.layout.fusion.weight, self.layout.fusion.bias] {
            let t = self.params.get_mut(id);
            *t = Tensor::zeros(t.rows(), t.cols());
        }
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.vocab_size) {
            Some(&id) => Err(CastError::IdOutOfRange { id, size: self.vocab_size }),
            None => Ok(()),
        }
    }

    fn position_rows<'a>(&self, g: &mut Graph<'a>, start: usize, len: usize) -> Var {
        let d = self.width();
        let t = Tensor::from_vec(len, d, self.positions.data()[start * d..(start + len) * d].to_vec());
        g.constant(t)
    }

    /// Token embeddings plus positions, for ids or distributions.
    fn embed_input<'a>(&'a self, g: &mut Graph<'a>, input: TokenInput<'_>) -> Result<Var> {
        let table = g.param(&self.params, self.layout.embed);
        let tokens = match input {
            TokenInput::Ids(ids) => {
                self.check_ids(ids)?;
                g.gather(table, ids)
            }
            TokenInput::Weights(w) => {
                if g.shape(w).1 != self.vocab_size {
                    return Err(CastError::Shape(format!(
                        "token weights have {} columns, vocabulary has {}",
                        g.shape(w).1,
                        self.vocab_size
                    )));
                }
                g.matmul(w, table)
            }
        };
        let n = g.shape(tokens).0;
        let pos = self.position_rows(g, 0, n);
        Ok(g.add(tokens, pos))
    }

    fn input_len(g: &Graph<'_>, input: TokenInput<'_>) -> usize {
        match input {
            TokenInput::Ids(ids) => ids.len(),
            TokenInput::Weights(w) => g.shape(w).0,
        }
    }

    /// Sentence encoder over ids or distributions; one row per position.
    pub fn encode_sentence<'a>(&'a self, g: &mut Graph<'a>, x: TokenInput<'_>) -> Result<Var> {
        let n = Self::input_len(g, x);
        if n == 0 {
            return Err(CastError::InvalidData("cannot encode an empty sentence".into()));
        }
        if n > self.config.max_sentence_len {
            return Err(CastError::InvalidData(format!(
                "sentence of {n} tokens exceeds max_sentence_len {}",
                self.config.max_sentence_len
            )));
        }
        let h = self.embed_input(g, x)?;
        Ok(self.layout.sentence_encoder.forward(g, &self.params, h))
    }

    /// Context encoder over a flattened context; an empty context yields the
    /// single learned null-context row.
    pub fn encode_context<'a>(&'a self, g: &mut Graph<'a>, c: &[usize]) -> Result<Var> {
        if c.is_empty() {
            return Ok(self.null_context(g));
        }
        if c.len() > self.config.max_context_words {
            return Err(CastError::InvalidData(format!(
                "context of {} tokens exceeds max_context_words {}",
                c.len(),
                self.config.max_context_words
            )));
        }
        let h = self.embed_input(g, TokenInput::Ids(c))?;
        Ok(self.layout.context_encoder.forward(g, &self.params, h))
    }

    pub fn null_context<'a>(&'a self, g: &mut Graph<'a>) -> Var {
        g.param(&self.params, self.layout.null_context)
    }

    /// Position-wise linear map over the rows of `[sent; ctx]`.
    pub fn fuse<'a>(&'a self, g: &mut Graph<'a>, sent: Var, ctx: Var) -> Result<Var> {
        let d = self.width();
        if g.shape(sent).1 != d || g.shape(ctx).1 != d {
            return Err(CastError::Shape(format!("fuse expects width {d}, got {} and {}", g.shape(sent).1, g.shape(ctx).1)));
        }
        let joined = g.concat_rows(&[sent, ctx]);
        Ok(self.layout.fusion.forward(g, &self.params, joined))
    }

    /// Decoder memory for `x` with context `c`; `None` takes the null-context path.
    pub fn memory<'a>(&'a self, g: &mut Graph<'a>, x: TokenInput<'_>, c: Option<&[usize]>) -> Result<Var> {
        let sent = self.encode_sentence(g, x)?;
        let ctx = match c {
            Some(c) => self.encode_context(g, c)?,
            None => self.null_context(g),
        };
        self.fuse(g, sent, ctx)
    }

    fn style_row<'a>(&'a self, g: &mut Graph<'a>, style: StyleLabel) -> Var {
        let table = g.param(&self.params, self.layout.style);
        g.gather(table, &[style.index()])
    }

    /// Memory with its pooled summary plus the style embedding appended,
    /// projected to per-layer keys and values.
    fn decoder_memory<'a>(&'a self, g: &mut Graph<'a>, memory: Var, style_row: Var) -> Vec<KeyValues> {
        let pooled = g.mean_rows(memory);
        let summary = g.add(pooled, style_row);
        let mem = g.concat_rows(&[memory, summary]);
        self.layout.decoder.layers.iter().map(|l| l.memory_kv(g, &self.params, mem)).collect()
    }

    fn output_logits<'a>(&'a self, g: &mut Graph<'a>, h: Var) -> Var {
        let n = self.layout.decoder.norm.forward(g, &self.params, h);
        self.layout.output.forward(g, &self.params, n)
    }

    /// Teacher-forced `log p(target[1..] | memory, style)` for a target framed
    /// as `[BOS, y.., EOS]`.
    pub fn sequence_log_prob<'a>(&'a self, g: &mut Graph<'a>, memory: Var, style: StyleLabel, target: &[usize]) -> Result<Var> {
        if target.len() < 2 || target[0] != BOS {
            return Err(CastError::InvalidData("target must be framed as [BOS, .., EOS]".into()));
        }
        if target.len() > self.config.max_sentence_len + 2 {
            return Err(CastError::InvalidData(format!(
                "target of {} tokens exceeds max_sentence_len {}",
                target.len() - 2,
                self.config.max_sentence_len
            )));
        }
        self.check_ids(target)?;
        let steps = target.len() - 1;
        let style_row = self.style_row(g, style);
        let mem = self.decoder_memory(g, memory, style_row);
        let table = g.param(&self.params, self.layout.embed);
        let tokens = g.gather(table, &target[..steps]);
        let inputs = g.concat_rows(&[style_row, tokens]);
        let pos = self.position_rows(g, 0, steps + 1);
        let x = g.add(inputs, pos);
        let mask = g.constant(layers::causal_mask(steps + 1));
        let h = self.layout.decoder.forward(g, &self.params, x, &mem, mask);
        let h = g.slice_rows(h, 1, steps);
        let logits = self.output_logits(g, h);
        let logp = g.log_softmax(logits);
        let gold: Vec<(usize, usize)> = (0..steps).map(|r| (r, target[r + 1])).collect();
        let picked = g.pick(logp, &gold);
        Ok(g.sum(picked))
    }

    /// Autoregressive decoding from `memory` until EOS or `max_len` tokens.
    pub fn generate<'a>(
        &'a self,
        g: &mut Graph<'a>,
        memory: Var,
        style: StyleLabel,
        opts: &GenerateOptions,
        rng: &mut ChaCha8Rng,
    ) -> Result<GeneratedSequence> {
        if opts.max_len == 0 {
            return Err(CastError::Config("max_len must be at least 1".into()));
        }
        if opts.max_len > self.config.max_sentence_len + 1 {
            return Err(CastError::Config(format!(
                "max_len {} exceeds max_sentence_len + 1 = {}",
                opts.max_len,
                self.config.max_sentence_len + 1
            )));
        }
        if !(opts.temperature > 0.0 && opts.temperature.is_finite()) {
            return Err(CastError::Config("temperature must be positive".into()));
        }
        let style_row = self.style_row(g, style);
        let mem = self.decoder_memory(g, memory, style_row);
        let table = g.param(&self.params, self.layout.embed);
        let mut caches = vec![StepCache { kv: None }; mem.len()];

        let pos = self.position_rows(g, 0, 1);
        let first = g.add(style_row, pos);
        self.layout.decoder.step(g, &self.params, first, &mem, &mut caches);
        let bos = g.gather(table, &[BOS]);
        let pos = self.position_rows(g, 1, 1);
        let x = g.add(bos, pos);
        let mut h = self.layout.decoder.step(g, &self.params, x, &mem, &mut caches);

        let mut token_ids = Vec::new();
        let mut rows = Vec::new();
        let mut step_log_probs = Vec::new();
        let inv_t = 1.0 / opts.temperature;
        loop {
            let logits = self.output_logits(g, h);
            let scaled = if inv_t == 1.0 { logits } else { g.scale(logits, inv_t) };
            let probs = g.softmax(scaled);
            let p = g.value(probs);
            let token = match opts.mode {
                GenMode::Greedy => g.value(logits).argmax_row(0),
                GenMode::HardSample => sample(p.row(0), rng),
                GenMode::Soft => p.argmax_row(0),
            };
            step_log_probs.push(p.get(0, token).ln());
            let weights = match opts.mode {
                GenMode::Soft => probs,
                _ => g.straight_through(Tensor::one_hot(&[token], self.vocab_size), probs),
            };
            token_ids.push(token);
            rows.push(weights);
            if token == EOS || token_ids.len() == opts.max_len {
                break;
            }
            let emb = g.matmul(weights, table);
            let pos = self.position_rows(g, token_ids.len() + 1, 1);
            let x = g.add(emb, pos);
            h = self.layout.decoder.step(g, &self.params, x, &mem, &mut caches);
        }
        let token_weights = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows) };
        let features = g.matmul(token_weights, table);
        Ok(GeneratedSequence { token_ids, token_weights, features, step_log_probs })
    }

    /// Encode, fuse and decode in one call. `c = None` uses the null context.
    pub fn transfer<'a>(
        &'a self,
        g: &mut Graph<'a>,
        x: &[usize],
        c: Option<&[usize]>,
        style: StyleLabel,
        opts: &GenerateOptions,
        rng: &mut ChaCha8Rng,
    ) -> Result<GeneratedSequence> {
        let memory = self.memory(g, TokenInput::Ids(x), c)?;
        self.generate(g, memory, style, opts, rng)
    }
}

fn sample(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // rounding left `u` above the total mass
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(p.len() - 1)
}

#[cfg(test)]
mod tests;
