//! Training objectives. Each loss builds its value on a caller-owned graph
//! whose trainable store is the model's, so the frozen classifiers enter the
//! graph as constants and never receive gradient.

use crate::batch::{EncodedNonParallel, EncodedParallel};
use crate::classifiers::{CoherenceClassifier, StyleClassifier};
use crate::corpus::StyleLabel;
use crate::error::{CastError, Result};
use crate::model::{CastModel, GenMode, GenerateOptions, GeneratedSequence, TokenInput};
use autograd::{Graph, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Weights of the auxiliary terms; the contextual seq2seq term has weight 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// λ₁, coherence.
    pub cohere: f64,
    /// λ₂, reconstruction.
    pub recon: f64,
    /// λ₃, back-translation.
    pub btrans: f64,
    /// λ₄, style.
    pub style: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { cohere: 1.0, recon: 1.0, btrans: 1.0, style: 1.0 }
    }
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights { cohere: 0.0, recon: 0.0, btrans: 0.0, style: 0.0 };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("cohere", self.cohere), ("recon", self.recon), ("btrans", self.btrans), ("style", self.style)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CastError::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Whether any term reads the non-parallel batch.
    pub fn uses_nonparallel(&self) -> bool {
        self.recon > 0.0 || self.btrans > 0.0 || self.style > 0.0
    }
}

/// Component values of one evaluation of the combined objective. Terms with
/// zero weight are not computed and read 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub c_s2s: f64,
    pub cohere: f64,
    pub recon: f64,
    pub btrans: f64,
    pub style: f64,
    #[serde(rename = "final")]
    pub total: f64,
}

impl LossBreakdown {
    /// `c_s2s + λ₁ cohere + λ₂ recon + λ₃ btrans + λ₄ style`.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        self.c_s2s + w.cohere * self.cohere + w.recon * self.recon + w.btrans * self.btrans + w.style * self.style
    }
}

/// How the first hop of back-translation picks its tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstHop {
    Sample,
    Greedy,
}

/// Decoding used inside the losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    /// Mode for the sequences scored by the classifiers.
    pub mode: GenMode,
    pub temperature: f64,
    /// Token cap per generated sentence, EOS included.
    pub max_len: usize,
    pub back_translation: FirstHop,
    /// Route gradient through the first back-translation hop; otherwise its
    /// output is treated as a constant.
    pub straight_through: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            mode: GenMode::HardSample,
            temperature: 1.0,
            max_len: 16,
            back_translation: FirstHop::Sample,
            straight_through: true,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self, model: &CastModel) -> Result<()> {
        if self.max_len == 0 || self.max_len > model.config().max_sentence_len {
            return Err(CastError::Config(format!(
                "generation.max_len must be in 1..={}, got {}",
                model.config().max_sentence_len,
                self.max_len
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(CastError::Config("generation.temperature must be positive".into()));
        }
        Ok(())
    }

    fn options(&self) -> GenerateOptions {
        GenerateOptions { mode: self.mode, max_len: self.max_len, temperature: self.temperature }
    }

    fn first_hop_options(&self) -> GenerateOptions {
        let mode = match self.back_translation {
            FirstHop::Sample => GenMode::HardSample,
            FirstHop::Greedy => GenMode::Greedy,
        };
        GenerateOptions { mode, ..self.options() }
    }
}

/// The frozen classifiers.
#[derive(Clone, Copy, Debug)]
pub struct Regularizers<'c> {
    pub style: &'c StyleClassifier,
    pub coherence: &'c CoherenceClassifier,
}

impl Regularizers<'_> {
    pub fn check_frozen(&self) -> Result<()> {
        if !self.style.is_frozen() {
            return Err(CastError::NotFrozen("style classifier"));
        }
        if !self.coherence.is_frozen() {
            return Err(CastError::NotFrozen("coherence classifier"));
        }
        Ok(())
    }
}

/// Everything besides the data that shapes one evaluation of the objective.
#[derive(Clone, Debug, PartialEq)]
pub struct LossSettings {
    pub weights: LossWeights,
    pub generation: GenerationConfig,
    pub use_context_encoder: bool,
}

fn mean(g: &mut Graph<'_>, terms: Vec<Var>) -> Var {
    let n = terms.len() as f64;
    let stacked = if terms.len() == 1 { terms[0] } else { g.concat_rows(&terms) };
    let total = g.sum(stacked);
    g.scale(total, 1.0 / n)
}

fn non_empty<T>(batch: &[T], what: &str) -> Result<()> {
    if batch.is_empty() {
        return Err(CastError::InvalidData(format!("empty {what} batch")));
    }
    Ok(())
}

fn context_of(ex: &EncodedParallel, use_context: bool) -> Option<Vec<usize>> {
    use_context.then(|| ex.context.flat())
}

/// Mean negative log-likelihood of the references with the source alone as memory.
pub fn s2s_loss<'a>(g: &mut Graph<'a>, m: &'a CastModel, batch: &[EncodedParallel]) -> Result<Var> {
    contextual_s2s_loss(g, m, batch, false)
}

/// Mean negative log-likelihood of the references given source and context.
/// Without the context encoder this is [`s2s_loss`].
pub fn contextual_s2s_loss<'a>(g: &mut Graph<'a>, m: &'a CastModel, batch: &[EncodedParallel], use_context: bool) -> Result<Var> {
    non_empty(batch, "parallel")?;
    let mut terms = Vec::with_capacity(batch.len());
    for ex in batch {
        let c = context_of(ex, use_context);
        let mem = m.memory(g, TokenInput::Ids(&ex.source), c.as_deref())?;
        let lp = m.sequence_log_prob(g, mem, ex.target_style, &ex.target)?;
        terms.push(g.scale(lp, -1.0));
    }
    Ok(mean(g, terms))
}

fn coherence_term<'a>(g: &mut Graph<'a>, clf: &'a CoherenceClassifier, ex: &EncodedParallel, y: &GeneratedSequence) -> Result<Var> {
    let ctx = ex.context.truncated(clf.config().max_context_words);
    let w = y.content_weights(g);
    let lp = clf.coherence_log_prob(g, &ctx, TokenInput::Weights(w))?;
    Ok(g.scale(lp, -1.0))
}

/// Mean `-log p(coherent | context, transfer(x, c))`, the transfer decoded
/// with continuous features.
pub fn coherence_loss<'a>(
    g: &mut Graph<'a>,
    m: &'a CastModel,
    clf: &'a CoherenceClassifier,
    batch: &[EncodedParallel],
    gen: &GenerationConfig,
    use_context: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if !clf.is_frozen() {
        return Err(CastError::NotFrozen("coherence classifier"));
    }
    non_empty(batch, "parallel")?;
    gen.validate(m)?;
    let mut terms = Vec::with_capacity(batch.len());
    for ex in batch {
        let c = context_of(ex, use_context);
        let y = m.transfer(g, &ex.source, c.as_deref(), ex.target_style, &gen.options(), rng)?;
        terms.push(coherence_term(g, clf, ex, &y)?);
    }
    Ok(mean(g, terms))
}

/// Mean negative log-likelihood of each sentence rebuilt from itself, in its
/// own style, with the null context.
pub fn reconstruction_loss<'a>(g: &mut Graph<'a>, m: &'a CastModel, batch: &[EncodedNonParallel]) -> Result<Var> {
    non_empty(batch, "non-parallel")?;
    let mut terms = Vec::with_capacity(batch.len());
    for ex in batch {
        let mem = m.memory(g, TokenInput::Ids(&ex.sentence), None)?;
        let lp = m.sequence_log_prob(g, mem, ex.style, &ex.target)?;
        terms.push(g.scale(lp, -1.0));
    }
    Ok(mean(g, terms))
}

/// `-log p(x | E_s(x̃), l)` for a given first hop `x̃`.
pub(crate) fn back_translation_term<'a>(
    g: &mut Graph<'a>,
    m: &'a CastModel,
    ex: &EncodedNonParallel,
    first: &GeneratedSequence,
    straight_through: bool,
) -> Result<Var> {
    let input = if straight_through {
        first.content_weights(g)
    } else {
        let ids = &first.token_ids[..first.content_len()];
        g.constant(Tensor::one_hot(ids, m.vocab_size()))
    };
    let mem = m.memory(g, TokenInput::Weights(input), None)?;
    let lp = m.sequence_log_prob(g, mem, ex.style, &ex.target)?;
    Ok(g.scale(lp, -1.0))
}

fn first_hop<'a>(
    g: &mut Graph<'a>,
    m: &'a CastModel,
    ex: &EncodedNonParallel,
    style: StyleLabel,
    opts: &GenerateOptions,
    rng: &mut ChaCha8Rng,
) -> Result<GeneratedSequence> {
    m.transfer(g, &ex.sentence, None, style, opts, rng)
}

/// Mean `-log p(x | E_s(x̃), l)` with `x̃` decoded from `x` in the other style.
pub fn back_translation_loss<'a>(
    g: &mut Graph<'a>,
    m: &'a CastModel,
    batch: &[EncodedNonParallel],
    gen: &GenerationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    non_empty(batch, "non-parallel")?;
    gen.validate(m)?;
    let mut terms = Vec::with_capacity(batch.len());
    for ex in batch {
        let x_t = first_hop(g, m, ex, ex.style.other(), &gen.first_hop_options(), rng)?;
        terms.push(back_translation_term(g, m, ex, &x_t, gen.straight_through)?);
    }
    Ok(mean(g, terms))
}

fn style_term<'a>(g: &mut Graph<'a>, clf: &'a StyleClassifier, y: &GeneratedSequence, label: StyleLabel) -> Result<Var> {
    let w = y.content_weights(g);
    let lp = clf.log_prob(g, TokenInput::Weights(w), label)?;
    Ok(g.scale(lp, -1.0))
}

/// Mean of `-log p_C(l | x̂) - log p_C(l̃ | x̃)` over the batch, where `x̂` is
/// decoded in the input style and `x̃` in the other one.
pub fn style_loss<'a>(
    g: &mut Graph<'a>,
    m: &'a CastModel,
    clf: &'a StyleClassifier,
    batch: &[EncodedNonParallel],
    gen: &GenerationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if !clf.is_frozen() {
        return Err(CastError::NotFrozen("style classifier"));
    }
    non_empty(batch, "non-parallel")?;
    gen.validate(m)?;
    let mut terms = Vec::with_capacity(batch.len());
    for ex in batch {
        let x_hat = first_hop(g, m, ex, ex.style, &gen.options(), rng)?;
        let x_tilde = first_hop(g, m, ex, ex.style.other(), &gen.options(), rng)?;
        let a = style_term(g, clf, &x_hat, ex.style)?;
        let b = style_term(g, clf, &x_tilde, ex.style.other())?;
        terms.push(g.add(a, b));
    }
    Ok(mean(g, terms))
}

/// The combined objective and its components. Terms with zero weight are
/// skipped, so they neither cost time nor receive gradient; the non-parallel
/// batch may be empty when all of its terms are off. When the classifier
/// mode equals the back-translation first-hop mode, the style term reuses
/// the first hop as its `x̃`.
pub fn final_loss<'a>(
    g: &mut Graph<'a>,
    m: &'a CastModel,
    regs: Regularizers<'a>,
    parallel: &[EncodedParallel],
    nonparallel: &[EncodedNonParallel],
    settings: &LossSettings,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, LossBreakdown)> {
    let w = settings.weights;
    w.validate()?;
    regs.check_frozen()?;
    let gen = &settings.generation;
    gen.validate(m)?;
    non_empty(parallel, "parallel")?;
    if w.uses_nonparallel() {
        non_empty(nonparallel, "non-parallel")?;
    }

    let mut out = LossBreakdown::default();
    let c_s2s = contextual_s2s_loss(g, m, parallel, settings.use_context_encoder)?;
    out.c_s2s = g.value(c_s2s).item();
    let mut parts = vec![c_s2s];
    let mut add = |g: &mut Graph<'a>, value: Var, weight: f64, slot: &mut f64| {
        *slot = g.value(value).item();
        parts.push(g.scale(value, weight));
    };

    if w.cohere > 0.0 {
        let v = coherence_loss(g, m, regs.coherence, parallel, gen, settings.use_context_encoder, rng)?;
        add(g, v, w.cohere, &mut out.cohere);
    }
    if w.recon > 0.0 {
        let v = reconstruction_loss(g, m, nonparallel)?;
        add(g, v, w.recon, &mut out.recon);
    }
    if w.btrans > 0.0 || w.style > 0.0 {
        let shared = w.btrans > 0.0 && gen.options().mode == gen.first_hop_options().mode;
        let (mut bt_terms, mut style_terms) = (Vec::new(), Vec::new());
        for ex in nonparallel {
            let x_t = if w.btrans > 0.0 {
                let x_t = first_hop(g, m, ex, ex.style.other(), &gen.first_hop_options(), rng)?;
                bt_terms.push(back_translation_term(g, m, ex, &x_t, gen.straight_through)?);
                Some(x_t)
            } else {
                None
            };
            if w.style > 0.0 {
                let x_hat = first_hop(g, m, ex, ex.style, &gen.options(), rng)?;
                let x_tilde = match x_t {
                    Some(x_t) if shared => x_t,
                    _ => first_hop(g, m, ex, ex.style.other(), &gen.options(), rng)?,
                };
                let a = style_term(g, regs.style, &x_hat, ex.style)?;
                let b = style_term(g, regs.style, &x_tilde, ex.style.other())?;
                style_terms.push(g.add(a, b));
            }
        }
        if w.btrans > 0.0 {
            let v = mean(g, bt_terms);
            add(g, v, w.btrans, &mut out.btrans);
        }
        if w.style > 0.0 {
            let v = mean(g, style_terms);
            add(g, v, w.style, &mut out.style);
        }
    }

    let total = if parts.len() == 1 {
        parts[0]
    } else {
        let stacked = g.concat_rows(&parts);
        g.sum(stacked)
    };
    out.total = g.value(total).item();
    Ok((total, out))
}
