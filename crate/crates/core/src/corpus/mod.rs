//! Data model: sentences with paragraph context, style labels, and the
//! coherence pairs used to pre-train the context classifier.

mod coherence;
mod io;
pub mod synthetic;

pub use coherence::make_coherence_pairs;
pub use io::{load_dataset, load_nonparallel, load_paragraphs, load_parallel, write_jsonl, Dataset, DatasetKind};
pub use synthetic::{generate_synthetic_benchmark, Oracle, SplitSizes, SyntheticBenchmark, SyntheticConfig};

use crate::error::{CastError, Result};
use serde::{Deserialize, Serialize};
use std::fmt;

pub type Sentence = Vec<String>;

/// One of the two styles of a transfer task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StyleLabel {
    A,
    B,
}

impl StyleLabel {
    pub const ALL: [StyleLabel; 2] = [StyleLabel::A, StyleLabel::B];

    pub fn index(self) -> usize {
        match self {
            StyleLabel::A => 0,
            StyleLabel::B => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(StyleLabel::A),
            1 => Some(StyleLabel::B),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            StyleLabel::A => StyleLabel::B,
            StyleLabel::B => StyleLabel::A,
        }
    }
}

/// Task-specific display names for the two styles, e.g. informal/formal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleNames {
    pub a: String,
    pub b: String,
}

impl Default for StyleNames {
    fn default() -> Self {
        StyleNames { a: "informal".into(), b: "formal".into() }
    }
}

impl StyleNames {
    pub fn name(&self, s: StyleLabel) -> &str {
        match s {
            StyleLabel::A => &self.a,
            StyleLabel::B => &self.b,
        }
    }

    /// Accepts either display name, or the canonical `A` / `B`.
    pub fn parse(&self, s: &str) -> Option<StyleLabel> {
        if s == self.a || s.eq_ignore_ascii_case("a") {
            Some(StyleLabel::A)
        } else if s == self.b || s.eq_ignore_ascii_case("b") {
            Some(StyleLabel::B)
        } else {
            None
        }
    }
}

/// A paragraph with one sentence removed: the sentences before and after the hole.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Context {
    pub before: Vec<Sentence>,
    pub after: Vec<Sentence>,
}

impl fmt::Display for Context {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let render = |ss: &[Sentence]| ss.iter().map(|s| s.join(" ")).collect::<Vec<_>>().join(" | ");
        write!(f, "{} [_] {}", render(&self.before), render(&self.after))
    }
}

impl Context {
    pub fn is_empty(&self) -> bool {
        self.num_words() == 0
    }

    /// Position of the hole among the paragraph's sentences.
    pub fn hole_index(&self) -> usize {
        self.before.len()
    }

    pub fn num_words(&self) -> usize {
        self.before.iter().chain(&self.after).map(Vec::len).sum()
    }

    /// All context tokens in paragraph order, skipping the hole.
    pub fn flatten(&self) -> Vec<String> {
        self.before.iter().chain(&self.after).flatten().cloned().collect()
    }

    /// Rebuilds the full paragraph with `sentence` inserted at the hole.
    pub fn insert(&self, sentence: &[String]) -> Paragraph {
        let mut sentences = self.before.clone();
        sentences.push(sentence.to_vec());
        sentences.extend(self.after.iter().cloned());
        Paragraph { sentences, target_index: self.before.len() }
    }
}

/// Ordered sentences with a marked sentence of interest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Paragraph {
    pub sentences: Vec<Sentence>,
    pub target_index: usize,
}

impl Paragraph {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.sentences.len() < 2 {
            return Err("paragraph needs at least two sentences".into());
        }
        if self.target_index >= self.sentences.len() {
            return Err(format!("target_index {} out of range for {} sentences", self.target_index, self.sentences.len()));
        }
        if let Some(i) = self.sentences.iter().position(Vec::is_empty) {
            return Err(format!("sentence {i} is empty"));
        }
        Ok(())
    }

    pub fn target(&self) -> &Sentence {
        &self.sentences[self.target_index]
    }

    /// The context around the target sentence.
    pub fn context(&self) -> Context {
        Context { before: self.sentences[..self.target_index].to_vec(), after: self.sentences[self.target_index + 1..].to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelSample {
    pub source: Sentence,
    pub reference: Sentence,
    pub context: Context,
    pub source_style: StyleLabel,
    pub target_style: StyleLabel,
}

impl ParallelSample {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.source_style == self.target_style {
            return Err("source_style equals target_style".into());
        }
        if self.source.is_empty() {
            return Err("source is empty".into());
        }
        if self.reference.is_empty() {
            return Err("reference is empty".into());
        }
        if self.context.is_empty() {
            return Err("context is empty".into());
        }
        if self.context.before.iter().chain(&self.context.after).any(Vec::is_empty) {
            return Err("context contains an empty sentence".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NonParallelSample {
    pub sentence: Sentence,
    pub style: StyleLabel,
}

impl NonParallelSample {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.sentence.is_empty() {
            return Err("sentence is empty".into());
        }
        Ok(())
    }
}

/// A candidate sentence placed in a context hole; `label` is true iff the
/// candidate is the sentence that was originally there.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoherencePair {
    pub context: Context,
    pub candidate: Sentence,
    pub label: bool,
}

/// How many tokens to keep on each side of the hole: nearest first,
/// alternating before/after while both sides have tokens left.
pub(crate) fn context_budget(before_len: usize, after_len: usize, max_words: usize) -> (usize, usize) {
    let (mut keep_before, mut keep_after) = (0, 0);
    let mut take_before = true;
    while keep_before + keep_after < max_words.min(before_len + after_len) {
        let can_before = keep_before < before_len;
        let can_after = keep_after < after_len;
        if take_before && can_before || !can_after {
            keep_before += 1;
        } else {
            keep_after += 1;
        }
        take_before = !take_before;
    }
    (keep_before, keep_after)
}

/// Keeps at most `max_words` context tokens, taking them nearest the hole
/// first and alternating before/after. Sentence order and token order are kept.
pub fn truncate_context(context: &Context, max_words: usize) -> Result<Context> {
    if max_words == 0 {
        return Err(CastError::Config("max_words must be at least 1".into()));
    }
    let before_len: usize = context.before.iter().map(Vec::len).sum();
    let after_len: usize = context.after.iter().map(Vec::len).sum();
    if before_len + after_len <= max_words {
        return Ok(context.clone());
    }
    let (keep_before, keep_after) = context_budget(before_len, after_len, max_words);

    // Keep a suffix of the before-tokens and a prefix of the after-tokens.
    let mut before = Vec::new();
    let mut skip = before_len - keep_before;
    for s in &context.before {
        if skip >= s.len() {
            skip -= s.len();
            continue;
        }
        before.push(s[skip..].to_vec());
        skip = 0;
    }
    let mut after = Vec::new();
    let mut remaining = keep_after;
    for s in &context.after {
        if remaining == 0 {
            break;
        }
        let take = remaining.min(s.len());
        after.push(s[..take].to_vec());
        remaining -= take;
    }
    Ok(Context { before, after })
}
