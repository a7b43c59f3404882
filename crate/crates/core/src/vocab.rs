//! Word-level vocabulary with a frequency threshold.

use crate::corpus::{context_budget, truncate_context, Context};
use crate::error::{CastError, Result};
use std::collections::HashMap;
use std::fs;
use std::path::Path;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const NUM_SPECIALS: usize = 4;

const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Token ids of the context on either side of the hole.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EncodedContext {
    pub before: Vec<usize>,
    pub after: Vec<usize>,
}

impl EncodedContext {
    pub fn len(&self) -> usize {
        self.before.len() + self.after.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `before` then `after`.
    pub fn flat(&self) -> Vec<usize> {
        self.before.iter().chain(&self.after).copied().collect()
    }

    /// Keeps at most `max_words` tokens nearest the hole, by the same rule as
    /// [`truncate_context`].
    pub fn truncated(&self, max_words: usize) -> EncodedContext {
        let (kb, ka) = context_budget(self.before.len(), self.after.len(), max_words);
        EncodedContext { before: self.before[self.before.len() - kb..].to_vec(), after: self.after[..ka].to_vec() }
    }
}

/// Bijection between kept tokens and ids. Ids 0..4 are the specials.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_frequency: usize,
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_frequency` times, ordered by descending
    /// count and then lexicographically.
    pub fn build<'a, I, S>(corpora: I, min_frequency: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: IntoIterator<Item = &'a String>,
    {
        if min_frequency == 0 {
            return Err(CastError::Config("min_frequency must be at least 1".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut any = false;
        for sentence in corpora {
            for tok in sentence {
                any = true;
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        if !any {
            return Err(CastError::InvalidData("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|(t, c)| *c >= min_frequency && !SPECIAL_TOKENS.contains(t)).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(kept.into_iter().map(|(t, _)| t.to_string()));
        Ok(Self::from_tokens(tokens.collect(), min_frequency))
    }

    fn from_tokens(tokens: Vec<String>, min_frequency: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index, min_frequency }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of non-special tokens.
    pub fn num_words(&self) -> usize {
        self.tokens.len() - NUM_SPECIALS
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.get(token).is_some_and(|&i| i >= NUM_SPECIALS)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens.get(id).map(String::as_str).ok_or(CastError::IdOutOfRange { id, size: self.tokens.len() })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String], add_bos_eos: bool) -> Vec<usize> {
        let mut out = Vec::with_capacity(tokens.len() + 2);
        if add_bos_eos {
            out.push(BOS);
        }
        out.extend(tokens.iter().map(|t| self.id(t)));
        if add_bos_eos {
            out.push(EOS);
        }
        out
    }

    /// Truncates `context` to `max_words` tokens nearest the hole and encodes
    /// each side flattened.
    pub fn encode_context(&self, context: &Context, max_words: usize) -> Result<EncodedContext> {
        let kept = truncate_context(context, max_words)?;
        let side = |sents: &[Vec<String>]| sents.iter().flatten().map(|t| self.id(t)).collect();
        Ok(EncodedContext { before: side(&kept.before), after: side(&kept.after) })
    }

    /// Specials are rendered as their sentinel strings.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter().map(|&i| self.token(i).map(str::to_string)).collect()
    }

    /// Like [`decode`](Self::decode) but drops PAD, BOS and EOS.
    pub fn decode_display(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter().filter(|&&i| !matches!(i, PAD | BOS | EOS)).map(|&i| self.token(i).map(str::to_string)).collect()
    }

    /// One token per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| CastError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CastError::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < NUM_SPECIALS || tokens[..NUM_SPECIALS] != SPECIAL_TOKENS {
            return Err(CastError::Record {
                path: path.to_path_buf(),
                line: 1,
                message: "vocabulary must start with <pad> <unk> <bos> <eos>".into(),
            });
        }
        let mut seen = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || seen.insert(t.as_str(), i).is_some() {
                return Err(CastError::Record {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("empty or duplicate token {t:?}"),
                });
            }
        }
        Ok(Self::from_tokens(tokens, 1))
    }
}
