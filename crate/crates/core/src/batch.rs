//! Samples in token ids, ready for the model and the losses.

use crate::corpus::{NonParallelSample, ParallelSample, StyleLabel};
use crate::error::Result;
use crate::vocab::{EncodedContext, Vocabulary};

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedParallel {
    pub source: Vec<usize>,
    /// Reference framed as `[BOS, y.., EOS]`.
    pub target: Vec<usize>,
    pub context: EncodedContext,
    pub source_style: StyleLabel,
    pub target_style: StyleLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedNonParallel {
    pub sentence: Vec<usize>,
    /// `sentence` framed as `[BOS, x.., EOS]`.
    pub target: Vec<usize>,
    pub style: StyleLabel,
}

pub fn encode_parallel(samples: &[ParallelSample], vocab: &Vocabulary, max_context_words: usize) -> Result<Vec<EncodedParallel>> {
    samples
        .iter()
        .map(|s| {
            Ok(EncodedParallel {
                source: vocab.encode(&s.source, false),
                target: vocab.encode(&s.reference, true),
                context: vocab.encode_context(&s.context, max_context_words)?,
                source_style: s.source_style,
                target_style: s.target_style,
            })
        })
        .collect()
}

pub fn encode_nonparallel(samples: &[NonParallelSample], vocab: &Vocabulary) -> Vec<EncodedNonParallel> {
    samples
        .iter()
        .map(|s| EncodedNonParallel { sentence: vocab.encode(&s.sentence, false), target: vocab.encode(&s.sentence, true), style: s.style })
        .collect()
}
