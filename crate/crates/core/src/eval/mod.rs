//! Automatic evaluation: style and coherence accuracy under the pre-trained
//! classifiers, BLEU and GLEU against references, and language-model perplexity.

mod lm;
mod metrics;

pub use lm::{train_language_model, LanguageModel, LanguageModelConfig};
pub use metrics::{bleu, gleu, BLEU_EPSILON, MAX_ORDER};

use crate::corpus::{ParallelSample, Sentence, StyleLabel};
use crate::error::{CastError, Result};
use crate::losses::Regularizers;
use crate::model::{CastModel, GenerateOptions};
use crate::vocab::Vocabulary;
use autograd::Graph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Percent of positions where `predicted` equals `expected`.
pub fn accuracy<L: PartialEq>(predicted: &[L], expected: &[L]) -> Result<f64> {
    if predicted.len() != expected.len() {
        return Err(CastError::InvalidData(format!("{} predictions but {} labels", predicted.len(), expected.len())));
    }
    if predicted.is_empty() {
        return Err(CastError::InvalidData("accuracy of an empty set".into()));
    }
    let hits = predicted.iter().zip(expected).filter(|(p, e)| p == e).count();
    Ok(100.0 * hits as f64 / predicted.len() as f64)
}

/// One scored output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub source: Sentence,
    pub hypothesis: Sentence,
    pub reference: Sentence,
    pub target_style: StyleLabel,
    /// `None` for an empty hypothesis.
    pub predicted_style: Option<StyleLabel>,
    pub coherent: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub examples: usize,
    /// Percent of outputs the style classifier assigns the target style.
    pub style_accuracy: f64,
    /// Percent of outputs the coherence classifier accepts in their context.
    pub coherence_accuracy: f64,
    pub bleu: f64,
    pub gleu: f64,
    /// Absent without a language model.
    pub perplexity: Option<f64>,
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    /// Header plus one fixed-width row per report.
    pub fn table(reports: &[EvalReport]) -> String {
        let mut out = format!("{:<24} {:>8} {:>10} {:>8} {:>8} {:>9}\n", "Model", "Acc.", "Coherence", "BLEU", "GLEU", "PPL");
        for r in reports {
            let ppl = r.perplexity.map_or_else(|| "-".to_string(), |p| format!("{p:.2}"));
            let _ = writeln!(
                out,
                "{:<24} {:>8.2} {:>10.2} {:>8.2} {:>8.2} {:>9}",
                r.model, r.style_accuracy, r.coherence_accuracy, r.bleu, r.gleu, ppl
            );
        }
        out
    }
}

/// Scores given outputs, one per test sample, in token strings.
pub fn score_outputs(
    name: &str,
    scorers: Regularizers<'_>,
    lm: Option<&LanguageModel>,
    test: &[ParallelSample],
    hypotheses: &[Sentence],
    vocab: &Vocabulary,
) -> Result<EvalReport> {
    if test.len() != hypotheses.len() {
        return Err(CastError::InvalidData(format!("{} outputs for {} test samples", hypotheses.len(), test.len())));
    }
    if test.is_empty() {
        return Err(CastError::InvalidData("empty test set".into()));
    }
    let cap = scorers.coherence.config().max_context_words;
    let mut records = Vec::with_capacity(test.len());
    let mut ids = Vec::with_capacity(test.len());
    for (s, h) in test.iter().zip(hypotheses) {
        let hyp = vocab.encode(h, false);
        let (predicted_style, coherent) = if hyp.is_empty() {
            (None, false)
        } else {
            let ctx = vocab.encode_context(&s.context, cap)?;
            (Some(scorers.style.predict(&hyp)?), scorers.coherence.predict(&ctx, &hyp)?)
        };
        records.push(EvalRecord {
            source: s.source.clone(),
            hypothesis: h.clone(),
            reference: s.reference.clone(),
            target_style: s.target_style,
            predicted_style,
            coherent,
        });
        ids.push(hyp);
    }
    let predicted: Vec<Option<StyleLabel>> = records.iter().map(|r| r.predicted_style).collect();
    let expected: Vec<Option<StyleLabel>> = records.iter().map(|r| Some(r.target_style)).collect();
    let coherent: Vec<bool> = records.iter().map(|r| r.coherent).collect();
    let sources: Vec<Sentence> = test.iter().map(|s| s.source.clone()).collect();
    let references: Vec<Sentence> = test.iter().map(|s| s.reference.clone()).collect();
    Ok(EvalReport {
        model: name.to_string(),
        examples: test.len(),
        style_accuracy: accuracy(&predicted, &expected)?,
        coherence_accuracy: accuracy(&coherent, &vec![true; coherent.len()])?,
        bleu: bleu(hypotheses, &references)?,
        gleu: gleu(&sources, hypotheses, &references)?,
        perplexity: lm.map(|lm| lm.perplexity(&ids)).transpose()?,
        records,
    })
}

/// Greedy transfer of every test source, `max_len` tokens at most.
pub fn transfer_all(
    m: &CastModel,
    test: &[ParallelSample],
    vocab: &Vocabulary,
    use_context: bool,
    max_len: usize,
) -> Result<Vec<Sentence>> {
    let opts = GenerateOptions::greedy(max_len);
    // greedy decoding never draws from the generator
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    test.iter()
        .map(|s| {
            let x = vocab.encode(&s.source, false);
            let c = if use_context { Some(vocab.encode_context(&s.context, m.config().max_context_words)?.flat()) } else { None };
            let mut g = Graph::inference();
            let y = m.transfer(&mut g, &x, c.as_deref(), s.target_style, &opts, &mut rng)?;
            vocab.decode_display(y.content_ids())
        })
        .collect()
}

/// Transfers the test set greedily and scores the outputs.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model(
    name: &str,
    m: &CastModel,
    scorers: Regularizers<'_>,
    lm: Option<&LanguageModel>,
    test: &[ParallelSample],
    vocab: &Vocabulary,
    use_context: bool,
    max_len: usize,
) -> Result<EvalReport> {
    let hyps = transfer_all(m, test, vocab, use_context, max_len)?;
    score_outputs(name, scorers, lm, test, &hyps, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_counts_matches() {
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 0, 3, 0]).unwrap(), 50.0);
        assert!(accuracy::<u8>(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn table_has_one_row_per_report() {
        let r = EvalReport {
            model: "CAST".into(),
            examples: 1,
            style_accuracy: 91.5,
            coherence_accuracy: 80.0,
            bleu: 40.25,
            gleu: 30.0,
            perplexity: None,
            records: vec![],
        };
        let t = EvalReport::table(&[r.clone(), EvalReport { perplexity: Some(12.345), ..r }]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("Model"));
        assert!(lines[1].contains("91.50") && lines[1].ends_with('-'));
        assert!(lines[2].ends_with("12.35"));
        assert!(lines.iter().all(|l| l.len() == lines[0].len()));
    }
}
