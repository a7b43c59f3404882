//! Corpus-level BLEU and the error-correction GLEU.

use crate::error::{CastError, Result};
use std::collections::HashMap;
use std::hash::Hash;

/// Numerator used in place of a zero n-gram match count for orders above 1.
pub const BLEU_EPSILON: f64 = 0.1;
pub const MAX_ORDER: usize = 4;

fn ngrams<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(CastError::InvalidData(format!("{a} hypotheses but {b} references")));
    }
    if a == 0 {
        return Err(CastError::InvalidData("nothing to score".into()));
    }
    Ok(())
}

/// Corpus BLEU-4 on a 0-100 scale with one reference per hypothesis.
///
/// Clipped n-gram matches and hypothesis n-gram totals are summed over the
/// corpus. An order with no hypothesis n-grams at all (every hypothesis
/// shorter than `n`) is left out of the geometric mean. A zero match count
/// for `n >= 2` is replaced by [`BLEU_EPSILON`]; zero unigram matches give 0.
/// Brevity penalty `exp(1 - r/c)` when the total hypothesis length `c` is
/// below the total reference length `r`.
pub fn bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    check_lengths(hypotheses.len(), references.len())?;
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hypotheses.iter().zip(references) {
        c += h.len();
        r += rf.len();
        for n in 1..=MAX_ORDER {
            let hn = ngrams(h, n);
            let rn = ngrams(rf, n);
            totals[n - 1] += hn.values().sum::<usize>();
            matches[n - 1] += hn.iter().map(|(g, &k)| k.min(rn.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    if c == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 0..MAX_ORDER {
        if totals[n] == 0 {
            continue;
        }
        let m = if matches[n] == 0 { BLEU_EPSILON } else { matches[n] as f64 };
        log_sum += (m / totals[n] as f64).ln();
        orders += 1;
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(100.0 * bp * (log_sum / orders as f64).exp())
}

/// GLEU for grammatical error correction, on a 0-100 scale, one reference.
///
/// Per order `n`, the corpus numerator sums `max(0, |H ∩ R| - |H ∩ (S \ R)|)`
/// (multiset intersections of n-gram counts, `S \ R` the source n-grams in
/// excess of the reference) and the denominator sums `max(0, |h| + 1 - n)`.
/// The score is `exp(min(0, 1 - r/c) + mean_n log(num_n / den_n))`, and 0 if
/// any statistic is 0.
pub fn gleu<T: Eq + Hash>(sources: &[Vec<T>], hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    check_lengths(hypotheses.len(), references.len())?;
    check_lengths(sources.len(), references.len())?;
    let (mut c, mut r) = (0usize, 0usize);
    let mut num = [0usize; MAX_ORDER];
    let mut den = [0usize; MAX_ORDER];
    for ((s, h), rf) in sources.iter().zip(hypotheses).zip(references) {
        c += h.len();
        r += rf.len();
        for n in 1..=MAX_ORDER {
            let hn = ngrams(h, n);
            let sn = ngrams(s, n);
            let rn = ngrams(rf, n);
            let mut gain = 0usize;
            let mut penalty = 0usize;
            for (g, &k) in &hn {
                let in_ref = rn.get(g).copied().unwrap_or(0);
                gain += k.min(in_ref);
                let excess = sn.get(g).copied().unwrap_or(0).saturating_sub(in_ref);
                penalty += k.min(excess);
            }
            num[n - 1] += gain.saturating_sub(penalty);
            den[n - 1] += (h.len() + 1).saturating_sub(n);
        }
    }
    if c == 0 || r == 0 || num.contains(&0) || den.contains(&0) {
        return Ok(0.0);
    }
    let log_prec: f64 = num.iter().zip(&den).map(|(&a, &b)| (a as f64 / b as f64).ln()).sum::<f64>() / MAX_ORDER as f64;
    Ok(100.0 * ((1.0 - r as f64 / c as f64).min(0.0) + log_prec).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let refs = vec![s("a b c d e"), s("f g")];
        assert!((bleu(&refs, &refs).unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(bleu(&[s("x y z")], &[s("a b c")]).unwrap(), 0.0);
        assert!(bleu(&[s("a")], &[]).is_err());
    }

    #[test]
    fn bleu_short_hypothesis_by_hand() {
        // unigrams: 1 of 3 clipped; bigrams: 0 of 2; trigrams: 0 of 1; no 4-grams.
        let got = bleu(&[s("the the the")], &[s("the cat")]).unwrap();
        let want = 100.0 * (1.0f64 / 3.0 * 0.05 * 0.1).powf(1.0 / 3.0);
        assert!((got - want).abs() < 1e-9);
    }

    #[test]
    fn bleu_brevity_penalty() {
        let got = bleu(&[s("a b")], &[s("a b c d")]).unwrap();
        assert!((got - 100.0 * (1.0f64 - 2.0).exp()).abs() < 1e-9);
    }

    #[test]
    fn gleu_identity_beats_copying_the_source() {
        let src = vec![s("i has a cat"), s("she go home")];
        let refs = vec![s("i have a cat"), s("she goes home")];
        let best = gleu(&src, &refs, &refs).unwrap();
        let copy = gleu(&src, &src, &refs).unwrap();
        assert!((best - 100.0).abs() < 1e-9);
        assert!(copy < best);
        assert!(gleu(&src[..1], &refs, &refs).is_err());
    }
}
