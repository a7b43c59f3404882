use super::{CoherencePair, Paragraph};
use crate::error::{CastError, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MAX_REDRAWS: usize = 1000;

/// One positive pair per paragraph (its own target sentence) followed by
/// `negatives_per_positive` negatives whose candidate is a uniformly drawn
/// sentence of a different paragraph.
pub fn make_coherence_pairs(paragraphs: &[Paragraph], negatives_per_positive: usize, seed: u64) -> Result<Vec<CoherencePair>> {
    if paragraphs.len() < 2 {
        return Err(CastError::InvalidData("coherence pairs need at least two paragraphs".into()));
    }
    if negatives_per_positive == 0 {
        return Err(CastError::Config("negatives_per_positive must be at least 1".into()));
    }
    for (i, p) in paragraphs.iter().enumerate() {
        p.validate().map_err(|m| CastError::InvalidData(format!("paragraph {i}: {m}")))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(paragraphs.len() * (1 + negatives_per_positive));
    for (i, p) in paragraphs.iter().enumerate() {
        let context = p.context();
        let original = p.target();
        pairs.push(CoherencePair { context: context.clone(), candidate: original.clone(), label: true });
        for _ in 0..negatives_per_positive {
            let mut redraws = 0;
            let candidate = loop {
                let mut j = rng.gen_range(0..paragraphs.len() - 1);
                if j >= i {
                    j += 1;
                }
                let other = &paragraphs[j].sentences;
                let s = &other[rng.gen_range(0..other.len())];
                if s != original {
                    break s.clone();
                }
                redraws += 1;
                if redraws > MAX_REDRAWS {
                    return Err(CastError::InvalidData(format!("paragraph {i}: no replacement sentence differs from the original")));
                }
            };
            pairs.push(CoherencePair { context: context.clone(), candidate, label: false });
        }
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn para(tag: &str, n: usize, target: usize) -> Paragraph {
        Paragraph { sentences: (0..n).map(|i| vec![format!("{tag}"), format!("s{i}")]).collect(), target_index: target }
    }

    #[test]
    fn two_paragraphs_ratio_one_gives_four_pairs() {
        let ps = vec![para("x", 3, 1), para("y", 3, 0)];
        let pairs = make_coherence_pairs(&ps, 1, 9).unwrap();
        assert_eq!(pairs.len(), 4);
        assert_eq!(pairs.iter().filter(|p| p.label).count(), 2);
        // negatives come from the other paragraph
        assert_eq!(pairs[1].candidate[0], "y");
        assert_eq!(pairs[3].candidate[0], "x");
    }

    #[test]
    fn counts_and_determinism() {
        let ps: Vec<_> = (0..7).map(|i| para(&format!("p{i}"), 4, i % 4)).collect();
        let a = make_coherence_pairs(&ps, 3, 42).unwrap();
        let b = make_coherence_pairs(&ps, 3, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 7 * 4);
        assert_eq!(a.iter().filter(|p| !p.label).count(), 21);
        for (k, pair) in a.iter().enumerate() {
            let src = &ps[k / 4];
            if pair.label {
                assert_eq!(&pair.candidate, src.target());
            } else {
                assert_ne!(&pair.candidate, src.target());
            }
        }
    }

    #[test]
    fn identical_sentences_are_never_negatives() {
        let mut ps = vec![para("x", 2, 0), para("y", 2, 0)];
        ps[1].sentences[1] = ps[0].sentences[0].clone();
        let pairs = make_coherence_pairs(&ps, 5, 1).unwrap();
        for pair in pairs.iter().take(6).filter(|p| !p.label) {
            assert_ne!(pair.candidate, ps[0].sentences[0]);
        }
    }

    #[test]
    fn rejects_degenerate_input() {
        assert!(make_coherence_pairs(&[para("x", 2, 0)], 1, 0).is_err());
        assert!(make_coherence_pairs(&[para("x", 2, 0), para("y", 2, 1)], 0, 0).is_err());
    }
}
