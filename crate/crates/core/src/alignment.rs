//! Pairs word intervals from an alignment with whole-word token groups and maps
//! frame intervals onto speech-encoder output positions.

use std::ops::Range;

use crate::corpus::bpe::{is_punctuation_word, BpeVocab};
use crate::corpus::{Utterance, WordInterval};
use crate::error::{Error, Result};

/// One aligned word. All ranges are 0-based and half-open.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordSpan {
    pub word: String,
    pub tokens: Range<usize>,
    pub frames: Range<usize>,
    /// Positions in the speech-encoder output.
    pub enc: Range<usize>,
}

/// Outcome of aligning one utterance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Aligned {
    Spans(Vec<WordSpan>),
    /// The utterance cannot be aligned; it is left out of contrastive batches.
    Skipped(String),
}

impl Aligned {
    pub fn spans(&self) -> Option<&[WordSpan]> {
        match self {
            Aligned::Spans(s) => Some(s),
            Aligned::Skipped(_) => None,
        }
    }
}

/// A whole word recovered from the token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenWord {
    pub text: String,
    pub tokens: Range<usize>,
}

pub fn token_words(vocab: &BpeVocab, ids: &[usize]) -> Result<Vec<TokenWord>> {
    Ok(vocab
        .group_words(ids)?
        .into_iter()
        .map(|r| TokenWord { text: vocab.decode(&ids[r.clone()]).concat(), tokens: r })
        .collect())
}

/// Pairs intervals with token words positionally. Punctuation-only token words
/// are ignored unless the alignment carries an interval for every token word.
/// Any remaining count or spelling mismatch (case-insensitive) skips the
/// utterance. The returned spans have an empty `enc` range.
pub fn match_words(intervals: &[WordInterval], words: &[TokenWord]) -> Aligned {
    if intervals.is_empty() {
        return Aligned::Skipped("no word intervals".into());
    }
    let content: Vec<&TokenWord> = if intervals.len() == words.len() {
        words.iter().collect()
    } else {
        words.iter().filter(|w| !is_punctuation_word(&w.text)).collect()
    };
    if content.len() != intervals.len() {
        return Aligned::Skipped(format!(
            "{} aligned words vs {} transcript words",
            intervals.len(),
            content.len()
        ));
    }
    let mut spans = Vec::with_capacity(intervals.len());
    for (iv, w) in intervals.iter().zip(content) {
        if iv.word.to_lowercase() != w.text.to_lowercase() {
            return Aligned::Skipped(format!("aligned word {:?} does not match token word {:?}", iv.word, w.text));
        }
        spans.push(WordSpan { word: w.text.clone(), tokens: w.tokens.clone(), frames: iv.start..iv.end, enc: 0..0 });
    }
    Aligned::Spans(spans)
}

/// Maps a 1-based inclusive frame interval `[l, r]` of an `n_frames` input onto
/// a 1-based inclusive interval of an `enc_len` encoder output.
///
/// The left edge is `floor(l·enc_len/n_frames) + 1`, the right edge
/// `ceil(r·enc_len/n_frames)`, both clamped to `[1, enc_len]`; if the left edge
/// passes the right one it is pulled back so the result is never empty.
pub fn rescale_interval(l: usize, r: usize, n_frames: usize, enc_len: usize) -> Result<(usize, usize)> {
    if !(1 <= l && l < r && r <= n_frames) || enc_len == 0 {
        return Err(Error::data(format!(
            "cannot rescale interval [{l}, {r}] of {n_frames} frames to {enc_len} positions"
        )));
    }
    let right = (r * enc_len).div_ceil(n_frames).clamp(1, enc_len);
    let left = (l * enc_len / n_frames + 1).clamp(1, enc_len).min(right);
    Ok((left, right))
}

/// Groups, matches and rescales one utterance's words.
pub fn build_spans(utterance: &Utterance, vocab: &BpeVocab, enc_len: usize) -> Result<Aligned> {
    let Some(intervals) = &utterance.word_intervals else {
        return Ok(Aligned::Skipped("utterance has no alignment".into()));
    };
    let ids = vocab.encode(&utterance.transcript)?;
    let words = token_words(vocab, &ids)?;
    let n = utterance.n_frames();
    match match_words(intervals, &words) {
        Aligned::Spans(mut spans) => {
            for s in &mut spans {
                let (l, r) = rescale_interval(s.frames.start + 1, s.frames.end, n, enc_len)
                    .or_else(|_| {
                        // single-frame words have l == r in 1-based terms
                        if s.frames.len() == 1 {
                            let pos = ((s.frames.start + 1) * enc_len).div_ceil(n).clamp(1, enc_len);
                            Ok((pos, pos))
                        } else {
                            Err(Error::data(format!("{}: bad interval for {}", utterance.id, s.word)))
                        }
                    })?;
                s.enc = l - 1..r;
            }
            Ok(Aligned::Spans(spans))
        }
        skipped => Ok(skipped),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(word: &str, start: usize, end: usize) -> WordInterval {
        WordInterval { word: word.into(), start, end }
    }

    fn tw(text: &str, r: Range<usize>) -> TokenWord {
        TokenWord { text: text.into(), tokens: r }
    }

    #[test]
    fn punctuation_is_dropped() {
        let intervals = [iv("practice", 0, 10), iv("makes", 10, 15), iv("perfect", 16, 20)];
        let words = [tw("Practice", 0..4), tw("makes", 4..5), tw("perfect", 5..6), tw(".", 6..7)];
        let spans = match_words(&intervals, &words);
        let spans = spans.spans().unwrap();
        assert_eq!(spans.len(), 3);
        assert_eq!(spans[0].tokens, 0..4);
        assert_eq!(spans[2].frames, 16..20);
    }

    #[test]
    fn mismatches_skip() {
        assert!(matches!(match_words(&[], &[tw("a", 0..1)]), Aligned::Skipped(_)));
        assert!(matches!(match_words(&[iv("a", 0, 2)], &[tw("b", 0..1)]), Aligned::Skipped(_)));
        assert!(matches!(match_words(&[iv("a", 0, 2)], &[tw("a", 0..1), tw("b", 1..2)]), Aligned::Skipped(_)));
    }

    #[test]
    fn rescale_examples() {
        assert_eq!(rescale_interval(160, 480, 1600, 100).unwrap(), (11, 30));
        assert_eq!(rescale_interval(1, 1600, 1600, 100).unwrap(), (1, 100));
        assert!(rescale_interval(5, 5, 16, 4).is_err());
        assert!(rescale_interval(0, 5, 16, 4).is_err());
        assert!(rescale_interval(3, 17, 16, 4).is_err());
    }

    #[test]
    fn rescale_never_empty_exhaustive() {
        for n in 2..=40 {
            for enc in 1..=n {
                for l in 1..n {
                    for r in l + 1..=n {
                        let (a, b) = rescale_interval(l, r, n, enc).unwrap();
                        assert!(1 <= a && a <= b && b <= enc, "n={n} enc={enc} l={l} r={r} -> ({a},{b})");
                    }
                }
            }
        }
        // narrow spans under 4x shrinkage collapse to one position
        let (a, b) = rescale_interval(5, 6, 16, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rescale_identity_up_to_one() {
        for n in 2..30 {
            for l in 1..n {
                for r in l + 1..=n {
                    let (a, b) = rescale_interval(l, r, n, n).unwrap();
                    assert_eq!(b, r);
                    assert!(a == l + 1 || a == r);
                }
            }
        }
    }

    #[test]
    fn figure_style_utterance() {
        use crate::tensor::Tensor;
        let vocab = BpeVocab::train(&["practice makes perfect ."], 40).unwrap();
        let mut u = Utterance {
            id: "u".into(),
            features: Tensor::zeros(40, 2),
            transcript: ["practice", "makes", "perfect", "."].iter().map(|s| s.to_string()).collect(),
            translation: None,
            word_intervals: Some(vec![iv("practice", 2, 12), iv("makes", 13, 20), iv("perfect", 22, 30), iv(".", 31, 33)]),
        };
        assert_eq!(build_spans(&u, &vocab, 10).unwrap().spans().unwrap().len(), 4);
        u.word_intervals.as_mut().unwrap().pop();
        let spans = build_spans(&u, &vocab, 10).unwrap();
        let spans = spans.spans().unwrap().to_vec();
        assert_eq!(spans.len(), 3);
        for w in spans.windows(2) {
            assert!(w[0].tokens.end <= w[1].tokens.start);
            assert!(w[0].enc.start <= w[1].enc.start);
        }
        assert!(spans.iter().all(|s| !s.enc.is_empty() && s.enc.end <= 10));
        u.word_intervals = None;
        assert!(matches!(build_spans(&u, &vocab, 10).unwrap(), Aligned::Skipped(_)));
    }
}
