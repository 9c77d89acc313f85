//! Deterministic greedy byte-pair encoding over whole words.
//!
//! Word-initial symbols carry the `▁` boundary marker, so the first character of
//! every word is an atomic base symbol (`▁p`) and a decoded token sequence can be
//! split back into words without any side information.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};

pub const WORD_MARKER: char = '▁';

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const BLANK: usize = 3;
/// Decoder start symbol for transcription targets.
pub const ASR_BOS: usize = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<s>", "</s>", "<blank>", "<asr>"];
const MERGES_HEADER: &str = "#MERGES";

/// Splits text on whitespace and detaches every punctuation character into its
/// own word.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut cur = String::new();
        for ch in chunk.chars() {
            if is_punctuation(ch) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

pub fn is_punctuation(ch: char) -> bool {
    ch.is_ascii_punctuation() || matches!(ch, '¿' | '¡' | '«' | '»' | '…' | '“' | '”' | '‘' | '’')
}

/// True when a word consists only of punctuation.
pub fn is_punctuation_word(word: &str) -> bool {
    !word.is_empty() && word.chars().all(is_punctuation)
}

fn initial_symbols(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, ch)| if i == 0 { format!("{WORD_MARKER}{ch}") } else { ch.to_string() })
        .collect()
}

fn apply_merge(symbols: &mut Vec<String>, left: &str, right: &str) {
    if symbols.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(std::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

/// Subword vocabulary with its ordered merge rules.
#[derive(Clone, Debug, PartialEq)]
pub struct BpeVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    merges: Vec<(String, String)>,
}

impl BpeVocab {
    /// Learns merges from `lines` until the vocabulary holds `vocab_size` tokens
    /// or no adjacent pair is left.
    ///
    /// The most frequent pair wins; ties go to the lexicographically smallest
    /// merged string, then to the smallest left symbol.
    pub fn train<S: AsRef<str>>(lines: &[S], vocab_size: usize) -> Result<Self> {
        let mut word_freq: BTreeMap<String, usize> = BTreeMap::new();
        for line in lines {
            for w in pre_tokenize(line.as_ref()) {
                *word_freq.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<String>, usize)> =
            word_freq.iter().map(|(w, f)| (initial_symbols(w), *f)).collect();
        let alphabet: BTreeSet<String> = words.iter().flat_map(|(s, _)| s.iter().cloned()).collect();

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(alphabet);
        if vocab_size < tokens.len() {
            return Err(Error::config(format!(
                "vocab_size {vocab_size} is smaller than the {} base symbols and specials",
                tokens.len()
            )));
        }
        let mut known: BTreeSet<String> = tokens.iter().cloned().collect();
        let mut merges = Vec::new();

        while tokens.len() < vocab_size {
            let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
            for (syms, freq) in &words {
                for pair in syms.windows(2) {
                    *counts.entry((pair[0].as_str(), pair[1].as_str())).or_default() += freq;
                }
            }
            let best = counts
                .into_iter()
                .map(|((l, r), c)| (c, format!("{l}{r}"), l.to_string(), r.to_string()))
                .min_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)).then_with(|| a.2.cmp(&b.2)));
            let Some((_, merged, left, right)) = best else { break };
            for (syms, _) in &mut words {
                apply_merge(syms, &left, &right);
            }
            if known.insert(merged.clone()) {
                tokens.push(merged);
            }
            merges.push((left, right));
        }
        Ok(Self::from_parts(tokens, merges))
    }

    fn from_parts(tokens: Vec<String>, merges: Vec<(String, String)>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index, merges }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// True for tokens that start a new word.
    pub fn is_word_start(&self, id: usize) -> bool {
        !Self::is_special(id) && self.tokens[id].starts_with(WORD_MARKER)
    }

    /// Encodes one word by replaying the merge rules in training order.
    pub fn encode_word(&self, word: &str) -> Result<Vec<usize>> {
        let mut syms = initial_symbols(word);
        for (sym, ch) in syms.iter().zip(word.chars()) {
            if !self.index.contains_key(sym) {
                return Err(Error::UnknownChar { ch, word: word.to_string() });
            }
        }
        for (l, r) in &self.merges {
            if syms.len() < 2 {
                break;
            }
            apply_merge(&mut syms, l, r);
        }
        Ok(syms.iter().map(|s| self.index[s]).collect())
    }

    /// Encodes a word sequence; punctuation inside a word is split off first.
    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for w in words {
            for piece in pre_tokenize(w.as_ref()) {
                out.extend(self.encode_word(&piece)?);
            }
        }
        Ok(out)
    }

    pub fn encode_text(&self, text: &str) -> Result<Vec<usize>> {
        self.encode(&pre_tokenize(text))
    }

    /// Joins tokens back into words, skipping special ids.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        let mut words: Vec<String> = Vec::new();
        for &id in ids {
            if Self::is_special(id) || id >= self.tokens.len() {
                continue;
            }
            let tok = &self.tokens[id];
            match tok.strip_prefix(WORD_MARKER) {
                Some(rest) => words.push(rest.to_string()),
                None => match words.last_mut() {
                    Some(last) => last.push_str(tok),
                    None => words.push(tok.clone()),
                },
            }
        }
        words
    }

    /// Decoded words joined by single spaces.
    pub fn decode_to_string(&self, ids: &[usize]) -> String {
        self.decode(ids).join(" ")
    }

    /// Token ranges (0-based, half-open) of the whole words in `ids`.
    pub fn group_words(&self, ids: &[usize]) -> Result<Vec<Range<usize>>> {
        let mut ranges: Vec<Range<usize>> = Vec::new();
        for (pos, &id) in ids.iter().enumerate() {
            if self.is_word_start(id) {
                ranges.push(pos..pos + 1);
            } else {
                match ranges.last_mut() {
                    Some(r) => r.end = pos + 1,
                    None => {
                        return Err(Error::data(format!(
                            "token sequence starts with {:?}, which lacks the word-boundary marker",
                            self.tokens.get(id).map_or("<out of range>", String::as_str)
                        )))
                    }
                }
            }
        }
        Ok(ranges)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            let _ = writeln!(s, "{t}");
        }
        let _ = writeln!(s, "{MERGES_HEADER}");
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l}\t{r}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut tokens = Vec::new();
        let mut saw_header = false;
        for line in lines.by_ref() {
            if line == MERGES_HEADER {
                saw_header = true;
                break;
            }
            tokens.push(line.to_string());
        }
        if !saw_header {
            return Err(Error::data(format!("BPE model lacks the {MERGES_HEADER} separator")));
        }
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::data("BPE model does not start with the special tokens"));
        }
        let mut merges = Vec::new();
        for (n, line) in lines.enumerate() {
            let (l, r) = line
                .split_once('\t')
                .ok_or_else(|| Error::data(format!("malformed merge rule on line {}: {line:?}", n + 1)))?;
            merges.push((l.to_string(), r.to_string()));
        }
        let vocab = Self::from_parts(tokens, merges);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::data("BPE model has duplicate tokens"));
        }
        for (l, r) in &vocab.merges {
            if !vocab.index.contains_key(&format!("{l}{r}")) {
                return Err(Error::data(format!("merge {l:?}+{r:?} produces a token missing from the vocabulary")));
            }
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repeated_word_merges() {
        // Hand simulation on "aaaa" with the atomic "▁a" initial symbol:
        // [▁a a a a] -> (a,a)x2 wins -> [▁a aa a]
        // (▁a,aa) and (aa,a) tie at 1; "aaa" < "▁aaa" -> [▁a aaa] -> [▁aaaa]
        let lines = vec!["aaaa"; 5];
        let v = BpeVocab::train(&lines, 100).unwrap();
        let merged: Vec<String> = v.merges().iter().map(|(l, r)| format!("{l}{r}")).collect();
        assert_eq!(merged, vec!["aa", "aaa", "▁aaaa"]);
        assert_eq!(v.encode(&["aaaa"]).unwrap(), vec![v.id("▁aaaa").unwrap()]);
    }

    #[test]
    fn no_merges_is_character_level() {
        let lines = ["kato mire", "sulo kato"];
        let v = BpeVocab::train(&lines, 0).map(|_| ()).unwrap_err();
        assert!(matches!(v, Error::Config(_)));
        let base = BpeVocab::train(&lines, 5 + 11).unwrap();
        assert!(base.merges().is_empty());
        for w in ["kato", "mire", "sulo"] {
            let ids = base.encode(&[w]).unwrap();
            assert_eq!(ids.len(), w.chars().count());
            assert_eq!(base.decode(&ids), vec![w.to_string()]);
        }
    }

    #[test]
    fn practice_makes_perfect() {
        let lines = ["Practice makes perfect .", "makes perfect sense ."];
        let v = BpeVocab::train(&lines, 60).unwrap();
        let ids = v.encode_text("Practice makes perfect .").unwrap();
        let starts = ids.iter().filter(|&&i| v.is_word_start(i)).count();
        assert_eq!(starts, 4);
        let groups = v.group_words(&ids).unwrap();
        assert_eq!(groups.len(), 4);
        assert_eq!(v.decode(&ids), vec!["Practice", "makes", "perfect", "."]);
    }

    #[test]
    fn group_words_figure_layout() {
        // (_Pra, c, tic, e, _makes, _perfect, _.) built by hand
        let tokens = ["<pad>", "<s>", "</s>", "<blank>", "<asr>", "▁Pra", "c", "tic", "e", "▁makes", "▁perfect", "▁."];
        let v = BpeVocab::from_parts(tokens.iter().map(|s| s.to_string()).collect(), vec![]);
        let ids: Vec<usize> = (5..12).collect();
        let groups = v.group_words(&ids).unwrap();
        assert_eq!(groups, vec![0..4, 4..5, 5..6, 6..7]);
        assert!(v.group_words(&ids[1..]).is_err());
    }

    #[test]
    fn grouping_concatenates() {
        let lines = ["kato mire sulo", "mire kato"];
        let v = BpeVocab::train(&lines, 30).unwrap();
        let a = v.encode(&["kato"]).unwrap();
        let b = v.encode(&["mire"]).unwrap();
        let both: Vec<usize> = a.iter().chain(&b).copied().collect();
        let g = v.group_words(&both).unwrap();
        assert_eq!(g, vec![0..a.len(), a.len()..a.len() + b.len()]);
    }

    #[test]
    fn single_character_word() {
        let v = BpeVocab::train(&["a b cd"], 20).unwrap();
        assert_eq!(v.encode(&["a"]).unwrap().len(), 1);
    }

    #[test]
    fn unknown_character_is_an_error() {
        let v = BpeVocab::train(&["abc"], 20).unwrap();
        match v.encode(&["abz"]) {
            Err(Error::UnknownChar { ch, .. }) => assert_eq!(ch, 'z'),
            other => panic!("expected UnknownChar, got {other:?}"),
        }
    }

    #[test]
    fn text_round_trip() {
        let v = BpeVocab::train(&["kato mire sulo .", "mire kato"], 40).unwrap();
        let back = BpeVocab::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert!(BpeVocab::from_text("<pad>\n").is_err());
    }

    #[test]
    fn blank_never_produced() {
        let v = BpeVocab::train(&["kato mire sulo .", "mire kato"], 40).unwrap();
        let ids = v.encode_text("kato mire sulo .").unwrap();
        assert!(ids.iter().all(|&i| !BpeVocab::is_special(i)));
    }
}
