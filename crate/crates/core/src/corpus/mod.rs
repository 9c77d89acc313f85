//! Synthetic paired speech/text corpora with ground-truth word alignments.
//!
//! Each source word owns a fixed random prototype vector. An utterance is a
//! sequence of words, each rendered as a run of noisy copies of its prototype,
//! separated by zero-mean silence. Translations are a per-word dictionary image,
//! optionally with adjacent words swapped.

pub mod bpe;
pub mod io;

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
pub use bpe::BpeVocab;
pub use io::TextPair;

/// One word's frame span, 0-based and half-open.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordInterval {
    pub word: String,
    pub start: usize,
    pub end: usize,
}

/// A speech/transcript pair, with a translation for ST rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `n_frames × feat_dim`
    pub features: Tensor,
    pub transcript: Vec<String>,
    pub translation: Option<Vec<String>>,
    pub word_intervals: Option<Vec<WordInterval>>,
}

impl Utterance {
    pub fn n_frames(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslationRule {
    IdentityDictionary,
    AdjacentSwapDictionary,
}

/// Utterance counts per split. `mt_train` rows are text-only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub asr_train: usize,
    pub st_train: usize,
    pub mt_train: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_source_words: usize,
    pub feat_dim: usize,
    pub frames_per_word: [usize; 2],
    pub silence_frames: [usize; 2],
    pub words_per_utterance: [usize; 2],
    pub noise_sigma: f64,
    pub translation_rule: TranslationRule,
    /// Append a sentence-final "." to transcripts and translations (it has no
    /// speech interval).
    pub punctuate: bool,
    pub sizes: SplitSizes,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_source_words: 64,
            feat_dim: 16,
            frames_per_word: [6, 10],
            silence_frames: [1, 3],
            words_per_utterance: [3, 7],
            noise_sigma: 1.0,
            translation_rule: TranslationRule::AdjacentSwapDictionary,
            punctuate: true,
            sizes: SplitSizes { asr_train: 2000, st_train: 400, mt_train: 4000, dev: 100, test: 200 },
            seed: 7,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_source_words == 0 {
            problems.push("n_source_words must be positive".to_string());
        }
        if self.n_source_words > 2000 {
            problems.push("n_source_words exceeds the word generator's inventory (2000)".to_string());
        }
        if self.feat_dim == 0 {
            problems.push("feat_dim must be positive".to_string());
        }
        for (name, [lo, hi], min) in [
            ("frames_per_word", self.frames_per_word, 1),
            ("silence_frames", self.silence_frames, 0),
            ("words_per_utterance", self.words_per_utterance, 1),
        ] {
            if lo > hi || lo < min {
                problems.push(format!("{name} range [{lo}, {hi}] is invalid"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            problems.push("noise_sigma must be finite and >= 0".to_string());
        }
        let s = &self.sizes;
        for (name, n) in [
            ("asr_train", s.asr_train),
            ("st_train", s.st_train),
            ("mt_train", s.mt_train),
            ("dev", s.dev),
            ("test", s.test),
        ] {
            if n == 0 {
                problems.push(format!("sizes.{name} must be positive"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }
}

/// Maps text to text. Implemented by trained models and by dictionary oracles.
pub trait Translator {
    fn translate(&self, source: &[String]) -> Result<Vec<String>>;
}

/// The ground-truth source/target dictionary of a generated corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub rule: TranslationRule,
    map: HashMap<String, String>,
}

impl Lexicon {
    pub fn new(source: Vec<String>, target: Vec<String>, rule: TranslationRule) -> Self {
        let map = source.iter().cloned().zip(target.iter().cloned()).collect();
        Self { source, target, rule, map }
    }

    /// Dictionary image of `words`; punctuation passes through in place.
    pub fn apply(&self, words: &[String]) -> Result<Vec<String>> {
        let mut content = Vec::new();
        let mut tail = Vec::new();
        for w in words {
            if bpe::is_punctuation_word(w) {
                tail.push(w.clone());
                continue;
            }
            if !tail.is_empty() {
                return Err(Error::data(format!("punctuation before word {w:?} is not supported")));
            }
            let t = self.map.get(w).ok_or_else(|| Error::data(format!("word {w:?} is not in the lexicon")))?;
            content.push(t.clone());
        }
        if self.rule == TranslationRule::AdjacentSwapDictionary {
            for pair in content.chunks_mut(2) {
                pair.reverse();
            }
        }
        content.extend(tail);
        Ok(content)
    }

    pub fn to_tsv(&self) -> String {
        self.source.iter().zip(&self.target).map(|(s, t)| format!("{s}\t{t}\n")).collect()
    }
}

impl Translator for Lexicon {
    fn translate(&self, source: &[String]) -> Result<Vec<String>> {
        self.apply(source)
    }
}

/// A generated corpus held in memory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub lexicon: Lexicon,
    pub asr_train: Vec<Utterance>,
    pub st_train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub mt_train: Vec<TextPair>,
}

const CONSONANTS: &[char] = &['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z'];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];

fn random_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = match rng.random_range(0..10) {
        0..=1 => 1,
        2..=7 => 2,
        _ => 3,
    };
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())]);
        w.push(VOWELS[rng.random_range(0..VOWELS.len())]);
    }
    w
}

fn split_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

struct Generator<'a> {
    spec: &'a CorpusSpec,
    lexicon: Lexicon,
    prototypes: Vec<Vec<f64>>,
}

impl Generator<'_> {
    fn sentence(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let [lo, hi] = self.spec.words_per_utterance;
        let n = rng.random_range(lo..=hi);
        (0..n).map(|_| rng.random_range(0..self.lexicon.source.len())).collect()
    }

    fn texts(&self, words: &[usize]) -> (Vec<String>, Vec<String>) {
        let mut transcript: Vec<String> = words.iter().map(|&w| self.lexicon.source[w].clone()).collect();
        if self.spec.punctuate {
            transcript.push(".".to_string());
        }
        let translation = self.lexicon.apply(&transcript).expect("generated words are in the lexicon");
        (transcript, translation)
    }

    fn noise(&self, rng: &mut ChaCha8Rng) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        z * self.spec.noise_sigma
    }

    fn silence(&self, rng: &mut ChaCha8Rng, data: &mut Vec<f64>) {
        let [lo, hi] = self.spec.silence_frames;
        let n = rng.random_range(lo..=hi);
        for _ in 0..n * self.spec.feat_dim {
            let v = self.noise(rng);
            data.push(round_f32(v));
        }
    }

    fn utterance(&self, id: String, rng: &mut ChaCha8Rng, with_translation: bool) -> Utterance {
        let words = self.sentence(rng);
        let d = self.spec.feat_dim;
        let mut data = Vec::new();
        let mut intervals = Vec::with_capacity(words.len());
        self.silence(rng, &mut data);
        for &w in &words {
            let [lo, hi] = self.spec.frames_per_word;
            let dur = rng.random_range(lo..=hi);
            let start = data.len() / d;
            for _ in 0..dur {
                for k in 0..d {
                    let v = self.prototypes[w][k] + self.noise(rng);
                    data.push(round_f32(v));
                }
            }
            intervals.push(WordInterval { word: self.lexicon.source[w].clone(), start, end: start + dur });
            self.silence(rng, &mut data);
        }
        let n_frames = data.len() / d;
        let (transcript, translation) = self.texts(&words);
        Utterance {
            id,
            features: Tensor::from_vec(n_frames, d, data),
            transcript,
            translation: with_translation.then_some(translation),
            word_intervals: Some(intervals),
        }
    }
}

/// Generates all splits. Identical specs give identical corpora.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = split_rng(spec.seed, 0);
    let mut seen = BTreeSet::new();
    let mut fresh = |rng: &mut ChaCha8Rng| loop {
        let w = random_word(rng);
        if seen.insert(w.clone()) {
            break w;
        }
    };
    let source: Vec<String> = (0..spec.n_source_words).map(|_| fresh(&mut rng)).collect();
    let target: Vec<String> = (0..spec.n_source_words).map(|_| fresh(&mut rng)).collect();
    let prototypes = (0..spec.n_source_words)
        .map(|_| (0..spec.feat_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let lexicon = Lexicon::new(source, target, spec.translation_rule);
    let generator = Generator { spec, lexicon, prototypes };

    let speech_split = |name: &str, stream: u64, n: usize, with_translation: bool| {
        let mut rng = split_rng(spec.seed, stream);
        (0..n)
            .map(|i| generator.utterance(format!("{name}_{i:06}"), &mut rng, with_translation))
            .collect::<Vec<_>>()
    };
    let asr_train = speech_split("asr_train", 1, spec.sizes.asr_train, false);
    let st_train = speech_split("st_train", 2, spec.sizes.st_train, true);
    let dev = speech_split("dev", 3, spec.sizes.dev, true);
    let test = speech_split("test", 4, spec.sizes.test, true);
    let mut rng = split_rng(spec.seed, 5);
    let mt_train = (0..spec.sizes.mt_train)
        .map(|i| {
            let words = generator.sentence(&mut rng);
            let (source, target) = generator.texts(&words);
            TextPair { id: format!("mt_train_{i:06}"), source, target }
        })
        .collect();
    Ok(Corpus { spec: spec.clone(), lexicon: generator.lexicon, asr_train, st_train, dev, test, mt_train })
}

impl Corpus {
    /// Writes manifests, features, alignments, text pairs, the lexicon and the
    /// generating spec under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        io::write_manifest(dir, "asr_train", &self.asr_train)?;
        io::write_manifest(dir, "st_train", &self.st_train)?;
        io::write_manifest(dir, "dev", &self.dev)?;
        io::write_manifest(dir, "test", &self.test)?;
        io::write_text_pairs(&dir.join("mt_train.tsv"), &self.mt_train)?;
        let lex = dir.join("lexicon.tsv");
        std::fs::write(&lex, self.lexicon.to_tsv()).map_err(|e| Error::io(&lex, e))?;
        let spec_path = dir.join("corpus.json");
        let json = serde_json::to_string_pretty(&self.spec).expect("spec serializes");
        std::fs::write(&spec_path, json + "\n").map_err(|e| Error::io(&spec_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec_path = dir.join("corpus.json");
        let text = std::fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
        let spec: CorpusSpec =
            serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", spec_path.display())))?;
        let lex_path = dir.join("lexicon.tsv");
        let lex_text = std::fs::read_to_string(&lex_path).map_err(|e| Error::io(&lex_path, e))?;
        let (mut source, mut target) = (Vec::new(), Vec::new());
        for line in lex_text.lines().filter(|l| !l.is_empty()) {
            let (s, t) = line
                .split_once('\t')
                .ok_or_else(|| Error::data(format!("{}: malformed line {line:?}", lex_path.display())))?;
            source.push(s.to_string());
            target.push(t.to_string());
        }
        Ok(Self {
            lexicon: Lexicon::new(source, target, spec.translation_rule),
            spec,
            asr_train: io::load_manifest(&dir.join("asr_train.tsv"))?,
            st_train: io::load_manifest(&dir.join("st_train.tsv"))?,
            dev: io::load_manifest(&dir.join("dev.tsv"))?,
            test: io::load_manifest(&dir.join("test.tsv"))?,
            mt_train: io::load_text_pairs(&dir.join("mt_train.tsv"))?,
        })
    }

    /// Every transcript and translation, for tokenizer training.
    pub fn text_lines(&self) -> Vec<String> {
        let mut lines = Vec::new();
        for u in self.asr_train.iter().chain(&self.st_train).chain(&self.dev) {
            lines.push(u.transcript.join(" "));
            if let Some(t) = &u.translation {
                lines.push(t.join(" "));
            }
        }
        for p in &self.mt_train {
            lines.push(p.source.join(" "));
            lines.push(p.target.join(" "));
        }
        lines
    }
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Indices of a seeded random sample whose frame total first reaches `budget`.
///
/// Samples are drawn without replacement from one seeded permutation, so a
/// larger budget always yields a superset of a smaller one.
pub fn subset_indices(utterances: &[Utterance], budget: usize, seed: u64) -> Result<Vec<usize>> {
    let total: usize = utterances.iter().map(Utterance::n_frames).sum();
    if budget == 0 {
        return Err(Error::data("frame budget must be positive"));
    }
    if budget > total {
        return Err(Error::data(format!("frame budget {budget} exceeds the corpus total of {total} frames")));
    }
    let mut acc = 0;
    let mut out = Vec::new();
    for i in permutation(utterances.len(), seed) {
        if acc >= budget {
            break;
        }
        acc += utterances[i].n_frames();
        out.push(i);
    }
    Ok(out)
}

pub fn subset_budget(utterances: &[Utterance], budget: usize, seed: u64) -> Result<Vec<Utterance>> {
    Ok(subset_indices(utterances, budget, seed)?.into_iter().map(|i| utterances[i].clone()).collect())
}

/// The first `count` utterances of the same seeded permutation used by
/// [`subset_budget`].
pub fn subset_count(utterances: &[Utterance], count: usize, seed: u64) -> Result<Vec<Utterance>> {
    if count == 0 || count > utterances.len() {
        return Err(Error::data(format!("cannot sample {count} of {} utterances", utterances.len())));
    }
    Ok(permutation(utterances.len(), seed).into_iter().take(count).map(|i| utterances[i].clone()).collect())
}

/// Turns ASR pairs into pseudo ST triplets by translating their transcripts.
pub fn seqkd_expand(asr: &[Utterance], mt: &dyn Translator) -> Result<Vec<Utterance>> {
    asr.iter()
        .map(|u| {
            let hyp = mt
                .translate(&u.transcript)
                .map_err(|e| Error::data(format!("pseudo-translation of {} failed: {e}", u.id)))?;
            Ok(Utterance { translation: Some(hyp), ..u.clone() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> CorpusSpec {
        CorpusSpec {
            sizes: SplitSizes { asr_train: 30, st_train: 10, mt_train: 20, dev: 5, test: 5 },
            seed,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn zero_noise_frames_equal_prototype() {
        let spec = CorpusSpec { noise_sigma: 0.0, frames_per_word: [4, 4], ..small_spec(3) };
        let c = generate_corpus(&spec).unwrap();
        // identical words share identical frames
        let mut by_word: HashMap<String, Vec<f64>> = HashMap::new();
        for u in &c.asr_train {
            let mut covered = vec![false; u.n_frames()];
            for iv in u.word_intervals.as_ref().unwrap() {
                assert_eq!(iv.end - iv.start, 4);
                let first = u.features.row(iv.start).to_vec();
                for f in iv.start..iv.end {
                    covered[f] = true;
                    assert_eq!(u.features.row(f), first.as_slice());
                }
                let proto = by_word.entry(iv.word.clone()).or_insert(first.clone());
                assert_eq!(proto, &first);
            }
            for (f, c) in covered.iter().enumerate() {
                if !c {
                    assert!(u.features.row(f).iter().all(|v| *v == 0.0));
                }
            }
        }
    }

    #[test]
    fn intervals_match_transcript() {
        let c = generate_corpus(&small_spec(5)).unwrap();
        for u in c.asr_train.iter().chain(&c.dev) {
            let iv = u.word_intervals.as_ref().unwrap();
            io::validate_intervals(iv, u.n_frames()).unwrap();
            let words: Vec<&String> = u.transcript.iter().filter(|w| !bpe::is_punctuation_word(w)).collect();
            assert_eq!(words, iv.iter().map(|i| &i.word).collect::<Vec<_>>());
        }
        assert!(c.asr_train.iter().all(|u| u.translation.is_none()));
        assert!(c.st_train.iter().all(|u| u.translation.is_some()));
    }

    #[test]
    fn adjacent_swap_translation() {
        let lex = Lexicon::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["x".into(), "y".into(), "z".into()],
            TranslationRule::AdjacentSwapDictionary,
        );
        let words: Vec<String> = ["a", "b", "c", "."].iter().map(|s| s.to_string()).collect();
        assert_eq!(lex.apply(&words).unwrap(), vec!["y", "x", "z", "."]);
        let id = Lexicon { rule: TranslationRule::IdentityDictionary, ..lex };
        assert_eq!(id.apply(&words).unwrap(), vec!["x", "y", "z", "."]);
    }

    #[test]
    fn invalid_specs_list_every_problem() {
        let mut spec = small_spec(1);
        spec.noise_sigma = -1.0;
        spec.sizes.dev = 0;
        let msg = spec.validate().unwrap_err().to_string();
        assert!(msg.contains("noise_sigma") && msg.contains("sizes.dev"), "{msg}");
    }

    #[test]
    fn subset_edge_cases() {
        let c = generate_corpus(&small_spec(2)).unwrap();
        let total: usize = c.asr_train.iter().map(Utterance::n_frames).sum();
        let all = subset_indices(&c.asr_train, total, 9).unwrap();
        assert_eq!(all.len(), c.asr_train.len());
        assert!(subset_budget(&c.asr_train, 0, 9).is_err());
        assert!(subset_budget(&c.asr_train, total + 1, 9).is_err());
        let a = subset_indices(&c.asr_train, total / 3, 9).unwrap();
        let b = subset_indices(&c.asr_train, total / 3, 9).unwrap();
        let other = subset_indices(&c.asr_train, total / 3, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, other);
        let big = subset_indices(&c.asr_train, 2 * total / 3, 9).unwrap();
        assert!(a.iter().all(|i| big.contains(i)));
        let frames: usize = a.iter().map(|&i| c.asr_train[i].n_frames()).sum();
        assert!(frames >= total / 3);
    }

    #[test]
    fn seqkd_with_oracle_mt() {
        let c = generate_corpus(&small_spec(4)).unwrap();
        let pseudo = seqkd_expand(&c.st_train, &c.lexicon).unwrap();
        assert_eq!(pseudo.len(), c.st_train.len());
        for (p, u) in pseudo.iter().zip(&c.st_train) {
            assert_eq!(p.translation, u.translation);
        }
    }
}
