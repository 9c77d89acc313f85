//! Decoding, metrics and representation analyses.

use std::cell::RefCell;
use std::collections::HashMap;
use std::io::BufWriter;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::bpe::{BpeVocab, ASR_BOS, BLANK, BOS, EOS, PAD};
use crate::corpus::{Translator, Utterance};
use crate::error::{Error, Result};
use crate::losses::{cosine, Example};
use crate::model::{DecoderMemory, DecoderState, Model};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub length_penalty_alpha: f64,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam_size: 10, length_penalty_alpha: 1.0, max_len: 60 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.beam_size == 0 {
            problems.push("decode.beam_size must be >= 1");
        }
        if self.max_len == 0 {
            problems.push("decode.max_len must be >= 1");
        }
        if !self.length_penalty_alpha.is_finite() {
            problems.push("decode.length_penalty_alpha must be finite");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }
}

/// Next-token log-probabilities given a prefix that starts with the start token.
pub trait NextToken {
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<usize>,
    log_p: f64,
}

/// Beam search. A hypothesis is scored by its summed log-probability divided
/// by `len^alpha`, counting generated tokens including the end token. Search
/// stops when every surviving hypothesis has ended or `max_len` tokens were
/// generated. Ties go to the hypothesis that finished first, then to the
/// lexicographically smaller token sequence. Returns the generated tokens
/// without the start and end markers.
pub fn beam_search(
    scorer: &dyn NextToken,
    start: usize,
    end: usize,
    banned: &[usize],
    cfg: &DecodeConfig,
) -> Result<Vec<usize>> {
    cfg.validate()?;
    let mut alive = vec![Hyp { tokens: vec![start], log_p: 0.0 }];
    // (normalized score, completion step, tokens)
    let mut finished: Vec<(f64, usize, Vec<usize>)> = Vec::new();
    let norm = |log_p: f64, len: usize| log_p / (len as f64).powf(cfg.length_penalty_alpha);
    for step in 1..=cfg.max_len {
        let mut candidates: Vec<Hyp> = Vec::new();
        for h in &alive {
            let lp = scorer.log_probs(&h.tokens)?;
            for (v, &l) in lp.iter().enumerate() {
                if banned.contains(&v) || l == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(v);
                candidates.push(Hyp { tokens, log_p: h.log_p + l });
            }
        }
        candidates.sort_by(|a, b| b.log_p.total_cmp(&a.log_p).then_with(|| a.tokens.cmp(&b.tokens)));
        candidates.truncate(cfg.beam_size);
        alive.clear();
        for c in candidates {
            if *c.tokens.last().unwrap() == end || step == cfg.max_len {
                finished.push((norm(c.log_p, step), step, c.tokens));
            } else {
                alive.push(c);
            }
        }
        if alive.is_empty() {
            break;
        }
    }
    let best = finished
        .into_iter()
        .min_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then_with(|| a.2.cmp(&b.2)))
        .map(|(_, _, t)| t)
        .unwrap_or_default();
    Ok(best.into_iter().skip(1).filter(|&t| t != end).collect())
}

/// Decoder scorer over a fixed encoder memory. Each prefix extends the cached
/// state of its parent, so a beam step costs one token per hypothesis.
struct ModelScorer<'a> {
    model: &'a Model,
    memory: DecoderMemory,
    states: RefCell<HashMap<Vec<usize>, Step>>,
}

/// Decoder state after a prefix, and the logits it produced.
type Step = (DecoderState, Vec<f64>);

impl ModelScorer<'_> {
    fn step(&self, prefix: &[usize]) -> Result<Step> {
        if let Some(hit) = self.states.borrow().get(prefix) {
            return Ok(hit.clone());
        }
        let Some((&last, parent)) = prefix.split_last() else {
            return Err(Error::data("decoder prefix must start with a begin-of-sequence token"));
        };
        let mut state = if parent.is_empty() { self.model.decoder_start() } else { self.step(parent)?.0 };
        let logits = self.model.decoder_step(&self.memory, &mut state, last)?;
        self.states.borrow_mut().insert(prefix.to_vec(), (state.clone(), logits.clone()));
        Ok((state, logits))
    }
}

impl NextToken for ModelScorer<'_> {
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let (_, row) = self.step(prefix)?;
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        Ok(row.iter().map(|v| v - lse).collect())
    }
}

/// What the encoder reads.
#[derive(Clone, Copy, Debug)]
pub enum Source<'a> {
    Speech(&'a Tensor),
    Text(&'a [usize]),
}

const BANNED: [usize; 4] = [PAD, BOS, BLANK, ASR_BOS];

/// Beam-decodes from `source` under decoder start token `start`.
pub fn beam_decode(model: &Model, source: Source, start: usize, cfg: &DecodeConfig) -> Result<Vec<usize>> {
    let mut g = Graph::new(&model.params);
    let mem = match source {
        Source::Speech(f) => model.speech_memory(&mut g, f)?,
        Source::Text(t) => model.text_memory(&mut g, t)?,
    };
    let scorer = ModelScorer { model, memory: model.decoder_memory(g.value(mem)), states: RefCell::default() };
    beam_search(&scorer, start, EOS, &BANNED, cfg)
}

pub fn translate_text(model: &Model, vocab: &BpeVocab, source: &[usize], cfg: &DecodeConfig) -> Result<String> {
    Ok(vocab.decode_to_string(&beam_decode(model, Source::Text(source), BOS, cfg)?))
}

pub fn translate_speech(model: &Model, vocab: &BpeVocab, features: &Tensor, cfg: &DecodeConfig) -> Result<String> {
    Ok(vocab.decode_to_string(&beam_decode(model, Source::Speech(features), BOS, cfg)?))
}

pub fn transcribe_speech(model: &Model, vocab: &BpeVocab, features: &Tensor, cfg: &DecodeConfig) -> Result<String> {
    Ok(vocab.decode_to_string(&beam_decode(model, Source::Speech(features), ASR_BOS, cfg)?))
}

/// Hypotheses for each example's speech, in order.
pub fn translate_examples(model: &Model, vocab: &BpeVocab, examples: &[Example], cfg: &DecodeConfig) -> Result<Vec<String>> {
    examples.iter().map(|e| translate_speech(model, vocab, &e.features, cfg)).collect()
}

/// Corpus BLEU of speech translations against the examples' targets.
pub fn speech_bleu(model: &Model, vocab: &BpeVocab, examples: &[Example], cfg: &DecodeConfig) -> Result<f64> {
    let hyps = translate_examples(model, vocab, examples, cfg)?;
    let refs: Vec<String> = examples
        .iter()
        .map(|e| e.target.as_ref().map(|t| vocab.decode_to_string(t)).ok_or_else(|| Error::data(format!("{} has no reference", e.id))))
        .collect::<Result<_>>()?;
    bleu(&hyps, &refs)
}

static TOKENIZE_13A: LazyLock<[(Regex, &'static str); 4]> = LazyLock::new(|| {
    [
        (Regex::new(r"([\{-\~\[-\` -\&\(-\+\:-\@/])").unwrap(), " ${1} "),
        (Regex::new(r"([^0-9])([\.,])").unwrap(), "${1} ${2} "),
        (Regex::new(r"([\.,])([^0-9])").unwrap(), " ${1} ${2}"),
        (Regex::new(r"([0-9])(-)").unwrap(), "${1} ${2} "),
    ]
});

/// The mteval-v13a tokenization used by standard BLEU tooling.
pub fn tokenize_13a(line: &str) -> Vec<String> {
    let mut s = line.trim_end().replace("<skipped>", "").replace("-\n", "").replace('\n', " ");
    if s.contains('&') {
        s = s.replace("&quot;", "\"").replace("&amp;", "&").replace("&lt;", "<").replace("&gt;", ">");
    }
    let mut s = format!(" {s} ");
    for (re, rep) in TOKENIZE_13A.iter() {
        s = re.replace_all(&s, *rep).into_owned();
    }
    s.split_whitespace().map(str::to_string).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Case-sensitive corpus BLEU-4 on 13a tokens with exponential smoothing,
/// on a 0–100 scale.
pub fn bleu(hypotheses: &[String], references: &[String]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::data(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::data("BLEU of an empty hypothesis set"));
    }
    let mut correct = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut sys_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let (h, r) = (tokenize_13a(h), tokenize_13a(r));
        sys_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            for (g, c) in &hc {
                correct[n - 1] += (*c).min(rc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if correct.iter().all(|&c| c == 0) {
        return Ok(0.0);
    }
    let bp = if sys_len < ref_len { (1.0 - ref_len as f64 / sys_len as f64).exp() } else { 1.0 };
    let mut log_sum = 0.0;
    let mut smooth = 1.0;
    for n in 0..4 {
        if total[n] == 0 {
            // an undefined precision counts as zero
            return Ok(0.0);
        }
        let p = if correct[n] == 0 {
            smooth *= 2.0;
            100.0 / (smooth * total[n] as f64)
        } else {
            100.0 * correct[n] as f64 / total[n] as f64
        };
        log_sum += p.ln();
    }
    Ok(bp * (log_sum / 4.0).exp())
}

fn edit_distance(a: &[&str], b: &[&str]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Corpus word error rate: total word edits over total reference words.
pub fn wer(hypotheses: &[String], references: &[String]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::data(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let (mut edits, mut words) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        let h: Vec<&str> = h.split_whitespace().collect();
        let r: Vec<&str> = r.split_whitespace().collect();
        edits += edit_distance(&h, &r);
        words += r.len();
    }
    if words == 0 {
        return Err(Error::data("WER needs at least one reference word"));
    }
    Ok(edits as f64 / words as f64)
}

/// Maps speech to a transcript.
pub trait Transcriber {
    fn transcribe(&self, features: &Tensor) -> Result<Vec<String>>;
}

/// A trained model used for one direction of a cascade.
pub struct ModelStage<'a> {
    pub model: &'a Model,
    pub vocab: &'a BpeVocab,
    pub decode: DecodeConfig,
}

impl Transcriber for ModelStage<'_> {
    fn transcribe(&self, features: &Tensor) -> Result<Vec<String>> {
        let ids = beam_decode(self.model, Source::Speech(features), ASR_BOS, &self.decode)?;
        Ok(self.vocab.decode(&ids))
    }
}

impl Translator for ModelStage<'_> {
    fn translate(&self, source: &[String]) -> Result<Vec<String>> {
        let ids = self.vocab.encode(source)?;
        if ids.is_empty() {
            return Ok(Vec::new());
        }
        let out = beam_decode(self.model, Source::Text(&ids), BOS, &self.decode)?;
        Ok(self.vocab.decode(&out))
    }
}

/// Transcribes, translates the transcript and scores against the utterances'
/// references.
pub fn cascade_eval(asr: &dyn Transcriber, mt: &dyn Translator, test: &[Utterance]) -> Result<f64> {
    let mut hyps = Vec::with_capacity(test.len());
    let mut refs = Vec::with_capacity(test.len());
    for u in test {
        let r = u.translation.as_ref().ok_or_else(|| Error::data(format!("{} has no reference", u.id)))?;
        let transcript = asr.transcribe(&u.features)?;
        let translation = if transcript.is_empty() { Vec::new() } else { mt.translate(&transcript)? };
        hyps.push(translation.join(" "));
        refs.push(r.join(" "));
    }
    bleu(&hyps, &refs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub word_level_mean_cosine: f64,
    pub sentence_level_mean_cosine: f64,
    pub n_words: usize,
    pub n_sentences: usize,
}

/// Speech-encoder output and raw embedding rows of one example.
pub struct Views {
    pub speech: Tensor,
    pub text: Tensor,
}

pub fn views(model: &Model, e: &Example) -> Result<Views> {
    Ok(Views { speech: model.encode_speech(&e.features)?, text: model.embedding_rows(&e.source)? })
}

fn mean_rows(t: &Tensor, r: std::ops::Range<usize>) -> Vec<f64> {
    t.slice_rows(r.start, r.end).mean_rows()
}

/// Mean word-level cosine between mean-pooled speech spans and mean-pooled
/// token embeddings, and mean sentence-level cosine between whole-utterance
/// means. Examples without spans contribute only to the sentence level.
pub fn similarity_report(model: &Model, examples: &[Example]) -> Result<SimilarityReport> {
    similarity_from_views(examples, |e| views(model, e))
}

pub fn similarity_from_views(
    examples: &[Example],
    mut view: impl FnMut(&Example) -> Result<Views>,
) -> Result<SimilarityReport> {
    let (mut word_sum, mut n_words) = (0.0, 0);
    let (mut sent_sum, mut n_sent) = (0.0, 0);
    for e in examples {
        let v = view(e)?;
        for s in e.spans.iter().flatten() {
            word_sum += cosine(&mean_rows(&v.speech, s.enc.clone()), &mean_rows(&v.text, s.tokens.clone()))?;
            n_words += 1;
        }
        sent_sum += cosine(&v.speech.mean_rows(), &v.text.mean_rows())?;
        n_sent += 1;
    }
    if n_sent == 0 {
        return Err(Error::data("similarity report over no utterances"));
    }
    Ok(SimilarityReport {
        word_level_mean_cosine: if n_words == 0 { 0.0 } else { word_sum / n_words as f64 },
        sentence_level_mean_cosine: sent_sum / n_sent as f64,
        n_words,
        n_sentences: n_sent,
    })
}

/// Cosine matrices for one aligned utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentMatrices {
    pub words: Vec<String>,
    /// `m × enc_len`: pooled text word against each speech-encoder frame.
    pub token_to_frame: Tensor,
    /// `m × m`: pooled text word `i` against pooled speech span `j`.
    pub word_level: Tensor,
}

pub fn alignment_matrix(model: &Model, e: &Example) -> Result<AlignmentMatrices> {
    alignment_from_views(e, &views(model, e)?)
}

pub fn alignment_from_views(e: &Example, v: &Views) -> Result<AlignmentMatrices> {
    let spans = e.spans.as_ref().filter(|s| !s.is_empty()).ok_or_else(|| Error::data(format!("{} has no aligned words", e.id)))?;
    let m = spans.len();
    let enc_len = v.speech.rows();
    let text: Vec<Vec<f64>> = spans.iter().map(|s| mean_rows(&v.text, s.tokens.clone())).collect();
    let speech: Vec<Vec<f64>> = spans.iter().map(|s| mean_rows(&v.speech, s.enc.clone())).collect();
    let mut t2f = Tensor::zeros(m, enc_len);
    let mut wl = Tensor::zeros(m, m);
    for i in 0..m {
        for j in 0..enc_len {
            t2f.set(i, j, cosine(&text[i], v.speech.row(j))?);
        }
        for j in 0..m {
            wl.set(i, j, cosine(&text[i], &speech[j])?);
        }
    }
    Ok(AlignmentMatrices { words: spans.iter().map(|s| s.word.clone()).collect(), token_to_frame: t2f, word_level: wl })
}

/// Mean diagonal minus mean off-diagonal entry, pooled over matrices.
pub fn diagonal_margin(matrices: &[Tensor]) -> Option<f64> {
    let (mut diag, mut nd, mut off, mut no) = (0.0, 0usize, 0.0, 0usize);
    for m in matrices {
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                if i == j {
                    diag += m.get(i, j);
                    nd += 1;
                } else {
                    off += m.get(i, j);
                    no += 1;
                }
            }
        }
    }
    (nd > 0 && no > 0).then(|| diag / nd as f64 - off / no as f64)
}

/// Tab-separated rows of a matrix with six decimals.
pub fn matrix_tsv(t: &Tensor) -> String {
    (0..t.rows())
        .map(|r| t.row(r).iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join("\t") + "\n")
        .collect()
}

fn heat_color(v: f64) -> [u8; 3] {
    let v = v.clamp(-1.0, 1.0);
    let fade = |x: f64| (255.0 * (1.0 - x)).round() as u8;
    if v >= 0.0 {
        [255, fade(v), fade(v)]
    } else {
        [fade(-v), fade(-v), 255]
    }
}

/// Renders a cosine matrix as a blue–white–red PNG, `cell` pixels per entry.
pub fn write_heatmap(path: &Path, t: &Tensor, cell: usize) -> Result<()> {
    let (w, h) = (t.cols() * cell, t.rows() * cell);
    if w == 0 || h == 0 {
        return Err(Error::data("cannot render an empty matrix"));
    }
    let mut pixels = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            pixels.extend_from_slice(&heat_color(t.get(y / cell, x / cell)));
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let io_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(io_err)?;
    writer.write_image_data(&pixels).map_err(io_err)?;
    writer.finish().map_err(io_err)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let ranks = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::WordSpan;

    /// Log-probabilities from a table keyed by prefix (without the start token).
    struct Table {
        v: usize,
        rows: HashMap<Vec<usize>, Vec<f64>>,
    }

    impl NextToken for Table {
        fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
            Ok(self.rows.get(&prefix[1..]).cloned().unwrap_or_else(|| vec![-(self.v as f64).ln(); self.v]))
        }
    }

    fn probs(p: &[f64]) -> Vec<f64> {
        p.iter().map(|v| v.ln()).collect()
    }

    #[test]
    fn beam_beats_greedy_on_two_steps() {
        // tokens: 0 = start, 1 = end, 2 = a, 3 = b
        let mut rows = HashMap::new();
        rows.insert(vec![], probs(&[0.0, 0.0, 0.6, 0.4]));
        rows.insert(vec![2], probs(&[0.0, 0.4, 0.3, 0.3]));
        rows.insert(vec![3], probs(&[0.0, 0.9, 0.05, 0.05]));
        let t = Table { v: 4, rows };
        let cfg = |beam| DecodeConfig { beam_size: beam, length_penalty_alpha: 0.0, max_len: 2 };
        assert_eq!(beam_search(&t, 0, 1, &[0], &cfg(1)).unwrap(), vec![2]);
        assert_eq!(beam_search(&t, 0, 1, &[0], &cfg(2)).unwrap(), vec![3]);
    }

    #[test]
    fn alpha_zero_matches_exhaustive_search() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let v = 4;
        let end = 1;
        for _ in 0..20 {
            let mut rows = HashMap::new();
            let mut prefixes: Vec<Vec<usize>> = vec![vec![]];
            for _ in 0..3 {
                let mut next = Vec::new();
                for p in &prefixes {
                    let raw: Vec<f64> = (0..v).map(|_| rng.random_range(0.05..1.0)).collect();
                    let z: f64 = raw.iter().sum();
                    rows.insert(p.clone(), raw.iter().map(|x| (x / z).ln()).collect());
                    for t in 0..v {
                        if t != end {
                            let mut q = p.clone();
                            q.push(t);
                            next.push(q);
                        }
                    }
                }
                prefixes = next;
            }
            let table = Table { v, rows };
            // every complete sequence: ends in `end` or reaches length 3
            let mut best: Option<(f64, Vec<usize>)> = None;
            let mut stack: Vec<(Vec<usize>, f64)> = vec![(vec![], 0.0)];
            while let Some((p, lp)) = stack.pop() {
                let row = table.log_probs(&[vec![0], p.clone()].concat()).unwrap();
                for t in 0..v {
                    let mut q = p.clone();
                    q.push(t);
                    let s = lp + row[t];
                    if t == end || q.len() == 3 {
                        let out: Vec<usize> = q.iter().copied().filter(|&x| x != end).collect();
                        if best.as_ref().is_none_or(|(b, _)| s > *b) {
                            best = Some((s, out));
                        }
                    } else {
                        stack.push((q, s));
                    }
                }
            }
            let cfg = DecodeConfig { beam_size: 64, length_penalty_alpha: 0.0, max_len: 3 };
            assert_eq!(beam_search(&table, 0, end, &[], &cfg).unwrap(), best.unwrap().1);
        }
    }

    #[test]
    fn bleu_basics() {
        let h = vec!["the cat sat on the mat .".to_string(), "a b c d e".to_string()];
        assert!((bleu(&h, &h).unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(bleu(&["".to_string()], &["x y z".to_string()]).unwrap(), 0.0);
        assert!(bleu(&[], &[]).is_err());
        let rev: Vec<String> = h.iter().rev().cloned().collect();
        let r = vec!["the cat is on the mat .".to_string(), "a b c x e".to_string()];
        let rr: Vec<String> = r.iter().rev().cloned().collect();
        assert!((bleu(&h, &r).unwrap() - bleu(&rev, &rr).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn bleu_matches_reference_implementation() {
        // sacrebleu 2.6.0 corpus_bleu, tokenize=13a, smooth_method=exp
        let hyps = [
            "The quick brown fox jumps over the lazy dog.",
            "It is raining, so we stay home today!",
            "Hello world",
        ]
        .map(String::from);
        let refs = [
            "The quick brown fox jumped over the lazy dog.",
            "It rains, so we stay at home today.",
            "Hello there world",
        ]
        .map(String::from);
        let score = bleu(&hyps, &refs).unwrap();
        assert!((score - 47.13668886825195).abs() < 0.01, "{score}");
    }

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(tokenize_13a("Hello, world!"), ["Hello", ",", "world", "!"]);
        assert_eq!(tokenize_13a("3.5 and 1,000"), ["3.5", "and", "1,000"]);
    }

    fn brute_edit(a: &[&str], b: &[&str]) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        let sub = brute_edit(&a[1..], &b[1..]) + usize::from(a[0] != b[0]);
        sub.min(brute_edit(&a[1..], b) + 1).min(brute_edit(a, &b[1..]) + 1)
    }

    #[test]
    fn wer_examples_and_oracle() {
        let r = vec!["a b c d e".to_string()];
        assert_eq!(wer(&r, &r).unwrap(), 0.0);
        assert!((wer(&["a b x d e".to_string()], &r).unwrap() - 0.2).abs() < 1e-12);
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let words = ["a", "b", "c"];
        for _ in 0..200 {
            let (la, lb) = (rng.random_range(0..=8), rng.random_range(1..=8));
            let a: Vec<&str> = (0..la).map(|_| words[rng.random_range(0..3)]).collect();
            let b: Vec<&str> = (0..lb).map(|_| words[rng.random_range(0..3)]).collect();
            assert_eq!(edit_distance(&a, &b), brute_edit(&a, &b));
        }
    }

    fn example_with_spans(m: usize, enc_len: usize) -> Example {
        Example {
            id: "x".into(),
            features: Tensor::zeros(4 * enc_len, 2),
            source: (0..m).map(|i| 5 + i).collect(),
            target: None,
            spans: Some((0..m).map(|i| WordSpan { word: format!("w{i}"), tokens: i..i + 1, frames: 0..1, enc: i..i + 1 }).collect()),
        }
    }

    /// Speech frames equal to the matching token rows; embeddings are one-hot.
    fn double_views(e: &Example, enc_len: usize) -> Views {
        let m = e.source.len();
        let mut text = Tensor::zeros(m, m + 1);
        for i in 0..m {
            text.set(i, i, 1.0);
        }
        let mut speech = Tensor::zeros(enc_len, m + 1);
        for j in 0..enc_len {
            if j < m {
                speech.set(j, j, 1.0);
            } else {
                speech.set(j, m, 1.0);
            }
        }
        Views { speech, text }
    }

    #[test]
    fn similarity_with_matching_views() {
        let e = example_with_spans(3, 5);
        let r = similarity_from_views(std::slice::from_ref(&e), |e| Ok(double_views(e, 5))).unwrap();
        assert!((r.word_level_mean_cosine - 1.0).abs() < 1e-12);
        assert_eq!((r.n_words, r.n_sentences), (3, 1));
        let one = example_with_spans(1, 2);
        let r = similarity_from_views(std::slice::from_ref(&one), |e| Ok(double_views(e, 2))).unwrap();
        assert_eq!(r.n_words, 1);
    }

    #[test]
    fn matrices_with_matching_views() {
        let e = example_with_spans(3, 5);
        let m = alignment_from_views(&e, &double_views(&e, 5)).unwrap();
        assert_eq!(m.token_to_frame.shape(), (3, 5));
        for i in 0..3 {
            for j in 0..3 {
                let v = m.word_level.get(i, j);
                if i == j {
                    assert!((v - 1.0).abs() < 1e-12);
                } else {
                    assert!(v.abs() < 1.0);
                }
            }
        }
        assert!((diagonal_margin(&[m.word_level]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn heatmap_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        write_heatmap(&p, &Tensor::from_rows(&[vec![1.0, -1.0], vec![0.0, 0.5]]), 4).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_none());
    }
}
