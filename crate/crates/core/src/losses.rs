//! Training objectives. Each loss computes its value and local gradients
//! analytically and records itself on the graph as a scalar node.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::alignment::WordSpan;
use crate::corpus::bpe::{ASR_BOS, BLANK, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{Dropout, Model};
use crate::tensor::{Graph, PoolKind, Tensor, Var};

/// Where word and sentence vectors are pooled from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolSite {
    /// Speech-encoder output and raw embedding rows.
    BeforeJointEncoder,
    /// Joint-encoder output for both modalities.
    AfterJointEncoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub pooling: PoolKind,
    pub site: PoolSite,
    /// Drop negatives whose word string equals the anchor's.
    pub dedup_negatives: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { tau: 0.2, pooling: PoolKind::Mean, site: PoolSite::BeforeJointEncoder, dedup_negatives: false }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau > 0.0 && self.tau.is_finite() {
            Ok(())
        } else {
            Err(Error::config(format!("contrastive tau must be positive, got {}", self.tau)))
        }
    }
}

/// A speech-side and a text-side vector for the same word.
#[derive(Clone, Debug)]
pub struct PooledPair {
    pub f_s: Var,
    pub f_t: Var,
    pub word: String,
    pub utterance_id: String,
}

/// A tokenized training example. `source` holds transcript ids without
/// sequence markers; `spans` is `None` for utterances that could not be aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub features: Tensor,
    pub source: Vec<usize>,
    pub target: Option<Vec<usize>>,
    pub spans: Option<Vec<WordSpan>>,
}

pub fn pool_word(g: &mut Graph, seq: Var, range: Range<usize>, kind: PoolKind) -> Result<Var> {
    let n = g.value(seq).rows();
    if range.is_empty() || range.end > n {
        return Err(Error::data(format!("pooling range {range:?} is empty or outside {n} rows")));
    }
    Ok(g.pool_rows(seq, range.start, range.end, kind))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::data("cosine similarity of a zero vector"));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Value and gradients of the speech-anchored N-pair loss.
///
/// For anchor `i` the candidates are every text vector in the batch (or, with
/// `words`, every one whose word differs from the anchor's, plus the positive);
/// the loss is the mean over anchors of `-log softmax(cos/tau)` at the positive.
pub fn contrastive(
    anchors: &[Vec<f64>],
    positives: &[Vec<f64>],
    words: Option<&[String]>,
    tau: f64,
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let n = anchors.len();
    if n == 0 {
        return Err(Error::NoAlignablePairs);
    }
    if positives.len() != n {
        return Err(Error::data("anchor and positive counts differ"));
    }
    if !(tau > 0.0) {
        return Err(Error::config(format!("contrastive tau must be positive, got {tau}")));
    }
    let norms = |vs: &[Vec<f64>]| -> Result<Vec<f64>> {
        vs.iter()
            .map(|v| {
                let n = dot(v, v).sqrt();
                if n > 0.0 && n.is_finite() {
                    Ok(n)
                } else {
                    Err(Error::NonFinite("contrastive input norm".into()))
                }
            })
            .collect()
    };
    let (na, nb) = (norms(anchors)?, norms(positives)?);
    let d = anchors[0].len();
    let mut ga = vec![vec![0.0; d]; n];
    let mut gb = vec![vec![0.0; d]; n];
    let mut total = 0.0;
    let mut cos = vec![0.0; n];
    let mut prob = vec![0.0; n];
    for i in 0..n {
        let candidate = |j: usize| j == i || words.is_none_or(|w| w[j] != w[i]);
        for j in 0..n {
            cos[j] = if candidate(j) { dot(&anchors[i], &positives[j]) / (na[i] * nb[j]) } else { 0.0 };
        }
        let max = (0..n).filter(|&j| candidate(j)).map(|j| cos[j] / tau).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..n {
            prob[j] = if candidate(j) { (cos[j] / tau - max).exp() } else { 0.0 };
            z += prob[j];
        }
        prob.iter_mut().for_each(|p| *p /= z);
        total += -(cos[i] / tau - max) + z.ln();
        for j in (0..n).filter(|&j| candidate(j)) {
            // dL/dcos_ij, already divided by the anchor count
            let w = (prob[j] - if j == i { 1.0 } else { 0.0 }) / (tau * n as f64);
            if w == 0.0 {
                continue;
            }
            let c = cos[j];
            for k in 0..d {
                ga[i][k] += w * (positives[j][k] / (na[i] * nb[j]) - c * anchors[i][k] / (na[i] * na[i]));
                gb[j][k] += w * (anchors[i][k] / (na[i] * nb[j]) - c * positives[j][k] / (nb[j] * nb[j]));
            }
        }
    }
    Ok((total / n as f64, ga, gb))
}

/// Records the contrastive loss over `pairs` on the graph.
pub fn waco_ctr(g: &mut Graph, pairs: &[PooledPair], cfg: &ContrastiveConfig) -> Result<Var> {
    cfg.validate()?;
    let anchors: Vec<Vec<f64>> = pairs.iter().map(|p| g.value(p.f_s).data().to_vec()).collect();
    let positives: Vec<Vec<f64>> = pairs.iter().map(|p| g.value(p.f_t).data().to_vec()).collect();
    let words: Vec<String> = pairs.iter().map(|p| p.word.to_lowercase()).collect();
    let (loss, ga, gb) = contrastive(&anchors, &positives, cfg.dedup_negatives.then_some(&words[..]), cfg.tau)?;
    let mut local = Vec::with_capacity(2 * pairs.len());
    for ((p, a), b) in pairs.iter().zip(ga).zip(gb) {
        local.push((p.f_s, Tensor::row_vector(a)));
        local.push((p.f_t, Tensor::row_vector(b)));
    }
    Ok(g.scalar_loss(loss, local))
}

/// Sentence-level contrastive loss: one mean-pooled pair per utterance.
pub fn sent_ctr(g: &mut Graph, speech: &[Var], text: &[Var], tau: f64) -> Result<Var> {
    if speech.len() != text.len() {
        return Err(Error::data("speech and text sentence counts differ"));
    }
    let mut pairs = Vec::with_capacity(speech.len());
    for (i, (&s, &t)) in speech.iter().zip(text).enumerate() {
        let (ns, nt) = (g.value(s).rows(), g.value(t).rows());
        pairs.push(PooledPair {
            f_s: pool_word(g, s, 0..ns, PoolKind::Mean)?,
            f_t: pool_word(g, t, 0..nt, PoolKind::Mean)?,
            word: i.to_string(),
            utterance_id: i.to_string(),
        });
    }
    waco_ctr(g, &pairs, &ContrastiveConfig { tau, ..ContrastiveConfig::default() })
}

fn log_softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Fewest frames that can emit `target` under CTC.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// CTC negative log-likelihood of `target` under per-frame `logits`, and its
/// gradient with respect to the logits.
pub fn ctc(logits: &Tensor, target: &[usize], blank: usize) -> Result<(f64, Tensor)> {
    let (t_len, v) = logits.shape();
    if target.iter().any(|&k| k == blank || k >= v) {
        return Err(Error::data("CTC target contains the blank or an out-of-range id"));
    }
    if t_len < ctc_min_frames(target).max(1) {
        return Err(Error::data(format!(
            "CTC target of {} tokens needs at least {} frames, got {t_len}",
            target.len(),
            ctc_min_frames(target)
        )));
    }
    let lp = log_softmax_rows(logits);
    let labels: Vec<usize> =
        std::iter::once(blank).chain(target.iter().flat_map(|&k| [k, blank])).collect();
    let s_len = labels.len();
    let ninf = f64::NEG_INFINITY;
    let skip_ok = |s: usize| s >= 2 && labels[s] != blank && labels[s] != labels[s - 2];
    let mut alpha = vec![vec![ninf; s_len]; t_len];
    alpha[0][0] = lp.get(0, labels[0]);
    if s_len > 1 {
        alpha[0][1] = lp.get(0, labels[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[t - 1][s];
            if s >= 1 {
                a = log_add(a, alpha[t - 1][s - 1]);
            }
            if skip_ok(s) {
                a = log_add(a, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = a + lp.get(t, labels[s]);
        }
    }
    // beta[t][s]: log-prob of emitting the rest after frame t, being at s at t
    let mut beta = vec![vec![ninf; s_len]; t_len];
    beta[t_len - 1][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[t_len - 1][s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[t + 1][s] + lp.get(t + 1, labels[s]);
            if s + 1 < s_len {
                b = log_add(b, beta[t + 1][s + 1] + lp.get(t + 1, labels[s + 1]));
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = log_add(b, beta[t + 1][s + 2] + lp.get(t + 1, labels[s + 2]));
            }
            beta[t][s] = b;
        }
    }
    let mut log_p = alpha[t_len - 1][s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[t_len - 1][s_len - 2]);
    }
    if !log_p.is_finite() {
        return Err(Error::NonFinite("CTC likelihood".into()));
    }
    let mut grad = Tensor::zeros(t_len, v);
    for t in 0..t_len {
        let mut occ = vec![ninf; v];
        for s in 0..s_len {
            occ[labels[s]] = log_add(occ[labels[s]], alpha[t][s] + beta[t][s]);
        }
        let row = grad.row_mut(t);
        for k in 0..v {
            row[k] = lp.get(t, k).exp() - (occ[k] - log_p).exp();
        }
    }
    Ok((-log_p, grad))
}

/// Records a CTC loss on the graph.
pub fn ctc_loss(g: &mut Graph, logits: Var, target: &[usize]) -> Result<Var> {
    let (loss, grad) = ctc(g.value(logits), target, BLANK)?;
    Ok(g.scalar_loss(loss, vec![(logits, grad)]))
}

/// Label-smoothed cross-entropy, averaged over non-pad positions, and its
/// gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], epsilon: f64) -> Result<(f64, Tensor)> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::config(format!("label smoothing {epsilon} must lie in [0, 1)")));
    }
    let (n, v) = logits.shape();
    if targets.len() != n {
        return Err(Error::data(format!("{} targets for {n} logit rows", targets.len())));
    }
    let count = targets.iter().filter(|&&t| t != PAD).count();
    if count == 0 {
        return Err(Error::data("cross-entropy over an all-pad target"));
    }
    let lp = log_softmax_rows(logits);
    let mut grad = Tensor::zeros(n, v);
    let mut total = 0.0;
    let off = epsilon / v as f64;
    for (r, &t) in targets.iter().enumerate() {
        if t == PAD {
            continue;
        }
        if t >= v {
            return Err(Error::data(format!("target id {t} outside vocabulary of {v}")));
        }
        let row = lp.row(r);
        let g = grad.row_mut(r);
        for k in 0..v {
            let q = off + if k == t { 1.0 - epsilon } else { 0.0 };
            total -= q * row[k];
            g[k] = (row[k].exp() - q) / count as f64;
        }
    }
    Ok((total / count as f64, grad))
}

pub fn ce_label_smooth(g: &mut Graph, logits: Var, targets: &[usize], epsilon: f64) -> Result<Var> {
    let (loss, grad) = cross_entropy(g.value(logits), targets, epsilon)?;
    Ok(g.scalar_loss(loss, vec![(logits, grad)]))
}

/// Decoder input and output sequences for a target under a start token.
pub fn teacher_forcing(start: usize, tokens: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let input = std::iter::once(start).chain(tokens.iter().copied()).collect();
    let output = tokens.iter().copied().chain(std::iter::once(EOS)).collect();
    (input, output)
}

/// Sum of scalar nodes, scaled by `weight`.
fn weighted_sum(g: &mut Graph, terms: &[Var], weight: f64) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    if weight == 1.0 {
        acc
    } else {
        g.scale(acc, weight)
    }
}

/// Speech-side pretraining objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainObjective {
    /// Word-aligned contrastive loss.
    Waco,
    /// Sentence-level contrastive loss.
    Const,
    /// CTC against the transcript through the tied head.
    Ctc,
}

/// Pretraining loss for one batch of transcribed speech.
pub fn loss_pt(
    model: &Model,
    g: &mut Graph,
    batch: &[&Example],
    objective: PretrainObjective,
    cfg: &ContrastiveConfig,
    drop: &mut Dropout,
) -> Result<Var> {
    cfg.validate()?;
    let after = cfg.site == PoolSite::AfterJointEncoder;
    let speech_side = |g: &mut Graph, e: &Example, drop: &mut Dropout| -> Result<Var> {
        let s = model.speech_encoder(g, &e.features, drop)?;
        if after {
            let x = model.speech_input(g, s)?;
            Ok(model.joint_encoder(g, x, drop))
        } else {
            Ok(s)
        }
    };
    let text_side = |g: &mut Graph, e: &Example, drop: &mut Dropout| -> Result<Var> {
        if after {
            let x = model.text_input(g, &e.source)?;
            Ok(model.joint_encoder(g, x, drop))
        } else {
            model.embed_raw(g, &e.source)
        }
    };
    match objective {
        PretrainObjective::Waco => {
            let mut pairs = Vec::new();
            for e in batch {
                let Some(spans) = e.spans.as_deref().filter(|s| !s.is_empty()) else { continue };
                let s = speech_side(g, e, drop)?;
                let t = text_side(g, e, drop)?;
                for span in spans {
                    pairs.push(PooledPair {
                        f_s: pool_word(g, s, span.enc.clone(), cfg.pooling)?,
                        f_t: pool_word(g, t, span.tokens.clone(), cfg.pooling)?,
                        word: span.word.clone(),
                        utterance_id: e.id.clone(),
                    });
                }
            }
            if pairs.is_empty() {
                return Err(Error::NoAlignablePairs);
            }
            waco_ctr(g, &pairs, cfg)
        }
        PretrainObjective::Const => {
            let mut speech = Vec::with_capacity(batch.len());
            let mut text = Vec::with_capacity(batch.len());
            for e in batch {
                speech.push(speech_side(g, e, drop)?);
                text.push(text_side(g, e, drop)?);
            }
            if speech.is_empty() {
                return Err(Error::NoAlignablePairs);
            }
            sent_ctr(g, &speech, &text, cfg.tau)
        }
        PretrainObjective::Ctc => {
            if batch.is_empty() {
                return Err(Error::data("empty pretraining batch"));
            }
            let mut terms = Vec::with_capacity(batch.len());
            for e in batch {
                let s = model.speech_encoder(g, &e.features, drop)?;
                let logits = model.ctc_head(g, s);
                terms.push(ctc_loss(g, logits, &e.source).map_err(|err| Error::data(format!("{}: {err}", e.id)))?);
            }
            Ok(weighted_sum(g, &terms, 1.0 / batch.len() as f64))
        }
    }
}

/// Values of the fine-tuning terms for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub st: f64,
    pub mt: f64,
    pub asr: f64,
    pub ctr: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneLossConfig {
    pub lambda: f64,
    pub label_smoothing: f64,
    pub contrastive: ContrastiveConfig,
}

impl Default for FinetuneLossConfig {
    fn default() -> Self {
        Self { lambda: 0.0, label_smoothing: 0.1, contrastive: ContrastiveConfig::default() }
    }
}

/// Fine-tuning loss: speech→target, transcript→target and speech→transcript
/// cross-entropies (each averaged over the batch) summed, plus `lambda` times
/// the word-aligned contrastive loss.
pub fn loss_ft(
    model: &Model,
    g: &mut Graph,
    batch: &[&Example],
    cfg: &FinetuneLossConfig,
    drop: &mut Dropout,
) -> Result<(Var, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::data("empty fine-tuning batch"));
    }
    let (mut st, mut mt, mut asr) = (Vec::new(), Vec::new(), Vec::new());
    let mut pairs = Vec::new();
    for e in batch {
        let target = e.target.as_ref().ok_or_else(|| Error::data(format!("{} has no translation", e.id)))?;
        let s = model.speech_encoder(g, &e.features, drop)?;
        let sx = model.speech_input(g, s)?;
        let speech_mem = model.joint_encoder(g, sx, drop);
        let tx = model.text_input(g, &e.source)?;
        let text_mem = model.joint_encoder(g, tx, drop);

        let (y_in, y_out) = teacher_forcing(BOS, target);
        let logits = model.decoder(g, speech_mem, &y_in, drop)?;
        st.push(ce_label_smooth(g, logits, &y_out, cfg.label_smoothing)?);
        let logits = model.decoder(g, text_mem, &y_in, drop)?;
        mt.push(ce_label_smooth(g, logits, &y_out, cfg.label_smoothing)?);
        let (x_in, x_out) = teacher_forcing(ASR_BOS, &e.source);
        let logits = model.decoder(g, speech_mem, &x_in, drop)?;
        asr.push(ce_label_smooth(g, logits, &x_out, cfg.label_smoothing)?);

        if cfg.lambda != 0.0 {
            if let Some(spans) = &e.spans {
                let t = model.embed_raw(g, &e.source)?;
                for span in spans {
                    pairs.push(PooledPair {
                        f_s: pool_word(g, s, span.enc.clone(), cfg.contrastive.pooling)?,
                        f_t: pool_word(g, t, span.tokens.clone(), cfg.contrastive.pooling)?,
                        word: span.word.clone(),
                        utterance_id: e.id.clone(),
                    });
                }
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    let st = weighted_sum(g, &st, inv);
    let mt = weighted_sum(g, &mt, inv);
    let asr = weighted_sum(g, &asr, inv);
    let mut total = weighted_sum(g, &[st, mt, asr], 1.0);
    let mut breakdown = LossBreakdown {
        st: g.value(st).item(),
        mt: g.value(mt).item(),
        asr: g.value(asr).item(),
        ..LossBreakdown::default()
    };
    if cfg.lambda != 0.0 && !pairs.is_empty() {
        let ctr = waco_ctr(g, &pairs, &cfg.contrastive)?;
        breakdown.ctr = g.value(ctr).item();
        let weighted = g.scale(ctr, cfg.lambda);
        total = g.add(total, weighted);
    }
    breakdown.total = g.value(total).item();
    Ok((total, breakdown))
}
