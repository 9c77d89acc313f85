//! Optimizer, schedule, batching and the three training stages: text
//! pretraining, speech pretraining and multi-task fine-tuning.

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{build_spans, Aligned};
use crate::corpus::bpe::{BpeVocab, BOS};
use crate::corpus::{TextPair, Utterance};
use crate::error::{Error, Result};
use crate::eval::{self, DecodeConfig};
use crate::losses::{
    ce_label_smooth, ctc_min_frames, loss_ft, loss_pt, teacher_forcing, ContrastiveConfig, Example, FinetuneLossConfig,
    PretrainObjective,
};
use crate::model::{Dropout, Model, ParamGroup};
use crate::tensor::{Grads, Graph, Params, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Batch size limit: input frames for speech stages, source plus target
    /// tokens for the text stage.
    pub frame_budget_per_batch: usize,
    pub max_steps: usize,
    pub eval_interval: usize,
    pub keep_last_k: usize,
    pub clip_norm: f64,
    pub label_smoothing: f64,
    pub lambda: f64,
    pub contrastive: ContrastiveConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            warmup_steps: 200,
            betas: [0.9, 0.98],
            adam_eps: 1e-8,
            weight_decay: 0.0,
            frame_budget_per_batch: 800,
            max_steps: 3000,
            eval_interval: 250,
            keep_last_k: 10,
            clip_norm: 5.0,
            label_smoothing: 0.1,
            lambda: 0.0,
            contrastive: ContrastiveConfig::default(),
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, name: &str) -> Result<()> {
        let mut problems = Vec::new();
        let mut bad = |key: &str, why: &str| problems.push(format!("{name}.{key} {why}"));
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            bad("peak_lr", "must be positive");
        }
        if self.warmup_steps == 0 {
            bad("warmup_steps", "must be >= 1");
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            bad("betas", "must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            bad("adam_eps", "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            bad("weight_decay", "must be >= 0");
        }
        if self.frame_budget_per_batch == 0 {
            bad("frame_budget_per_batch", "must be positive");
        }
        if self.eval_interval == 0 {
            bad("eval_interval", "must be positive");
        }
        if self.keep_last_k == 0 {
            bad("keep_last_k", "must be >= 1");
        }
        if !(self.clip_norm > 0.0) {
            bad("clip_norm", "must be positive");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            bad("label_smoothing", "must lie in [0, 1)");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            bad("lambda", "must be finite and >= 0");
        }
        if !(self.contrastive.tau > 0.0 && self.contrastive.tau.is_finite()) {
            bad("contrastive.tau", "must be positive");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }
}

/// Linear warmup to `peak` over `warmup` steps, then inverse square-root decay.
pub fn lr_schedule(step: usize, peak: f64, warmup: usize) -> f64 {
    let (s, w) = (step.max(1) as f64, warmup.max(1) as f64);
    peak * (s / w).min((w / s).sqrt())
}

/// Mixes a stream tag into a seed (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed.wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Bias-corrected Adam with optional decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &Params, betas: [f64; 2], eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Self { betas, eps, weight_decay, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update to every parameter marked trainable. A trainable
    /// parameter without a gradient slot is updated as if its gradient were 0.
    pub fn update(&mut self, params: &mut Params, grads: &Grads, trainable: &[bool], lr: f64) -> Result<()> {
        for (id, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", params.name(id))));
            }
        }
        self.step += 1;
        let [b1, b2] = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for id in (0..params.len()).filter(|&id| trainable[id]) {
            let grad = grads.get(id);
            let p = params.get_mut(id).data_mut();
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            for k in 0..p.len() {
                let gk = grad.map_or(0.0, |g| g.data()[k]);
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                p[k] -= lr * (update + self.weight_decay * p[k]);
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

const BUCKET_WINDOW: usize = 64;

/// One epoch of batches over items with the given lengths.
///
/// Items are drawn in a seeded random order; each window of consecutive draws is
/// sorted by length and cut greedily so that a batch's total length stays
/// within `budget` (an item longer than the budget forms its own batch). The
/// batch order is then shuffled.
pub fn make_batches(lengths: &[usize], budget: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(&mut rng);
    for window in order.chunks_mut(BUCKET_WINDOW) {
        window.sort_by_key(|&i| lengths[i]);
    }
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut total = 0;
    for i in order {
        if !current.is_empty() && total + lengths[i] > budget {
            batches.push(std::mem::take(&mut current));
            total = 0;
        }
        current.push(i);
        total += lengths[i];
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches.shuffle(&mut rng);
    batches
}

/// Fraction of padded positions if every batch were padded to its longest item.
pub fn padding_fraction(lengths: &[usize], batches: &[Vec<usize>]) -> f64 {
    let (mut padded, mut real) = (0usize, 0usize);
    for b in batches {
        let max = b.iter().map(|&i| lengths[i]).max().unwrap_or(0);
        padded += max * b.len();
        real += b.iter().map(|&i| lengths[i]).sum::<usize>();
    }
    if padded == 0 {
        0.0
    } else {
        (padded - real) as f64 / padded as f64
    }
}

/// Endless batch sequence; epoch `e` is shuffled with a seed derived from `e`.
struct BatchStream<'a> {
    lengths: &'a [usize],
    budget: usize,
    seed: u64,
    epoch: u64,
    pending: VecDeque<Vec<usize>>,
}

impl<'a> BatchStream<'a> {
    fn new(lengths: &'a [usize], budget: usize, seed: u64) -> Self {
        Self { lengths, budget, seed, epoch: 0, pending: VecDeque::new() }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.pending.is_empty() {
            self.pending = make_batches(self.lengths, self.budget, derive_seed(self.seed, self.epoch)).into();
            self.epoch += 1;
        }
        self.pending.pop_front().expect("non-empty epoch")
    }
}

/// One line of a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: String,
    pub lr: f64,
    pub loss: BTreeMap<String, f64>,
    pub grad_norm: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev: Option<f64>,
}

pub fn log_to_jsonl(records: &[StepRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
}

/// How a stage picks its output parameters.
#[derive(Clone, Copy, Debug)]
enum Selection {
    /// Keep the single best evaluation, including the initial parameters.
    Best { higher_is_better: bool },
    /// Save at every evaluation that matches or beats the best so far; the
    /// output is the mean of the last `k` saves.
    Ring { k: usize },
}

pub struct StageOutput {
    pub model: Model,
    pub log: Vec<StepRecord>,
    /// Metric of the selected parameters (for ring selection, of the best save).
    pub best_metric: f64,
    /// Metric of the parameters the stage started from, when measured.
    pub initial_metric: Option<f64>,
    /// Steps of the checkpoints in the final ring, oldest first.
    pub ring_steps: Vec<usize>,
}

type StepLoss<'a> = dyn FnMut(&Model, &mut Graph, &[usize], &mut Dropout) -> Result<(Var, BTreeMap<String, f64>)> + 'a;
type Evaluate<'a> = dyn FnMut(&Model) -> Result<f64> + 'a;

struct Stage<'a> {
    name: &'static str,
    cfg: &'a TrainConfig,
    trainable: Vec<bool>,
    lengths: Vec<usize>,
    selection: Selection,
    ckpt_dir: Option<&'a Path>,
}

fn ring_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("ckpt_{step}.waco"))
}

impl Stage<'_> {
    fn run(self, mut model: Model, step_loss: &mut StepLoss, evaluate: &mut Evaluate) -> Result<StageOutput> {
        let cfg = self.cfg;
        if self.lengths.is_empty() {
            return Err(Error::data(format!("{} stage has no training data", self.name)));
        }
        let mut adam = Adam::new(&model.params, cfg.betas, cfg.adam_eps, cfg.weight_decay);
        let mut batches = BatchStream::new(&self.lengths, cfg.frame_budget_per_batch, derive_seed(cfg.seed, 1));
        let mut log = Vec::with_capacity(cfg.max_steps);
        let better = |a: f64, b: f64, higher: bool| if higher { a > b } else { a < b };

        let mut best: Option<(f64, Model)> = None;
        let mut ring: VecDeque<(usize, Model)> = VecDeque::new();
        let mut best_metric = f64::NEG_INFINITY;
        let mut initial_metric = None;
        if let Selection::Best { .. } = self.selection {
            let m = evaluate(&model)?;
            initial_metric = Some(m);
            best = Some((m, model.clone()));
        }
        if let Some(dir) = self.ckpt_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }

        for step in 1..=cfg.max_steps {
            let batch = batches.next_batch();
            let mut drop = Dropout::train(model.config.dropout, derive_seed(cfg.seed, 1_000_000 + step as u64));
            let mut grads = model.params.zeros_like();
            let terms = {
                let mut g = Graph::new(&model.params);
                let (loss, terms) = step_loss(&model, &mut g, &batch, &mut drop)?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("{} loss at step {step}", self.name)));
                }
                g.backward(vec![(loss, Tensor::scalar(1.0))], &mut grads);
                terms
            };
            grads.retain(|id| self.trainable[id]);
            let grad_norm = clip_grad_norm(&mut grads, cfg.clip_norm);
            if !grad_norm.is_finite() {
                let name = grads
                    .iter()
                    .find(|(_, g)| !g.is_finite())
                    .map_or("unknown tensor", |(id, _)| model.params.name(id))
                    .to_string();
                return Err(Error::NonFinite(format!("gradient of {name} at step {step}")));
            }
            let lr = lr_schedule(step, cfg.peak_lr, cfg.warmup_steps);
            adam.update(&mut model.params, &grads, &self.trainable, lr)?;

            let mut record =
                StepRecord { step, stage: self.name.into(), lr, loss: terms, grad_norm, seed: cfg.seed, dev: None };
            if step % cfg.eval_interval == 0 || step == cfg.max_steps {
                let metric = evaluate(&model)?;
                record.dev = Some(metric);
                match self.selection {
                    Selection::Best { higher_is_better } => {
                        if best.as_ref().is_none_or(|(b, _)| better(metric, *b, higher_is_better)) {
                            best = Some((metric, model.clone()));
                        }
                    }
                    Selection::Ring { k } => {
                        if metric >= best_metric {
                            best_metric = metric;
                            let mut saved = model.clone();
                            saved.round_to_f32();
                            if let Some(dir) = self.ckpt_dir {
                                saved.save(&ring_path(dir, step))?;
                            }
                            ring.push_back((step, saved));
                            if ring.len() > k {
                                let (old, _) = ring.pop_front().expect("ring is non-empty");
                                if let Some(dir) = self.ckpt_dir {
                                    let p = ring_path(dir, old);
                                    std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                                }
                            }
                        }
                    }
                }
            }
            log.push(record);
        }

        match self.selection {
            Selection::Best { .. } => {
                let (metric, model) = best.expect("initial evaluation recorded");
                Ok(StageOutput { model, log, best_metric: metric, initial_metric, ring_steps: Vec::new() })
            }
            Selection::Ring { .. } => {
                let ring_steps = ring.iter().map(|(s, _)| *s).collect();
                let saves: Vec<Model> = ring.into_iter().map(|(_, m)| m).collect();
                let model = if saves.is_empty() { model } else { Model::average(&saves)? };
                Ok(StageOutput { model, log, best_metric, initial_metric, ring_steps })
            }
        }
    }
}

fn trainable_mask(model: &Model, groups: &[ParamGroup]) -> Vec<bool> {
    (0..model.params.len()).map(|id| groups.contains(&model.param_group(id))).collect()
}

/// Tokenized text pair for the text stage.
#[derive(Clone, Debug, PartialEq)]
pub struct TextExample {
    pub id: String,
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

pub fn prepare_text(pairs: &[TextPair], vocab: &BpeVocab) -> Result<Vec<TextExample>> {
    pairs
        .iter()
        .map(|p| {
            Ok(TextExample {
                id: p.id.clone(),
                source: vocab.encode(&p.source).map_err(|e| Error::data(format!("{}: {e}", p.id)))?,
                target: vocab.encode(&p.target).map_err(|e| Error::data(format!("{}: {e}", p.id)))?,
            })
        })
        .collect()
}

/// Text pairs carried by speech triplets (their transcript and translation).
pub fn text_of(utterances: &[Utterance]) -> Result<Vec<TextPair>> {
    utterances
        .iter()
        .map(|u| {
            let target = u.translation.clone().ok_or_else(|| Error::data(format!("{} has no translation", u.id)))?;
            Ok(TextPair { id: u.id.clone(), source: u.transcript.clone(), target })
        })
        .collect()
}

/// Which fields of an utterance a stage may read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Needs {
    pub spans: bool,
    pub translation: bool,
}

pub fn prepare_speech(
    utterances: &[Utterance],
    vocab: &BpeVocab,
    model: &Model,
    needs: Needs,
) -> Result<Vec<Example>> {
    utterances
        .iter()
        .map(|u| {
            let source = vocab.encode(&u.transcript).map_err(|e| Error::data(format!("{}: {e}", u.id)))?;
            let target = if needs.translation {
                let t = u.translation.as_ref().ok_or_else(|| Error::data(format!("{} has no translation", u.id)))?;
                Some(vocab.encode(t).map_err(|e| Error::data(format!("{}: {e}", u.id)))?)
            } else {
                None
            };
            let spans = if needs.spans {
                match build_spans(u, vocab, model.config.enc_len(u.n_frames()))? {
                    Aligned::Spans(s) => Some(s),
                    Aligned::Skipped(_) => None,
                }
            } else {
                None
            };
            Ok(Example { id: u.id.clone(), features: u.features.clone(), source, target, spans })
        })
        .collect()
}

fn decode_cfg_for_dev() -> DecodeConfig {
    DecodeConfig { beam_size: 1, length_penalty_alpha: 0.0, max_len: 60 }
}

/// Trains the embedding, joint encoder and decoder on text pairs and keeps
/// the parameters with the best dev BLEU (greedy decoding).
pub fn pretrain_mt(
    model: Model,
    train: &[TextExample],
    dev: &[TextExample],
    vocab: &BpeVocab,
    cfg: &TrainConfig,
) -> Result<StageOutput> {
    cfg.validate("pretrain_mt")?;
    let stage = Stage {
        name: "pretrain_mt",
        cfg,
        trainable: trainable_mask(&model, &[ParamGroup::Embedding, ParamGroup::JointEncoder, ParamGroup::Decoder]),
        lengths: train.iter().map(|e| e.source.len() + e.target.len()).collect(),
        selection: Selection::Best { higher_is_better: true },
        ckpt_dir: None,
    };
    let mut step_loss = |m: &Model, g: &mut Graph, batch: &[usize], drop: &mut Dropout| {
        let mut terms = Vec::with_capacity(batch.len());
        for &i in batch {
            let e = &train[i];
            let x = m.text_input(g, &e.source)?;
            let mem = m.joint_encoder(g, x, drop);
            let (y_in, y_out) = teacher_forcing(BOS, &e.target);
            let logits = m.decoder(g, mem, &y_in, drop)?;
            terms.push(ce_label_smooth(g, logits, &y_out, cfg.label_smoothing)?);
        }
        let loss = mean_of(g, &terms);
        let value = g.value(loss).item();
        Ok((loss, BTreeMap::from([("mt".to_string(), value)])))
    };
    let mut evaluate = |m: &Model| {
        let hyps: Vec<String> = dev
            .iter()
            .map(|e| eval::translate_text(m, vocab, &e.source, &decode_cfg_for_dev()))
            .collect::<Result<_>>()?;
        let refs: Vec<String> = dev.iter().map(|e| vocab.decode_to_string(&e.target)).collect();
        eval::bleu(&hyps, &refs)
    };
    stage.run(model, &mut step_loss, &mut evaluate)
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

/// Speech-side pretraining on transcribed speech. Only the speech encoder
/// (and, for CTC, the blank vector and output bias) is updated; the text side
/// stays as the text stage left it. Keeps the parameters with the lowest dev
/// loss of the same objective. Utterances the objective cannot use (no
/// alignable word for WACO, too few frames for CTC) are left out.
pub fn pretrain_speech(
    model: Model,
    objective: PretrainObjective,
    train: &[Example],
    dev: &[Example],
    cfg: &TrainConfig,
) -> Result<StageOutput> {
    cfg.validate("pretrain")?;
    cfg.contrastive.validate()?;
    let mut groups = vec![ParamGroup::Speech];
    if objective == PretrainObjective::Ctc {
        groups.push(ParamGroup::Ctc);
    }
    let fits = |e: &Example| match objective {
        PretrainObjective::Waco => e.spans.as_ref().is_some_and(|s| !s.is_empty()),
        PretrainObjective::Const => true,
        PretrainObjective::Ctc => model.config.enc_len(e.features.rows()) >= ctc_min_frames(&e.source).max(1),
    };
    let usable: Vec<usize> = (0..train.len()).filter(|&i| fits(&train[i])).collect();
    let dev: Vec<Example> = dev.iter().filter(|e| fits(e)).cloned().collect();
    if usable.is_empty() {
        return Err(Error::NoAlignablePairs);
    }
    let stage = Stage {
        name: "pretrain",
        cfg,
        trainable: trainable_mask(&model, &groups),
        lengths: usable.iter().map(|&i| train[i].features.rows()).collect(),
        selection: Selection::Best { higher_is_better: false },
        ckpt_dir: None,
    };
    let name = match objective {
        PretrainObjective::Waco => "waco",
        PretrainObjective::Const => "const",
        PretrainObjective::Ctc => "ctc",
    };
    let mut step_loss = |m: &Model, g: &mut Graph, batch: &[usize], drop: &mut Dropout| {
        let examples: Vec<&Example> = batch.iter().map(|&i| &train[usable[i]]).collect();
        let loss = loss_pt(m, g, &examples, objective, &cfg.contrastive, drop)?;
        let value = g.value(loss).item();
        Ok((loss, BTreeMap::from([(name.to_string(), value)])))
    };
    let dev_lengths: Vec<usize> = dev.iter().map(|e| e.features.rows()).collect();
    let dev_batches = make_batches(&dev_lengths, cfg.frame_budget_per_batch, 0);
    let mut evaluate = |m: &Model| dev_pretrain_loss(m, objective, &dev, &dev_batches, &cfg.contrastive);
    stage.run(model, &mut step_loss, &mut evaluate)
}

/// Mean eval-mode pretraining loss over fixed dev batches; batches without
/// alignable pairs are skipped.
pub fn dev_pretrain_loss(
    model: &Model,
    objective: PretrainObjective,
    dev: &[Example],
    batches: &[Vec<usize>],
    cfg: &ContrastiveConfig,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for b in batches {
        let examples: Vec<&Example> = b.iter().map(|&i| &dev[i]).collect();
        let mut g = Graph::new(&model.params);
        match loss_pt(model, &mut g, &examples, objective, cfg, &mut Dropout::eval()) {
            Ok(v) => {
                total += g.value(v).item();
                n += 1;
            }
            Err(Error::NoAlignablePairs) => {}
            Err(e) => return Err(e),
        }
    }
    if n == 0 {
        return Err(Error::NoAlignablePairs);
    }
    Ok(total / n as f64)
}

/// Multi-task fine-tuning on speech triplets. Saves a checkpoint at each
/// evaluation whose dev BLEU (greedy speech decoding) matches or beats the
/// best so far, and returns the mean of the last `keep_last_k` saves.
pub fn finetune(
    model: Model,
    train: &[Example],
    dev: &[Example],
    vocab: &BpeVocab,
    cfg: &TrainConfig,
    ckpt_dir: Option<&Path>,
) -> Result<StageOutput> {
    cfg.validate("finetune")?;
    let loss_cfg =
        FinetuneLossConfig { lambda: cfg.lambda, label_smoothing: cfg.label_smoothing, contrastive: cfg.contrastive.clone() };
    let stage = Stage {
        name: "finetune",
        cfg,
        trainable: vec![true; model.params.len()],
        lengths: train.iter().map(|e| e.features.rows()).collect(),
        selection: Selection::Ring { k: cfg.keep_last_k },
        ckpt_dir,
    };
    let mut step_loss = |m: &Model, g: &mut Graph, batch: &[usize], drop: &mut Dropout| {
        let examples: Vec<&Example> = batch.iter().map(|&i| &train[i]).collect();
        let (loss, b) = loss_ft(m, g, &examples, &loss_cfg, drop)?;
        let mut terms = BTreeMap::from([
            ("st".to_string(), b.st),
            ("mt".to_string(), b.mt),
            ("asr".to_string(), b.asr),
            ("total".to_string(), b.total),
        ]);
        if loss_cfg.lambda != 0.0 {
            terms.insert("ctr".into(), b.ctr);
        }
        Ok((loss, terms))
    };
    let mut evaluate = |m: &Model| eval::speech_bleu(m, vocab, dev, &decode_cfg_for_dev());
    stage.run(model, &mut step_loss, &mut evaluate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let peak = 1e-3;
        assert!((lr_schedule(200, peak, 200) - peak).abs() < 1e-18);
        assert!((lr_schedule(800, peak, 200) - peak / 2.0).abs() < 1e-18);
        assert!((lr_schedule(100, peak, 200) - peak / 2.0).abs() < 1e-18);
        assert!(lr_schedule(1, peak, 1) == peak);
    }

    #[test]
    fn adam_single_step_closed_form() {
        // f(θ) = θ²/2 at θ = 1: g = 1, m̂ = 1, v̂ = 1
        let mut params = Params::new();
        params.insert("theta", Tensor::scalar(1.0));
        let mut adam = Adam::new(&params, [0.9, 0.98], 1e-8, 0.0);
        let mut grads = params.zeros_like();
        grads.merge({
            let mut g = Grads::new(1);
            let mut graph = Graph::new(&params);
            let th = graph.param(0);
            let v = graph.value(th).clone();
            let loss = graph.scalar_loss(0.5, vec![(th, v)]);
            graph.backward(vec![(loss, Tensor::scalar(1.0))], &mut g);
            g
        });
        adam.update(&mut params, &grads, &[true], 0.01).unwrap();
        let expect = 1.0 - 0.01 * 1.0 / (1.0 + 1e-8);
        assert!((params.get(0).item() - expect).abs() < 1e-15);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_zero_grads_leave_params() {
        let mut params = Params::new();
        params.insert("a", Tensor::from_rows(&[vec![1.0, -2.0]]));
        let before = params.clone();
        let mut adam = Adam::new(&params, [0.9, 0.98], 1e-8, 0.0);
        let zeros = params.zeros_like();
        adam.update(&mut params, &zeros, &[true], 0.1).unwrap();
        assert_eq!(params, before);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut params = Params::new();
        params.insert("w", Tensor::scalar(1.0));
        let mut g = Graph::new(&params);
        let w = g.param(0);
        let loss = g.scalar_loss(0.0, vec![(w, Tensor::scalar(f64::NAN))]);
        let mut grads = params.zeros_like();
        g.backward(vec![(loss, Tensor::scalar(1.0))], &mut grads);
        let mut adam = Adam::new(&params, [0.9, 0.98], 1e-8, 0.0);
        let err = adam.update(&mut params, &grads, &[true], 0.1).unwrap_err();
        assert!(err.to_string().contains("w"));
    }

    #[test]
    fn clipping() {
        let mut params = Params::new();
        params.insert("w", Tensor::from_rows(&[vec![0.0, 0.0]]));
        let mut g = Graph::new(&params);
        let w = g.param(0);
        let loss = g.scalar_loss(0.0, vec![(w, Tensor::from_rows(&[vec![30.0, 40.0]]))]);
        let mut grads = params.zeros_like();
        g.backward(vec![(loss, Tensor::scalar(1.0))], &mut grads);
        assert_eq!(clip_grad_norm(&mut grads, 5.0), 50.0);
        assert!((grads.global_norm() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn batches_cover_each_item_once() {
        let lengths: Vec<usize> = (0..300).map(|i| 20 + (i * 37) % 50).collect();
        let batches = make_batches(&lengths, 400, 3);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..300).collect::<Vec<_>>());
        assert!(batches.iter().all(|b| b.len() == 1 || b.iter().map(|&i| lengths[i]).sum::<usize>() <= 400));
        assert_eq!(make_batches(&lengths, 400, 3), batches);
        assert_ne!(make_batches(&lengths, 400, 4), batches);
        let total: usize = lengths.iter().sum();
        assert_eq!(make_batches(&lengths, total, 9).len(), 1);
        assert!(padding_fraction(&lengths, &batches) < 0.5);
    }

    #[test]
    fn seeds_are_mixed() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
        assert_eq!(derive_seed(5, 7), derive_seed(5, 7));
    }

    #[test]
    fn config_errors_name_every_key() {
        let cfg = TrainConfig { warmup_steps: 0, keep_last_k: 0, ..TrainConfig::default() };
        let msg = cfg.validate("finetune").unwrap_err().to_string();
        assert!(msg.contains("finetune.warmup_steps") && msg.contains("finetune.keep_last_k"), "{msg}");
    }
}
