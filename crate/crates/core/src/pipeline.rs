//! Run configuration and end-to-end orchestration of the training stages,
//! evaluation and analyses.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::bpe::BpeVocab;
use crate::corpus::{self, generate_corpus, Corpus, CorpusSpec, Utterance};
use crate::error::{Error, Result};
use crate::eval::{self, DecodeConfig, SimilarityReport};
use crate::losses::{Example, PretrainObjective};
use crate::model::{Model, ModelConfig};
use crate::training::{self, derive_seed, log_to_jsonl, Needs, StageOutput, TrainConfig};

/// Speech pretraining method; `Base` skips the stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Waco,
    Const,
    Ctc,
    Base,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Waco, Method::Const, Method::Ctc, Method::Base];

    pub fn objective(self) -> Option<PretrainObjective> {
        match self {
            Method::Waco => Some(PretrainObjective::Waco),
            Method::Const => Some(PretrainObjective::Const),
            Method::Ctc => Some(PretrainObjective::Ctc),
            Method::Base => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Waco => "waco",
            Method::Const => "const",
            Method::Ctc => "ctc",
            Method::Base => "base",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown method {s:?}; expected waco, const, ctc or base")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// ASR frame budgets; `null` entries mean the whole ASR split.
    pub asr_budgets: Vec<Option<usize>>,
    /// ST utterance counts.
    pub st_budgets: Vec<usize>,
    pub methods: Vec<Method>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { asr_budgets: vec![None], st_budgets: vec![25, 100, 400], methods: vec![Method::Waco] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusSpec,
    pub bpe_vocab_size: usize,
    /// `vocab_size` is taken from the trained vocabulary.
    pub model: ModelConfig,
    pub pretrain_mt: TrainConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub decode: DecodeConfig,
    pub method: Method,
    /// Frames of ASR data used for speech pretraining; `null` uses all.
    pub asr_budget_frames: Option<usize>,
    /// ST utterances used for fine-tuning; `null` uses all.
    pub st_budget_utterances: Option<usize>,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSpec::default(),
            bpe_vocab_size: 400,
            model: ModelConfig::default(),
            pretrain_mt: TrainConfig {
                max_steps: 1500,
                eval_interval: 250,
                frame_budget_per_batch: 400,
                ..TrainConfig::default()
            },
            pretrain: TrainConfig {
                max_steps: 600,
                eval_interval: 100,
                warmup_steps: 100,
                frame_budget_per_batch: 1200,
                label_smoothing: 0.0,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                max_steps: 600,
                eval_interval: 50,
                warmup_steps: 100,
                frame_budget_per_batch: 800,
                ..TrainConfig::default()
            },
            decode: DecodeConfig::default(),
            method: Method::Waco,
            asr_budget_frames: None,
            st_budget_utterances: Some(100),
            sweep: SweepConfig::default(),
        }
    }
}

fn unknown_keys(value: &Value, reference: &Value, path: &str, out: &mut Vec<String>) {
    if let (Value::Object(v), Value::Object(r)) = (value, reference) {
        for (k, child) in v {
            let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
            match r.get(k) {
                Some(rc) => unknown_keys(child, rc, &p, out),
                None => out.push(p),
            }
        }
    }
}

fn overlay(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| Error::config(format!("--set {path}: {part:?} is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

impl RunConfig {
    /// Parses a JSON config, applies `key.path=value` overrides (values are
    /// parsed as JSON, falling back to a plain string) and validates the result.
    /// Every unknown key and every invalid field is reported together.
    pub fn from_json(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut value = match text {
            Some(t) => serde_json::from_str(t).map_err(|e| Error::config(format!("config is not valid JSON: {e}")))?,
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::config(format!("--set {o:?} is not key=value")))?;
            let parsed = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            set_path(&mut value, k.trim(), parsed)?;
        }
        let reference = serde_json::to_value(RunConfig::default()).expect("default config serializes");
        let mut unknown = Vec::new();
        unknown_keys(&value, &reference, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::config(format!("unknown keys: {}", unknown.join(", "))));
        }
        let mut merged = reference;
        overlay(&mut merged, value);
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut check = |r: Result<()>| {
            if let Err(e) = r {
                problems.push(match e {
                    Error::Config(m) => m,
                    other => other.to_string(),
                });
            }
        };
        check(self.corpus.validate());
        let model = ModelConfig { vocab_size: usize::MAX, ..self.model.clone() };
        check(model.validate());
        if self.model.feat_dim != self.corpus.feat_dim {
            check(Err(Error::config(format!(
                "model.feat_dim {} differs from corpus.feat_dim {}",
                self.model.feat_dim, self.corpus.feat_dim
            ))));
        }
        check(self.pretrain_mt.validate("pretrain_mt"));
        check(self.pretrain.validate("pretrain"));
        check(self.finetune.validate("finetune"));
        check(self.decode.validate());
        if self.bpe_vocab_size < 8 {
            check(Err(Error::config("bpe_vocab_size must be at least 8")));
        }
        if self.st_budget_utterances == Some(0) || self.asr_budget_frames == Some(0) {
            check(Err(Error::config("budgets must be positive when given")));
        }
        if self.sweep.st_budgets.is_empty() || self.sweep.methods.is_empty() || self.sweep.asr_budgets.is_empty() {
            check(Err(Error::config("sweep grid axes must be non-empty")));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// The same configuration with every stage seeded by `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        for t in [&mut c.pretrain_mt, &mut c.pretrain, &mut c.finetune] {
            t.seed = seed;
        }
        c
    }
}

pub fn train_vocab(corpus: &Corpus, vocab_size: usize) -> Result<BpeVocab> {
    BpeVocab::train(&corpus.text_lines(), vocab_size)
}

pub fn model_config(cfg: &RunConfig, vocab: &BpeVocab) -> ModelConfig {
    ModelConfig { vocab_size: vocab.len(), ..cfg.model.clone() }
}

/// Initial parameters for a run: every stage starts from these.
pub fn init_model(cfg: &RunConfig, vocab: &BpeVocab) -> Result<Model> {
    Model::new(model_config(cfg, vocab), derive_seed(cfg.pretrain_mt.seed, 0x1417))
}

pub fn pretrain_mt(cfg: &RunConfig, corpus: &Corpus, vocab: &BpeVocab) -> Result<StageOutput> {
    let train = training::prepare_text(&corpus.mt_train, vocab)?;
    let dev = training::prepare_text(&training::text_of(&corpus.dev)?, vocab)?;
    training::pretrain_mt(init_model(cfg, vocab)?, &train, &dev, vocab, &cfg.pretrain_mt)
}

pub fn asr_subset(cfg: &RunConfig, corpus: &Corpus) -> Result<Vec<Utterance>> {
    match cfg.asr_budget_frames {
        Some(b) => corpus::subset_budget(&corpus.asr_train, b, derive_seed(cfg.pretrain.seed, 0xA5)),
        None => Ok(corpus.asr_train.clone()),
    }
}

pub fn st_subset(cfg: &RunConfig, corpus: &Corpus) -> Result<Vec<Utterance>> {
    match cfg.st_budget_utterances {
        Some(n) => corpus::subset_count(&corpus.st_train, n, derive_seed(cfg.finetune.seed, 0x57)),
        None => Ok(corpus.st_train.clone()),
    }
}

/// Dev examples with spans and references, for analyses and selection.
pub fn dev_examples(corpus: &Corpus, vocab: &BpeVocab, model: &Model) -> Result<Vec<Example>> {
    training::prepare_speech(&corpus.dev, vocab, model, Needs { spans: true, translation: true })
}

/// Speech pretraining with `method`; `None` for the base method.
pub fn pretrain_speech(
    cfg: &RunConfig,
    method: Method,
    model: Model,
    asr: &[Utterance],
    dev: &[Utterance],
    vocab: &BpeVocab,
) -> Result<Option<StageOutput>> {
    let Some(objective) = method.objective() else { return Ok(None) };
    let needs = Needs { spans: objective == PretrainObjective::Waco, translation: false };
    let train = training::prepare_speech(asr, vocab, &model, needs)?;
    let dev = training::prepare_speech(dev, vocab, &model, needs)?;
    training::pretrain_speech(model, objective, &train, &dev, &cfg.pretrain).map(Some)
}

pub fn finetune(
    cfg: &RunConfig,
    model: Model,
    st: &[Utterance],
    dev: &[Utterance],
    vocab: &BpeVocab,
    ckpt_dir: Option<&Path>,
) -> Result<StageOutput> {
    let needs = Needs { spans: cfg.finetune.lambda != 0.0, translation: true };
    let train = training::prepare_speech(st, vocab, &model, needs)?;
    let dev = training::prepare_speech(dev, vocab, &model, Needs { spans: false, translation: true })?;
    training::finetune(model, &train, &dev, vocab, &cfg.finetune, ckpt_dir)
}

/// Test-set scores and representation analyses of a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub bleu: f64,
    pub similarity: SimilarityReport,
    pub diagonal_margin: Option<f64>,
}

pub fn evaluate(
    model: &Model,
    vocab: &BpeVocab,
    test: &[Utterance],
    dev: &[Utterance],
    decode: &DecodeConfig,
) -> Result<(Evaluation, Vec<String>)> {
    let test = training::prepare_speech(test, vocab, model, Needs { spans: false, translation: true })?;
    let hyps = eval::translate_examples(model, vocab, &test, decode)?;
    let refs: Vec<String> = test.iter().map(|e| vocab.decode_to_string(e.target.as_deref().unwrap_or_default())).collect();
    let bleu = eval::bleu(&hyps, &refs)?;
    let (similarity, diagonal_margin) = analyze(model, vocab, dev)?;
    Ok((Evaluation { bleu, similarity, diagonal_margin }, hyps))
}

/// Similarity report and word-level diagonal margin over `utterances`.
pub fn analyze(model: &Model, vocab: &BpeVocab, utterances: &[Utterance]) -> Result<(SimilarityReport, Option<f64>)> {
    let examples = training::prepare_speech(utterances, vocab, model, Needs { spans: true, translation: false })?;
    let mut matrices = Vec::new();
    let mut sim_views = Vec::with_capacity(examples.len());
    for e in &examples {
        let v = eval::views(model, e)?;
        if e.spans.as_ref().is_some_and(|s| s.len() >= 2) {
            matrices.push(eval::alignment_from_views(e, &v)?.word_level);
        }
        sim_views.push(v);
    }
    let mut it = sim_views.into_iter();
    let report = eval::similarity_from_views(&examples, |_| Ok(it.next().expect("one view per example")))?;
    Ok((report, eval::diagonal_margin(&matrices)))
}

pub fn translations_tsv(ids: &[String], hyps: &[String]) -> String {
    ids.iter().zip(hyps).fold(String::new(), |mut s, (id, h)| {
        let _ = writeln!(s, "{id}\t{h}");
        s
    })
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn save_stage(dir: &Path, out: &StageOutput) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    out.model.save(&dir.join("model.waco"))?;
    write(&dir.join("log.jsonl"), &log_to_jsonl(&out.log))
}

/// Everything a full run produces.
pub struct RunResult {
    pub method: Method,
    pub evaluation: Evaluation,
    pub pretrain_dev: Option<(f64, f64)>,
    pub model: Model,
    pub logs: BTreeMap<&'static str, Vec<training::StepRecord>>,
}

/// Trained text model shared by every method of one seed.
pub struct TextStage {
    pub corpus: Corpus,
    pub vocab: BpeVocab,
    pub mt: StageOutput,
}

pub fn text_stage(cfg: &RunConfig) -> Result<TextStage> {
    let corpus = generate_corpus(&cfg.corpus)?;
    let vocab = train_vocab(&corpus, cfg.bpe_vocab_size)?;
    let mt = pretrain_mt(cfg, &corpus, &vocab)?;
    Ok(TextStage { corpus, vocab, mt })
}

/// Speech pretraining and fine-tuning from a trained text stage, then
/// evaluation. Artifacts go under `out` when given.
pub fn speech_stages(cfg: &RunConfig, text: &TextStage, method: Method, out: Option<&Path>) -> Result<RunResult> {
    let asr = asr_subset(cfg, &text.corpus)?;
    let st = st_subset(cfg, &text.corpus)?;
    let mut logs = BTreeMap::new();
    logs.insert("pretrain_mt", text.mt.log.clone());
    let pre = pretrain_speech(cfg, method, text.mt.model.clone(), &asr, &text.corpus.dev, &text.vocab)?;
    let (start, pretrain_dev) = match pre {
        Some(p) => {
            if let Some(dir) = out {
                save_stage(&dir.join("pretrain"), &p)?;
            }
            logs.insert("pretrain", p.log);
            (p.model, Some((p.initial_metric.unwrap_or(f64::NAN), p.best_metric)))
        }
        None => (text.mt.model.clone(), None),
    };
    let ckpt = out.map(|d| d.join("finetune"));
    let ft = finetune(cfg, start, &st, &text.corpus.dev, &text.vocab, ckpt.as_deref())?;
    if let Some(dir) = &ckpt {
        save_stage(dir, &ft)?;
    }
    let (evaluation, hyps) = evaluate(&ft.model, &text.vocab, &text.corpus.test, &text.corpus.dev, &cfg.decode)?;
    if let Some(dir) = out {
        let ids: Vec<String> = text.corpus.test.iter().map(|u| u.id.clone()).collect();
        write(&dir.join("translations.tsv"), &translations_tsv(&ids, &hyps))?;
        write(&dir.join("metrics.json"), &(serde_json::to_string_pretty(&evaluation).expect("metrics serialize") + "\n"))?;
    }
    logs.insert("finetune", ft.log);
    Ok(RunResult { method, evaluation, pretrain_dev, model: ft.model, logs })
}

/// One complete run: corpus, vocabulary, all three stages and evaluation.
pub fn run_full(cfg: &RunConfig, out: Option<&Path>) -> Result<RunResult> {
    let text = text_stage(cfg)?;
    if let Some(dir) = out {
        write(&dir.join("config.json"), &cfg.to_json())?;
        text.vocab.save(&dir.join("vocab.txt"))?;
        save_stage(&dir.join("pretrain_mt"), &text.mt)?;
    }
    speech_stages(cfg, &text, cfg.method, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    pub asr_budget: Option<usize>,
    pub st_budget: usize,
    pub bleu: f64,
    pub word_sim: f64,
    pub sent_sim: f64,
    pub seed: u64,
}

pub const SWEEP_HEADER: &str = "method,asr_budget,st_budget,bleu,word_sim,sent_sim,seed";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let asr = r.asr_budget.map_or_else(|| "all".to_string(), |b| b.to_string());
        let _ = writeln!(
            s,
            "{},{asr},{},{:.4},{:.6},{:.6},{}",
            r.method.name(),
            r.st_budget,
            r.bleu,
            r.word_sim,
            r.sent_sim,
            r.seed
        );
    }
    s
}

/// Runs every (ASR budget, ST budget, method) cell with one shared seed. The
/// text stage is trained once; speech pretraining once per ASR budget and
/// method.
pub fn budget_sweep(cfg: &RunConfig, text: &TextStage) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &asr_budget in &cfg.sweep.asr_budgets {
        for &method in &cfg.sweep.methods {
            let cell_cfg = RunConfig { asr_budget_frames: asr_budget, method, ..cfg.clone() };
            let asr = asr_subset(&cell_cfg, &text.corpus)?;
            let pre = pretrain_speech(&cell_cfg, method, text.mt.model.clone(), &asr, &text.corpus.dev, &text.vocab)?;
            let start = pre.map_or_else(|| text.mt.model.clone(), |p| p.model);
            for &st_budget in &cfg.sweep.st_budgets {
                let cell = RunConfig { st_budget_utterances: Some(st_budget), ..cell_cfg.clone() };
                let st = st_subset(&cell, &text.corpus)?;
                let ft = finetune(&cell, start.clone(), &st, &text.corpus.dev, &text.vocab, None)?;
                let (ev, _) = evaluate(&ft.model, &text.vocab, &text.corpus.test, &text.corpus.dev, &cell.decode)?;
                rows.push(SweepRow {
                    method,
                    asr_budget,
                    st_budget,
                    bleu: ev.bleu,
                    word_sim: ev.similarity.word_level_mean_cosine,
                    sent_sim: ev.similarity.sentence_level_mean_cosine,
                    seed: cfg.finetune.seed,
                });
            }
        }
    }
    Ok(rows)
}

/// Loads a corpus directory written by [`Corpus::write`].
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    Corpus::load(dir)
}

/// Derived seed used when the caller wants a seed distinct from the stage seeds.
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    derive_seed(seed, tag)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_all_listed() {
        let err = RunConfig::from_json(Some(r#"{"bogus": 1, "model": {"d_modle": 3}, "finetune": {"lr": 1}}"#), &[])
            .unwrap_err()
            .to_string();
        for k in ["bogus", "model.d_modle", "finetune.lr"] {
            assert!(err.contains(k), "{err}");
        }
    }

    #[test]
    fn overrides_apply_and_validate() {
        let cfg = RunConfig::from_json(None, &["finetune.lambda=1".into(), "method=ctc".into()]).unwrap();
        assert_eq!(cfg.finetune.lambda, 1.0);
        assert_eq!(cfg.method, Method::Ctc);
        let err = RunConfig::from_json(None, &["finetune.keep_last_k=0".into(), "pretrain.warmup_steps=0".into()])
            .unwrap_err()
            .to_string();
        assert!(err.contains("finetune.keep_last_k") && err.contains("pretrain.warmup_steps"), "{err}");
        assert!(RunConfig::from_json(None, &["novalue".into()]).is_err());
    }

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(Some(&cfg.to_json()), &[]).unwrap(), cfg);
    }

    #[test]
    fn sweep_csv_layout() {
        let rows = [SweepRow { method: Method::Waco, asr_budget: None, st_budget: 25, bleu: 12.5, word_sim: 0.5, sent_sim: 0.25, seed: 3 }];
        let csv = sweep_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(SWEEP_HEADER));
        assert_eq!(lines.next(), Some("waco,all,25,12.5000,0.500000,0.250000,3"));
    }
}
