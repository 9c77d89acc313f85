use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use waco::corpus::bpe::BpeVocab;
use waco::corpus::{self, generate_corpus, io as corpus_io, Corpus, Utterance};
use waco::eval::{self, ModelStage};
use waco::model::Model;
use waco::pipeline::{self, Method, RunConfig, TextStage};
use waco::training::{self, log_to_jsonl, Needs, StageOutput};
use waco::{Error, Result};

/// Word-aligned contrastive pretraining for low-resource speech translation.
///
/// Errors are printed to stderr as one JSON line
/// `{"error":<kind>,"code":<exit code>,"message":<text>}`.
/// Exit codes: 2 config error, 3 data error, 4 non-finite loss.
#[derive(Parser)]
#[command(name = "waco", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set finetune.lambda=1.0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Seed for initialization, batching, dropout and subsampling.
    #[arg(long)]
    seed: u64,
    /// Corpus directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Vocabulary file written by `train-bpe`.
    #[arg(long)]
    vocab: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corpus seed; overrides `corpus.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the BPE vocabulary on every transcript and translation of a corpus.
    TrainBpe {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the text encoder and decoder on the MT pairs.
    PretrainMt {
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Cross-modal pretraining of the speech encoder on ASR data.
    PretrainWaco {
        #[command(flatten)]
        train: TrainArgs,
        /// Checkpoint to start from, normally the MT-pretrained model.
        #[arg(long)]
        init: PathBuf,
        /// Pretraining objective; `base` copies the initial checkpoint.
        #[arg(long, default_value = "waco")]
        method: Method,
    },
    /// Multi-task fine-tuning on the ST subset; writes the averaged model.
    Finetune {
        #[command(flatten)]
        train: TrainArgs,
        /// Checkpoint to start from, normally the output of `pretrain-waco`.
        #[arg(long)]
        init: PathBuf,
    },
    /// Beam-decode translations of a corpus split.
    Translate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Split to translate: dev or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Score hypotheses against references and print `bleu=<score>`.
    ///
    /// Both files hold one sentence per line, either plain or as `id<TAB>text`.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Also print `wer=<percent>`.
        #[arg(long)]
        wer: bool,
    },
    /// Similarity report and alignment matrices on the dev split.
    Analyze {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Number of dev utterances to write matrices for.
        #[arg(long, default_value_t = 3)]
        matrices: usize,
        /// Also render each matrix as a PNG heatmap.
        #[arg(long)]
        png: bool,
    },
    /// Run the configured budget grid end to end and write `sweep.csv`.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: u64,
    },
    /// Pseudo-translate the ASR transcripts with an MT model into an ST manifest.
    Seqkd {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// MT-pretrained checkpoint.
        #[arg(long)]
        model: PathBuf,
    },
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let text = match &args.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?),
        None => None,
    };
    RunConfig::from_json(text.as_deref(), &args.set)
}

fn check_threads() -> Result<()> {
    match std::env::var("WACO_THREADS") {
        Ok(v) if v.parse::<usize>().map_or(true, |n| n == 0) => {
            Err(Error::Config(format!("WACO_THREADS must be a positive integer, got {v:?}")))
        }
        _ => Ok(()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn save_stage(dir: &Path, out: &StageOutput) -> Result<()> {
    out.model.save(&dir.join("model.waco"))?;
    write(&dir.join("log.jsonl"), &log_to_jsonl(&out.log))
}

fn split<'a>(corpus: &'a Corpus, name: &str) -> Result<&'a [Utterance]> {
    match name {
        "dev" => Ok(&corpus.dev),
        "test" => Ok(&corpus.test),
        other => Err(Error::Config(format!("unknown split {other:?}; expected dev or test"))),
    }
}

fn load_vocab(path: &Path, model: Option<&Model>) -> Result<BpeVocab> {
    let vocab = BpeVocab::load(path)?;
    if let Some(m) = model {
        if m.config.vocab_size != vocab.len() {
            return Err(Error::data(format!(
                "{} has {} tokens but the model expects {}",
                path.display(),
                vocab.len(),
                m.config.vocab_size
            )));
        }
    }
    Ok(vocab)
}

fn read_sentences(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(|l| l.split_once('\t').map_or(l, |(_, s)| s).to_string()).collect())
}

fn run(cli: Cli) -> Result<()> {
    check_threads()?;
    match cli.command {
        Command::GenData { config, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.corpus.seed = s;
            }
            let corpus = generate_corpus(&cfg.corpus)?;
            corpus.write(&config.out)
        }
        Command::TrainBpe { config, data } => {
            let cfg = load_config(&config)?;
            let corpus = Corpus::load(&data)?;
            let vocab = pipeline::train_vocab(&corpus, cfg.bpe_vocab_size)?;
            create_dir(&config.out)?;
            vocab.save(&config.out.join("vocab.txt"))
        }
        Command::PretrainMt { train } => {
            let cfg = load_config(&train.config)?.with_seed(train.seed);
            let corpus = Corpus::load(&train.data)?;
            let vocab = load_vocab(&train.vocab, None)?;
            let out = pipeline::pretrain_mt(&cfg, &corpus, &vocab)?;
            create_dir(&train.config.out)?;
            save_stage(&train.config.out, &out)
        }
        Command::PretrainWaco { train, init, method } => {
            let cfg = load_config(&train.config)?.with_seed(train.seed);
            let corpus = Corpus::load(&train.data)?;
            let model = Model::load(&init)?;
            let vocab = load_vocab(&train.vocab, Some(&model))?;
            let asr = pipeline::asr_subset(&cfg, &corpus)?;
            let out = pipeline::pretrain_speech(&cfg, method, model.clone(), &asr, &corpus.dev, &vocab)?;
            create_dir(&train.config.out)?;
            match out {
                Some(o) => save_stage(&train.config.out, &o),
                None => model.save(&train.config.out.join("model.waco")),
            }
        }
        Command::Finetune { train, init } => {
            let cfg = load_config(&train.config)?.with_seed(train.seed);
            let corpus = Corpus::load(&train.data)?;
            let model = Model::load(&init)?;
            let vocab = load_vocab(&train.vocab, Some(&model))?;
            let st = pipeline::st_subset(&cfg, &corpus)?;
            create_dir(&train.config.out)?;
            let out = pipeline::finetune(&cfg, model, &st, &corpus.dev, &vocab, Some(&train.config.out))?;
            save_stage(&train.config.out, &out)
        }
        Command::Translate { config, data, vocab, model, split: name } => {
            let cfg = load_config(&config)?;
            let corpus = Corpus::load(&data)?;
            let model = Model::load(&model)?;
            let vocab = load_vocab(&vocab, Some(&model))?;
            let utts = split(&corpus, &name)?;
            let examples = training::prepare_speech(utts, &vocab, &model, Needs { spans: false, translation: true })?;
            let hyps = eval::translate_examples(&model, &vocab, &examples, &cfg.decode)?;
            let ids: Vec<String> = utts.iter().map(|u| u.id.clone()).collect();
            let refs: Vec<String> =
                utts.iter().map(|u| u.translation.as_ref().map(|t| t.join(" ")).unwrap_or_default()).collect();
            create_dir(&config.out)?;
            write(&config.out.join("translations.tsv"), &pipeline::translations_tsv(&ids, &hyps))?;
            write(&config.out.join("references.tsv"), &pipeline::translations_tsv(&ids, &refs))
        }
        Command::Evaluate { hyp, reference, wer } => {
            let hyps = read_sentences(&hyp)?;
            let refs = read_sentences(&reference)?;
            println!("bleu={:.2}", eval::bleu(&hyps, &refs)?);
            if wer {
                println!("wer={:.2}", 100.0 * eval::wer(&hyps, &refs)?);
            }
            Ok(())
        }
        Command::Analyze { config, data, vocab, model, matrices, png } => {
            load_config(&config)?;
            let corpus = Corpus::load(&data)?;
            let model = Model::load(&model)?;
            let vocab = load_vocab(&vocab, Some(&model))?;
            let (report, margin) = pipeline::analyze(&model, &vocab, &corpus.dev)?;
            create_dir(&config.out)?;
            let summary = serde_json::json!({ "similarity": report, "diagonal_margin": margin });
            write(&config.out.join("similarity.json"), &(serde_json::to_string_pretty(&summary).expect("json") + "\n"))?;
            let examples = pipeline::dev_examples(&corpus, &vocab, &model)?;
            for e in examples.iter().filter(|e| e.spans.as_ref().is_some_and(|s| s.len() >= 2)).take(matrices) {
                let m = eval::alignment_matrix(&model, e)?;
                for (kind, t) in [("token_frame", &m.token_to_frame), ("word", &m.word_level)] {
                    let stem = config.out.join(format!("{}.{kind}", e.id));
                    write(&stem.with_extension(format!("{kind}.tsv")), &eval::matrix_tsv(t))?;
                    if png {
                        eval::write_heatmap(&stem.with_extension(format!("{kind}.png")), t, 12)?;
                    }
                }
            }
            Ok(())
        }
        Command::Sweep { config, seed } => {
            let cfg = load_config(&config)?.with_seed(seed);
            let text: TextStage = pipeline::text_stage(&cfg)?;
            let rows = pipeline::budget_sweep(&cfg, &text)?;
            create_dir(&config.out)?;
            write(&config.out.join("sweep.csv"), &pipeline::sweep_csv(&rows))
        }
        Command::Seqkd { config, data, vocab, model } => {
            let cfg = load_config(&config)?;
            let corpus = Corpus::load(&data)?;
            let model = Model::load(&model)?;
            let vocab = load_vocab(&vocab, Some(&model))?;
            let mt = ModelStage { model: &model, vocab: &vocab, decode: cfg.decode.clone() };
            let pseudo = corpus::seqkd_expand(&corpus.asr_train, &mt)?;
            create_dir(&config.out)?;
            corpus_io::write_manifest(&config.out, "seqkd", &pseudo).map(drop)
        }
    }
}

fn kind(e: &Error) -> &'static str {
    match e.exit_code() {
        2 => "config",
        4 => "numeric",
        _ => "data",
    }
}

fn fail(kind: &str, code: u8, message: &str) -> ExitCode {
    let line = serde_json::json!({ "error": kind, "code": code, "message": message.trim() });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.kind().to_string();
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or(&msg).trim_start_matches("error: ");
            return fail("config", 2, first);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(kind(&e), e.exit_code() as u8, &e.to_string().replace('\n', " ")),
    }
}
