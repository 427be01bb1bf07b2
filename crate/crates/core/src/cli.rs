//! Command-line entry point.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::checkpoint::{config_hash, Checkpoint, Phase};
use crate::config::{has_key, parse_value, resolve, RunConfig, CONFIG_ENV};
use crate::data::{corpus_text, load_image_caption, load_questions, load_vqa_triples, CaptionData, ImageCaptionPair, VqaData, VqaTriple};
use crate::eval::{evaluate_model, evaluate_predictions, generate_predictions, read_predictions, write_predictions, EvalReport};
use crate::model::{ModelConfig, VqaModel};
use crate::synthetic::{generate_synthetic, write_synthetic};
use crate::text::{load_word_vectors, Vocabulary, WordEmbeddingTable};
use crate::train::{finetune_loop, pretrain_loop, DirHooks};

#[derive(Parser, Debug)]
#[command(name = "medvqa", about = "Pretrain, fine-tune and evaluate a joint image-text VQA model", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration (defaults to $MEDVQA_CONFIG when set).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for training and synthetic generation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Config override `key.path=value`; `--key.path value` is shorthand for this.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic shapes corpus: images, manifests, scene records, vocabulary.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Self-supervised pretraining on image-caption pairs.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Supervised VQA training, from a pretraining checkpoint or from scratch.
    Finetune {
        #[arg(long)]
        out: PathBuf,
        /// Pretraining checkpoint directory.
        #[arg(long = "from", conflicts_with = "no_pretrain", required_unless_present = "no_pretrain")]
        from: Option<PathBuf>,
        /// Train the encoder from scratch.
        #[arg(long)]
        no_pretrain: bool,
        /// Skip the joint encoder blocks.
        #[arg(long)]
        bypass_encoder: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Answer questions from a `question_id, image_path, question[, answer]` TSV.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Predictions file to write.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score a model (or a predictions file) against a VQA manifest.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Score this predictions file instead of generating.
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        predictions: Option<PathBuf>,
        /// Report file to write.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

/// Rewrite `--a.b value` and `--a.b=value` into `--set a.b=value`.
pub fn expand_dotted(args: Vec<OsString>) -> Vec<OsString> {
    let mut out = Vec::with_capacity(args.len());
    let mut it = args.into_iter().peekable();
    if let Some(first) = it.next() {
        out.push(first);
    }
    while let Some(arg) = it.next() {
        let Some(s) = arg.to_str().and_then(|s| s.strip_prefix("--")).filter(|s| s.split('=').next().is_some_and(|k| k.contains('.'))) else {
            out.push(arg);
            continue;
        };
        let pair = if s.contains('=') {
            s.to_string()
        } else {
            match it.next_if(|v| !v.to_str().is_some_and(|v| v.starts_with("--"))) {
                Some(v) => format!("{s}={}", v.to_string_lossy()),
                None => s.to_string(),
            }
        };
        out.push("--set".into());
        out.push(pair.into());
    }
    out
}

const USAGE_EXIT: i32 = 2;
const FAILURE_EXIT: i32 = 1;

/// Parse and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args = expand_dotted(argv.into_iter().map(Into::into).collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { USAGE_EXIT } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let common = match &cli.command {
        Command::MakeSynthetic { common, .. } | Command::Pretrain { common, .. } | Command::Finetune { common, .. } | Command::Generate { common, .. } | Command::Evaluate { common, .. } => common.clone(),
    };
    let overrides = match parse_overrides(&common) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}\n\nRun `medvqa --help` for usage.");
            return USAGE_EXIT;
        }
    };
    // Only the first call in a process can size the global pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(common.threads.max(1)).build_global();
    match dispatch(cli.command, &common, &overrides) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            FAILURE_EXIT
        }
    }
}

fn parse_overrides(common: &Common) -> anyhow::Result<Vec<(String, Value)>> {
    let known = serde_json::to_value(RunConfig::desk(Phase::Pretrain))?;
    let mut out = Vec::new();
    for s in &common.set {
        let (k, v) = s.split_once('=').ok_or_else(|| anyhow!("override `{s}` needs a value"))?;
        if !has_key(&known, k) {
            bail!("unknown flag `--{k}`");
        }
        out.push((k.to_string(), parse_value(v)));
    }
    if let Some(seed) = common.seed {
        out.push(("train.seed".into(), Value::from(seed)));
        out.push(("synthetic.seed".into(), Value::from(seed)));
    }
    Ok(out)
}

/// Resolve the run configuration. Training commands also require `train.phase` to match.
fn load_config(phase: Phase, training: bool, common: &Common, overrides: &[(String, Value)]) -> anyhow::Result<RunConfig> {
    let file = common.config.clone().or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let cfg = resolve(phase, file.as_deref(), overrides).context("invalid configuration")?;
    if training && cfg.train.phase != phase {
        bail!("invalid configuration: train.phase is {:?} but the command runs {:?}", cfg.train.phase, phase);
    }
    Ok(cfg)
}

fn write_config(cfg: &RunConfig, path: &Path) -> anyhow::Result<()> {
    let mut json = serde_json::to_string_pretty(cfg)?;
    json.push('\n');
    fs::write(path, json).with_context(|| format!("writing {}", path.display()))
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> anyhow::Result<&'a Path> {
    p.as_deref().ok_or_else(|| anyhow!("invalid configuration: `{key}` is not set"))
}

fn vocabulary(cfg: &RunConfig, captions: &[ImageCaptionPair], triples: &[VqaTriple]) -> anyhow::Result<Vocabulary> {
    Ok(match &cfg.data.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => Vocabulary::build(corpus_text(captions, triples), cfg.data.vocab_min_count)?,
    })
}

fn model_config(cfg: &RunConfig, vocab: &Vocabulary) -> anyhow::Result<ModelConfig> {
    if cfg.model.vocab_size != 0 && cfg.model.vocab_size != vocab.len() {
        bail!("invalid configuration: model.vocab_size {} but the vocabulary has {} entries", cfg.model.vocab_size, vocab.len());
    }
    Ok(ModelConfig { vocab_size: vocab.len(), ..cfg.model.clone() })
}

fn word_vectors(cfg: &RunConfig, vocab: &Vocabulary) -> anyhow::Result<Option<WordEmbeddingTable>> {
    match &cfg.data.word_vectors {
        None => Ok(None),
        Some(p) => {
            let t = load_word_vectors(p, vocab, cfg.model.word_dim, cfg.train.seed, false)?;
            eprintln!("word vectors: {:.1}% of the vocabulary covered", 100.0 * t.coverage());
            Ok(Some(t))
        }
    }
}

fn sidecar_config(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(OsString::from).unwrap_or_default();
    name.push(".config.json");
    out.with_file_name(name)
}

fn create_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn dispatch(command: Command, common: &Common, overrides: &[(String, Value)]) -> anyhow::Result<()> {
    match command {
        Command::MakeSynthetic { out, .. } => {
            let cfg = load_config(Phase::Pretrain, false, common, overrides)?;
            let corpus = generate_synthetic(&cfg.synthetic)?;
            let paths = write_synthetic(&corpus, &out)?;
            write_config(&cfg, &out.join("config.json"))?;
            eprintln!(
                "wrote {} caption pairs, {} train and {} test questions to {}",
                corpus.captions.len(),
                corpus.train.len(),
                corpus.test.len(),
                paths.captions.parent().unwrap_or(&out).display()
            );
            Ok(())
        }
        Command::Pretrain { out, .. } => {
            let mut cfg = load_config(Phase::Pretrain, true, common, overrides)?;
            let captions = load_image_caption(require(&cfg.data.captions, "data.captions")?)?;
            let extra = match &cfg.data.vqa_train {
                Some(p) => load_vqa_triples(p)?,
                None => Vec::new(),
            };
            let vocab = vocabulary(&cfg, &captions, &extra)?;
            cfg.model = model_config(&cfg, &vocab)?;
            let data = CaptionData::prepare(&captions, &vocab, &cfg.model)?;
            let table = word_vectors(&cfg, &vocab)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_config(&cfg, &out.join("config.json"))?;
            let mut hooks = DirHooks::new(&out, &cfg.train)?;
            let outcome = pretrain_loop(&cfg.model, &vocab, &data, &cfg.train, table.as_ref(), &config_hash(&cfg)?, &mut hooks)?;
            eprintln!("pretrained {} steps; checkpoint in {}", outcome.checkpoint.step, DirHooks::final_dir(&out).display());
            Ok(())
        }
        Command::Finetune { out, from, bypass_encoder, .. } => {
            let mut cfg = load_config(Phase::Finetune, true, common, overrides)?;
            if bypass_encoder {
                cfg.train.encoder_bypass = true;
            }
            let triples = load_vqa_triples(require(&cfg.data.vqa_train, "data.vqa_train")?)?;
            let init = from.as_deref().map(Checkpoint::load).transpose().context("loading --from checkpoint")?;
            let vocab = match &init {
                Some(ck) => {
                    if let Some(p) = &cfg.data.vocab {
                        if Vocabulary::load(p)?.tokens() != ck.vocab.tokens() {
                            bail!("data.vocab differs from the checkpoint's vocabulary");
                        }
                    }
                    ck.vocab.clone()
                }
                None => vocabulary(&cfg, &[], &triples)?,
            };
            cfg.model = model_config(&cfg, &vocab)?;
            if let Some(ck) = &init {
                if ck.model != cfg.model {
                    bail!("model configuration differs from the checkpoint's");
                }
            }
            let data = VqaData::prepare(&triples, &vocab, &cfg.model)?;
            let table = if init.is_none() { word_vectors(&cfg, &vocab)? } else { None };
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_config(&cfg, &out.join("config.json"))?;
            let mut hooks = DirHooks::new(&out, &cfg.train)?;
            let outcome = finetune_loop(&cfg.model, &vocab, init.as_ref(), &data, &cfg.train, table.as_ref(), &config_hash(&cfg)?, &mut hooks)?;
            eprintln!("fine-tuned {} steps; checkpoint in {}", outcome.checkpoint.step, DirHooks::final_dir(&out).display());
            if let Some(test) = &cfg.data.vqa_test {
                let ck = &outcome.checkpoint;
                let report = evaluate_checkpoint(ck, &load_vqa_triples(test)?, cfg.eval.max_answer_len)?;
                report.write(&out.join("report.txt"))?;
                eprintln!("test accuracy {:.4}, mean BLEU {:.4}", report.vqa_accuracy, report.mean_bleu);
            }
            Ok(())
        }
        Command::Generate { checkpoint, data, out, .. } => {
            let cfg = load_config(Phase::Finetune, false, common, overrides)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let (model, params) = bind(&ck)?;
            let questions = load_questions(&data)?;
            let prepared = VqaData::prepare(&questions, &ck.vocab, &ck.model)?;
            let preds = generate_predictions(&model, &params, &ck.vocab, &prepared, cfg.eval.max_answer_len.unwrap_or(ck.model.max_answer_len))?;
            create_parent(&out)?;
            write_predictions(&out, &preds)?;
            write_config(&cfg, &sidecar_config(&out))?;
            eprintln!("wrote {} predictions to {}", preds.len(), out.display());
            Ok(())
        }
        Command::Evaluate { checkpoint, data, predictions, out, .. } => {
            let cfg = load_config(Phase::Finetune, false, common, overrides)?;
            let triples = load_vqa_triples(&data)?;
            let report = match (&checkpoint, &predictions) {
                (Some(c), _) => evaluate_checkpoint(&Checkpoint::load(c)?, &triples, cfg.eval.max_answer_len)?,
                (None, Some(p)) => {
                    let golds: Vec<(String, String)> = triples.iter().map(|t| (t.question_id.clone(), t.answer.clone())).collect();
                    evaluate_predictions(&read_predictions(p)?, &golds)?
                }
                (None, None) => bail!("evaluate needs --checkpoint or --predictions"),
            };
            create_parent(&out)?;
            report.write(&out)?;
            write_config(&cfg, &sidecar_config(&out))?;
            eprintln!("accuracy {:.4}, mean BLEU {:.4} over {} examples", report.vqa_accuracy, report.mean_bleu, report.n_examples);
            Ok(())
        }
    }
}

fn bind(ck: &Checkpoint) -> anyhow::Result<(VqaModel, crate::params::ParamSet<f32>)> {
    let mut params = ck.params.clone();
    let model = VqaModel::bind(&ck.model, ck.parts, &mut params)?;
    if model.decoder.is_none() {
        bail!("checkpoint has no answer decoder (is it a pretraining checkpoint?)");
    }
    Ok((model, params))
}

fn evaluate_checkpoint(ck: &Checkpoint, triples: &[VqaTriple], max_len: Option<usize>) -> anyhow::Result<EvalReport> {
    let (model, params) = bind(ck)?;
    let data = VqaData::prepare(triples, &ck.vocab, &ck.model)?;
    Ok(evaluate_model(&model, &params, &ck.vocab, &data, max_len.unwrap_or(ck.model.max_answer_len))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn dotted_flags_become_overrides() {
        let got = expand_dotted(os(&["medvqa", "pretrain", "--train.learning_rate", "0.1", "--data.captions=a.tsv", "--out", "x"]));
        assert_eq!(got, os(&["medvqa", "pretrain", "--set", "train.learning_rate=0.1", "--set", "data.captions=a.tsv", "--out", "x"]));
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["medvqa", "frobnicate"]), 2);
        assert_eq!(run(["medvqa", "pretrain", "--out", "x", "--bogus"]), 2);
        assert_eq!(run(["medvqa", "pretrain", "--out", "x", "--train.nope", "1"]), 2);
        assert_eq!(run(["medvqa", "finetune", "--out", "x"]), 2);
    }

    #[test]
    fn validation_errors_exit_one() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let out = out.to_str().unwrap();
        assert_eq!(run(["medvqa", "pretrain", "--out", out, "--train.learning_rate", "-1"]), 1);
        assert_eq!(run(["medvqa", "pretrain", "--out", out]), 1);
        assert!(!dir.path().join("o").exists());
    }
}
