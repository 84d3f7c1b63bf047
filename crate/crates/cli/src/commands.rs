//! Subcommand bodies. Each validates everything it needs before writing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use prqa_core::checkpoint;
use prqa_core::data::{self, SentencePair};
use prqa_core::model::{EncodedPair, PairModel};
use prqa_core::text::{build_vocab, load_embeddings, tokenize, EmbeddingTable};
use prqa_core::train::{evaluate, train_with_hook, TrainData};
use prqa_core::Error;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::EvalArgs;

pub const QA_TRAIN: &str = "qa_train.tsv";
pub const QA_DEV: &str = "qa_dev.tsv";
pub const QA_TEST: &str = "qa_test.tsv";
pub const QR_TRAIN: &str = "qr_train.tsv";
pub const STATS: &str = "stats.json";
pub const CHECKPOINT: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_output_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(io_err(path))?;
    Ok(())
}

fn require_file(path: &Path, hint: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{} not found{hint}", path.display())))
    }
}

pub fn ingest(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.ingest.validate()?;
    let out = data::run_ingest(&cfg.ingest, cfg.sub_seed("ingest"))?;
    create_output_dir(&cfg.output_dir)?;
    data::write_pairs(&cfg.output(QA_TRAIN), &out.qa.train)?;
    data::write_pairs(&cfg.output(QA_DEV), &out.qa.dev)?;
    data::write_pairs(&cfg.output(QA_TEST), &out.qa.test)?;
    data::write_pairs(&cfg.output(QR_TRAIN), &out.qr_train)?;
    let stats = serde_json::to_string_pretty(&out.stats).map_err(|e| Error::Internal(e.to_string()))? + "\n";
    write_text(&cfg.output(STATS), &stats)?;
    print!("{stats}");
    Ok(())
}

fn encode_all(model: &PairModel, pairs: &[SentencePair]) -> Result<Vec<EncodedPair>, CliError> {
    pairs
        .iter()
        .map(|p| Ok(model.encode_text(&p.question, &p.candidate, p.kind, p.label)?))
        .collect()
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let hint = "; run `prqa ingest` first";
    let inputs = [cfg.output(QA_TRAIN), cfg.output(QA_DEV), cfg.output(QR_TRAIN)];
    for p in &inputs {
        require_file(p, hint)?;
    }
    let qa_train = data::read_pairs(&inputs[0])?;
    let qa_dev = data::read_pairs(&inputs[1])?;
    let qr_train = if cfg.train.adaptation {
        data::read_pairs(&inputs[2])?
    } else {
        Vec::new()
    };

    let texts: Vec<Vec<String>> = qa_train
        .iter()
        .chain(&qr_train)
        .flat_map(|p| [tokenize(&p.question), tokenize(&p.candidate)])
        .collect();
    let vocab = build_vocab(&texts, cfg.min_count)?;
    let dim = cfg.model.embed_dim;
    let embeddings = match &cfg.embeddings {
        Some(path) => load_embeddings(path, &vocab, dim, cfg.sub_seed("embeddings"))?,
        None => EmbeddingTable::random(vocab.len(), dim, cfg.sub_seed("embeddings")),
    };
    log::info!(
        "vocabulary {} tokens, {} with pretrained vectors",
        vocab.len(),
        embeddings.pretrained_count()
    );
    let model = PairModel::new(cfg.model.clone(), vocab, embeddings, cfg.sub_seed("init"))?;
    let data = TrainData {
        qa_train: encode_all(&model, &qa_train)?,
        qa_dev: encode_all(&model, &qa_dev)?,
        qr_train: encode_all(&model, &qr_train)?,
    };
    let train_cfg = cfg.train_config();
    train_cfg.validate()?;

    create_output_dir(&cfg.output_dir)?;
    let log_path = cfg.output(TRAIN_LOG);
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
    let meta = |epoch: usize| {
        serde_json::json!({
            "epoch": epoch,
            "seed": cfg.seed,
            "adaptation": train_cfg.adaptation,
        })
    };
    let mut hook = |entry: &prqa_core::train::EpochLog, model: &PairModel, due: bool| {
        writeln!(log, "{}", entry.to_line()).and_then(|_| log.flush()).map_err(io_err(&log_path))?;
        if due {
            let path = cfg.output(&format!("model_epoch{:03}.ckpt", entry.epoch));
            checkpoint::save(&path, model, meta(entry.epoch))?;
        }
        Ok(())
    };
    let outcome = train_with_hook(&train_cfg, model, &data, &mut hook)?;
    checkpoint::save(&cfg.output(CHECKPOINT), &outcome.model, meta(outcome.best_epoch))?;
    match outcome.best_dev_acc {
        Some(acc) => println!("best epoch {} dev accuracy {:.4}", outcome.best_epoch, acc),
        None => println!("final epoch {} (no dev set)", outcome.best_epoch),
    }
    Ok(())
}

pub fn eval(cfg: Option<&RunConfig>, args: &EvalArgs) -> Result<(), CliError> {
    let ckpt = match (&args.checkpoint, cfg) {
        (Some(c), _) => c.clone(),
        (None, Some(cfg)) => cfg.output(CHECKPOINT),
        (None, None) => return Err(CliError::Usage("--checkpoint or --config is required".into())),
    };
    require_file(&ckpt, "")?;
    let (name, path, gold_format): (String, PathBuf, bool) = match (cfg, &args.dataset) {
        (_, Some(p)) => {
            let stem = p.file_stem().map_or("dataset".into(), |s| s.to_string_lossy().into_owned());
            (stem, p.clone(), false)
        }
        (Some(cfg), None) if args.source => ("source".into(), cfg.output(QA_TEST), false),
        (Some(cfg), None) => {
            let gold = cfg
                .ingest
                .gold
                .clone()
                .ok_or_else(|| CliError::Usage("--target needs `ingest.gold` in the config".into()))?;
            ("target".into(), gold, true)
        }
        (None, None) => return Err(CliError::Usage("--source and --target need --config".into())),
    };
    require_file(&path, "")?;
    let pairs = if gold_format {
        data::load_gold_qr(&path)?
    } else {
        data::read_pairs(&path)?
    };
    let (model, _) = checkpoint::load(&ckpt)?;
    let report = evaluate(&model, &encode_all(&model, &pairs)?, &name)?;

    let out_dir = match cfg {
        Some(cfg) => cfg.output_dir.clone(),
        None => ckpt.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    create_output_dir(&out_dir)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Internal(e.to_string()))? + "\n";
    write_text(&out_dir.join(format!("eval_{name}.json")), &json)?;
    println!("{}", report.summary());
    Ok(())
}

pub fn infer(ckpt: &Path, question: &str, candidate: &str) -> Result<(), CliError> {
    if question.trim().is_empty() || candidate.trim().is_empty() {
        return Err(CliError::Usage("question and candidate must be non-empty".into()));
    }
    require_file(ckpt, "")?;
    let (model, _) = checkpoint::load(ckpt)?;
    let p = model.predict(question, candidate)?;
    println!("label={} confidence={:.6}", p.label, p.confidence);
    Ok(())
}

pub fn convert(input: &Path, output: &Path) -> Result<(), CliError> {
    require_file(input, "")?;
    let n = data::convert_loose_file(input, output)?;
    println!("{n} records written to {}", output.display());
    Ok(())
}
