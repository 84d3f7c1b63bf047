//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use prqa_core::autodiff::{Graph, ParamId};
use prqa_core::checkpoint;
use prqa_core::data::{self, CategorySource, IngestConfig, SentencePair};
use prqa_core::metrics::{Confusion, EvalReport};
use prqa_core::model::{BoundParams, DomainGate, EncodedPair, ModelConfig, PairBatch, PairKind, PairModel};
use prqa_core::synthetic::{DomainShiftConfig, DomainShiftTask};
use prqa_core::text::{build_vocab, tokenize, EmbeddingTable, Vocabulary};
use prqa_core::train::{ablation_compare, evaluate, train_with_hook, EpochLog, TrainConfig, TrainData};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        if let false = $cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(limit: Duration, start: Instant) -> Result<Duration, String> {
    let took = start.elapsed();
    if took > limit {
        Err(format!("took {took:.1?}, limit {limit:?}"))
    } else {
        Ok(took)
    }
}

// ---------------------------------------------------------------------------

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (seed, gate) in [(4, DomainGate::Identity), (5, DomainGate::Reverse(1.0)), (6, DomainGate::Reverse(0.35))] {
        let mut model = common::tiny_model(seed);
        check!(model.vocab.len() == 10 && model.config.hidden == 4, "tiny model has the wrong size");
        let (w, n) = common::worst_error(&mut model, &common::batch(), gate);
        worst = worst.max(w);
        checked += n;
    }
    let took = within(Duration::from_secs(10), start)?;
    check!(worst <= common::REL_TOL, "worst relative error {worst:e}");
    Ok(format!("{checked} gradient entries, worst rel err {worst:.2e}, {took:.1?}"))
}

fn grads_of(model: &mut PairModel, batch: &PairBatch, gate: DomainGate, which: &str) -> Vec<Vec<f64>> {
    model.params.store.zero_grad();
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, &model.params);
    let parts = model.total_loss(&mut g, &bound, batch, Some(gate)).unwrap();
    let root = match which {
        "domain" => parts.domain.unwrap(),
        "qa" => parts.qa,
        _ => parts.total,
    };
    g.backward(root).unwrap();
    g.accumulate_param_grads(&mut model.params.store);
    model.params.store.ids().map(|id| model.params.store.get(id).grad().to_vec()).collect()
}

fn logits(model: &PairModel, batch: &PairBatch, gate: DomainGate) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, &model.params);
    let f = model.forward_pair(&mut g, &bound, batch, Some(gate)).unwrap();
    (g.values(f.qa_logits).to_vec(), g.values(f.domain_logits.unwrap()).to_vec())
}

fn reversal_property() -> Outcome {
    let mut model = common::tiny_model(11);
    let batch = common::batch();
    let encoder: Vec<usize> = model.params.encoder_ids().iter().map(|id| id.index()).collect();
    let reversed = grads_of(&mut model, &batch, DomainGate::Reverse(1.0), "domain");
    let identity = grads_of(&mut model, &batch, DomainGate::Identity, "domain");
    let mut worst = 0.0f64;
    let mut nonzero = 0;
    for &i in &encoder {
        for (r, p) in reversed[i].iter().zip(&identity[i]) {
            worst = worst.max((r + p).abs());
            nonzero += usize::from(*p != 0.0);
        }
    }
    check!(nonzero > 0, "identity gradients are all zero; the check is vacuous");
    check!(worst <= 1e-10, "max |reversed + identity| = {worst:e}");

    let reference = logits(&model, &batch, DomainGate::Reverse(0.0));
    for lambda in [0.5, 1.0] {
        check!(
            logits(&model, &batch, DomainGate::Reverse(lambda)) == reference,
            "forward logits change with lambda {lambda}"
        );
    }
    Ok(format!("{nonzero} encoder entries negated, max deviation {worst:.1e}; logits equal for lambda 0/0.5/1"))
}

fn mask_exclusion() -> Outcome {
    let mut model = common::tiny_model(12);
    let rows = common::batch().rows().to_vec();
    let qr_row = rows.iter().find(|r| r.kind == PairKind::Qr).unwrap().clone();
    let qa_row = rows.iter().find(|r| r.kind == PairKind::Qa).unwrap().clone();

    let all_qr = PairBatch::new(vec![qr_row.clone(), EncodedPair { question: qa_row.question.clone(), ..qr_row }]).unwrap();
    let grads = grads_of(&mut model, &all_qr, DomainGate::Reverse(1.0), "total");
    let qa_head: Vec<ParamId> = prqa_core::model::ModelParams::head_ids(&model.params.qa_head);
    for id in &qa_head {
        let name = model.params.store.name(*id).to_string();
        check!(grads[id.index()].iter().all(|g| *g == 0.0), "QA head parameter {name} has gradient on an all-QR batch");
    }

    let all_qa = PairBatch::new(vec![qa_row.clone(), EncodedPair { label: Some(0), ..qa_row }]).unwrap();
    let from_domain = grads_of(&mut model, &all_qa, DomainGate::Reverse(0.0), "domain");
    let total = grads_of(&mut model, &all_qa, DomainGate::Reverse(0.0), "total");
    let qa_only = grads_of(&mut model, &all_qa, DomainGate::Reverse(0.0), "qa");
    for id in model.params.encoder_ids() {
        let name = model.params.store.name(id).to_string();
        check!(from_domain[id.index()].iter().all(|g| *g == 0.0), "domain branch reaches encoder {name} at lambda 0");
        check!(total[id.index()] == qa_only[id.index()], "encoder {name} gradient differs from QA-only gradient");
    }
    Ok(format!("{} QA-head tensors zero on all-QR; encoder untouched by domain branch at lambda 0", qa_head.len()))
}

fn toy_pairs() -> (PairModel, Vec<EncodedPair>) {
    let cfg = ModelConfig {
        embed_dim: 8,
        hidden: 8,
        head_layers: [16, 8],
        max_question_len: 3,
        max_candidate_len: 4,
        ..ModelConfig::default()
    };
    let vocab = Vocabulary::from_tokens((0..18).map(|i| format!("w{i}"))).unwrap();
    // Unit-scale vectors; the default +-0.1 range is meant for rows that get
    // overwritten by pretrained vectors.
    let base = EmbeddingTable::random(vocab.len(), cfg.embed_dim, 5);
    let emb = EmbeddingTable::new(cfg.embed_dim, base.values().iter().map(|v| v * 10.0).collect(), vec![false; vocab.len()]).unwrap();
    let model = PairModel::new(cfg, vocab, emb, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pairs = (0..32)
        .map(|i| EncodedPair {
            question: (0..3).map(|_| rng.gen_range(2..20)).collect(),
            question_len: 3,
            candidate: (0..4).map(|_| rng.gen_range(2..20)).collect(),
            candidate_len: 4,
            kind: PairKind::Qa,
            label: Some((i % 2) as u8),
        })
        .collect();
    (model, pairs)
}

fn memorization() -> Outcome {
    let start = Instant::now();
    let (model, pairs) = toy_pairs();
    check!(pairs.iter().filter(|p| p.label == Some(1)).count() == 16, "toy set is not balanced");
    let config = TrainConfig {
        epochs: 200,
        batch_size: 8,
        adaptation: false,
        ..TrainConfig::default()
    };
    let data = TrainData {
        qa_train: pairs.clone(),
        ..TrainData::default()
    };
    let mut first = None;
    let mut losses = Vec::new();
    let mut hook = |log: &EpochLog, m: &PairModel, _: bool| {
        losses.push(log.qa_loss);
        if first.is_none() && evaluate(m, &pairs, "toy")?.accuracy >= 0.95 {
            first = Some(log.epoch);
        }
        Ok(())
    };
    let outcome = train_with_hook(&config, model, &data, &mut hook).map_err(|e| e.to_string())?;
    let took = within(Duration::from_secs(60), start)?;
    let Some(epoch) = first else {
        let acc = evaluate(&outcome.model, &pairs, "toy").map_err(|e| e.to_string())?.accuracy;
        return Err(format!("train accuracy stayed below 95% (final {acc:.3})"));
    };
    // After epoch 5 the QA loss may tick up by at most 5% between epochs.
    for w in losses.windows(2).skip(5) {
        check!(w[1] <= w[0] * 1.05, "QA loss rose from {} to {}", w[0], w[1]);
    }
    Ok(format!("95% train accuracy at epoch {epoch}, loss {:.4} -> {:.4}, {took:.1?}", losses[0], losses[losses.len() - 1]))
}

/// Settings for the synthetic two-domain contrast.
fn shift_setup(seed: u64) -> (TrainConfig, PairModel, DomainShiftTask) {
    let model_cfg = ModelConfig {
        embed_dim: 12,
        hidden: 8,
        head_layers: [16, 8],
        init_range: 0.4,
        max_question_len: 4,
        max_candidate_len: 8,
        ..ModelConfig::default()
    };
    let task_cfg = DomainShiftConfig {
        embed_dim: model_cfg.embed_dim,
        seed,
        ..DomainShiftConfig::default()
    };
    let task = DomainShiftTask::generate(&task_cfg, &model_cfg).unwrap();
    let model = PairModel::new(model_cfg, task.vocab.clone(), task.embeddings.clone(), seed + 1000).unwrap();
    let train_cfg = TrainConfig {
        epochs: 60,
        batch_size: 16,
        learning_rate: 0.003,
        lambda_scale: 0.3,
        seed,
        ..TrainConfig::default()
    };
    (train_cfg, model, task)
}

fn synthetic_shift() -> Outcome {
    let start = Instant::now();
    let mut gaps = Vec::new();
    for seed in 0..3 {
        let (cfg, model, task) = shift_setup(seed);
        let data = TrainData {
            qa_train: task.source_train.clone(),
            qa_dev: task.source_dev.clone(),
            qr_train: task.target_train.clone(),
        };
        let report = ablation_compare(&cfg, &model, &data, &task.source_test, &task.target_test).map_err(|e| e.to_string())?;
        println!("synthetic seed {seed}\n{}", report.table());
        gaps.push(100.0 * (report.with_adaptation.target.accuracy - report.without_adaptation.target.accuracy));
    }
    let took = within(Duration::from_secs(600), start)?;
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let detail = format!("gaps {:?} pts, mean {mean:.2}, {took:.1?}", gaps.iter().map(|g| (g * 100.0).round() / 100.0).collect::<Vec<_>>());
    check!(mean >= 10.0, "{detail}");
    Ok(detail)
}

fn metric_identities() -> Outcome {
    let mut runner = TestRunner::new(PropConfig {
        cases: 1000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let counts = (0u64..5000, 0u64..5000, 0u64..5000, 0u64..5000).prop_filter("n > 0", |c| c.0 + c.1 + c.2 + c.3 > 0);
    runner
        .run(&counts, |(tp, fp, tn, fn_)| {
            let r = EvalReport::from_counts("p", Confusion { tp, fp, tn, fn_ });
            let (tpf, fpf, tnf, fnf) = (tp as f64, fp as f64, tn as f64, fn_ as f64);
            let p = if tp + fp == 0 { 0.0 } else { tpf / (tpf + fpf) };
            let rc = if tp + fn_ == 0 { 0.0 } else { tpf / (tpf + fnf) };
            let f1 = if p + rc == 0.0 { 0.0 } else { 2.0 * p * rc / (p + rc) };
            prop_assert_eq!(r.n, tp + fp + tn + fn_);
            prop_assert!((r.accuracy - (tpf + tnf) / r.n as f64).abs() <= 1e-12);
            prop_assert!((r.precision - p).abs() <= 1e-12);
            prop_assert!((r.recall - rc).abs() <= 1e-12);
            prop_assert!((r.f1 - f1).abs() <= 1e-12);
            Ok(())
        })
        .map_err(|e| e.to_string())?;

    let gold: Vec<u8> = (0..10_000).map(|i| u8::from(i >= 7722)).collect();
    let majority = vec![0u8; gold.len()];
    let r = EvalReport::from_counts("majority", Confusion::from_pairs(&gold, &majority));
    check!(r.accuracy == 0.7722, "majority-class accuracy {}", r.accuracy);
    Ok("1000 random confusion matrices reconcile; majority class scores 0.7722".into())
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn fixture_config() -> IngestConfig {
    IngestConfig {
        categories: vec![CategorySource {
            name: "automotive".into(),
            qa: fixture("auto_qa.jsonl"),
            reviews: fixture("auto_reviews.jsonl"),
        }],
        gold: Some(fixture("gold_qr.tsv")),
        split: [0.5, 0.25, 0.25],
        ..IngestConfig::default()
    }
}

fn ingestion_fixture() -> Outcome {
    let out = data::run_ingest(&fixture_config(), 7).map_err(|e| e.to_string())?;
    let s = &out.stats;
    check!(
        (s.unique_asins, s.total_qa_pairs, s.total_reviews) == (3, 10, 3),
        "asins/qa pairs/reviews = {}/{}/{}",
        s.unique_asins,
        s.total_qa_pairs,
        s.total_reviews
    );
    let parse = &s.parsing["automotive/qa"];
    check!(parse.filtered == 2 && parse.malformed == 1, "qa filtered {} malformed {}", parse.filtered, parse.malformed);
    check!(s.parsing["automotive/reviews"].duplicates == 1, "duplicate review not removed");

    let all: Vec<&SentencePair> = out.qa.train.iter().chain(&out.qa.dev).chain(&out.qa.test).chain(&out.qr_train).collect();
    for p in &all {
        let same = p.asin == p.candidate_asin;
        match (p.kind, p.label) {
            (PairKind::Qa, Some(0)) => check!(!same, "negative shares its product: {p:?}"),
            _ => check!(same, "pair crosses products: {p:?}"),
        }
        check!(p.question != "Is it waterproof?", "yes/no question survived");
        check!(p.asin != "P9" && p.asin != "P8", "unmatched product survived");
    }
    Ok(format!("3 products, 10 QA pairs, 3 reviews; {} pairs checked", all.len()))
}

/// Ingest, train and evaluate the fixture; returns every artifact as bytes.
fn pipeline_bytes(dir: &std::path::Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let e = |e: prqa_core::Error| e.to_string();
    let out = data::run_ingest(&fixture_config(), 21).map_err(e)?;
    let mut files = Vec::new();
    for (name, pairs) in [("qa_train", &out.qa.train), ("qa_test", &out.qa.test), ("qr_train", &out.qr_train)] {
        let path = dir.join(name);
        data::write_pairs(&path, pairs).map_err(e)?;
        files.push((name.to_string(), std::fs::read(&path).map_err(|e| e.to_string())?));
    }
    files.push(("stats".into(), serde_json::to_vec(&out.stats).map_err(|e| e.to_string())?));

    let texts: Vec<Vec<String>> = out
        .qa
        .train
        .iter()
        .chain(&out.qr_train)
        .flat_map(|p| [tokenize(&p.question), tokenize(&p.candidate)])
        .collect();
    let vocab = build_vocab(&texts, 1).map_err(e)?;
    let cfg = ModelConfig {
        embed_dim: 6,
        hidden: 3,
        head_layers: [6, 4],
        ..ModelConfig::default()
    };
    let emb = EmbeddingTable::random(vocab.len(), cfg.embed_dim, 1);
    let model = PairModel::new(cfg, vocab, emb, 2).map_err(e)?;
    let enc = |pairs: &[SentencePair]| -> Result<Vec<EncodedPair>, String> {
        pairs
            .iter()
            .map(|p| model.encode_text(&p.question, &p.candidate, p.kind, p.label).map_err(e))
            .collect()
    };
    let data = TrainData {
        qa_train: enc(&out.qa.train)?,
        qa_dev: enc(&out.qa.dev)?,
        qr_train: enc(&out.qr_train)?,
    };
    let test = enc(&out.qa.test)?;
    let gold = enc(out.gold.as_deref().unwrap_or_default())?;
    let train_cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        seed: 5,
        ..TrainConfig::default()
    };
    let mut log = Vec::new();
    let mut hook = |l: &EpochLog, _: &PairModel, _: bool| {
        log.extend_from_slice(l.to_line().as_bytes());
        log.push(b'\n');
        Ok(())
    };
    let outcome = train_with_hook(&train_cfg, model.clone(), &data, &mut hook).map_err(e)?;
    files.push(("log".into(), log));
    files.push(("checkpoint".into(), checkpoint::to_bytes(&outcome.model, serde_json::Value::Null).map_err(e)?));
    for (name, set) in [("source", &test), ("target", &gold)] {
        let report = evaluate(&outcome.model, set, name).map_err(e)?;
        files.push((format!("report_{name}"), serde_json::to_vec(&report).map_err(|e| e.to_string())?));
    }
    Ok(files)
}

fn determinism() -> Outcome {
    let a_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = pipeline_bytes(a_dir.path())?;
    let b = pipeline_bytes(b_dir.path())?;
    for ((name, x), (_, y)) in a.iter().zip(&b) {
        check!(x == y, "{name} differs between runs");
    }
    Ok(format!("{} artifacts byte-identical across two runs", a.len()))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("gradient oracle", gradient_oracle),
        ("reversal property", reversal_property),
        ("mask exclusion", mask_exclusion),
        ("memorization", memorization),
        ("synthetic domain shift", synthetic_shift),
        ("metric identities", metric_identities),
        ("ingestion fixture", ingestion_fixture),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
