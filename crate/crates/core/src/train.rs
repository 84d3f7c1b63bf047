//! Minimax training over mixed QA/QR batches, evaluation, and the
//! with/without adaptation comparison.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, Graph, OptimizerState};
use crate::error::{Error, Result};
use crate::metrics::{Confusion, EvalReport};
use crate::model::{
    lambda_schedule, prediction_from_logits, BoundParams, DomainGate, EncodedPair, PairBatch,
    PairKind, PairModel,
};
use crate::seed::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// QA rows per `qa_share + qr_share` rows of a mixed batch.
    pub qa_share: usize,
    pub qr_share: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub adaptation: bool,
    /// Overrides the progress schedule with a constant reversal strength.
    pub fixed_lambda: Option<f64>,
    /// Multiplies the scheduled reversal strength; ignored when
    /// `fixed_lambda` is set.
    pub lambda_scale: f64,
    /// Emit a periodic checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            qa_share: 1,
            qr_share: 1,
            learning_rate: AdamConfig::default().learning_rate,
            seed: 0,
            adaptation: true,
            fixed_lambda: None,
            lambda_scale: 1.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.adaptation {
            if self.batch_size < 2 {
                return Err(Error::Config(
                    "batch_size must be >= 2 when adaptation is enabled".into(),
                ));
            }
            if self.qa_share == 0 || self.qr_share == 0 {
                return Err(Error::Config("qa_share and qr_share must be positive".into()));
            }
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.lambda_scale >= 0.0) || !self.lambda_scale.is_finite() {
            return Err(Error::Config(format!("lambda_scale must be finite and >= 0, got {}", self.lambda_scale)));
        }
        if let Some(l) = self.fixed_lambda {
            if !(l >= 0.0) {
                return Err(Error::Config(format!("fixed_lambda must be >= 0, got {l}")));
            }
        }
        Ok(())
    }

    /// QA and QR rows in a full mixed batch.
    pub fn batch_split(&self) -> (usize, usize) {
        if !self.adaptation {
            return (self.batch_size, 0);
        }
        let total = self.qa_share + self.qr_share;
        let qa = (self.batch_size * self.qa_share + total / 2) / total;
        let qa = qa.clamp(1, self.batch_size - 1);
        (qa, self.batch_size - qa)
    }
}

/// Encoded training material.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub qa_train: Vec<EncodedPair>,
    /// Held-out QA pairs used for model selection.
    pub qa_dev: Vec<EncodedPair>,
    pub qr_train: Vec<EncodedPair>,
}

fn strip_label(p: &EncodedPair) -> EncodedPair {
    EncodedPair {
        label: None,
        ..p.clone()
    }
}

/// Batches for one epoch. Mixed batches hold the configured QA:QR split;
/// the QR stream is recycled when it is shorter than the QA stream. Row
/// order inside each batch is shuffled.
pub fn make_batches(
    qa: &[EncodedPair],
    qr: &[EncodedPair],
    config: &TrainConfig,
    epoch: usize,
) -> Result<Vec<PairBatch>> {
    config.validate()?;
    if qa.is_empty() {
        return Err(Error::Config("no QA training pairs".into()));
    }
    if config.adaptation && qr.is_empty() {
        return Err(Error::Config(
            "adaptation is enabled but there are no QR pairs".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("batches/{epoch}")));
    let mut qa_order: Vec<usize> = (0..qa.len()).collect();
    qa_order.shuffle(&mut rng);
    let mut qr_order: Vec<usize> = (0..qr.len()).collect();
    qr_order.shuffle(&mut rng);
    let mut qr_cursor = 0;

    let (n_qa, n_qr) = config.batch_split();
    let mut batches = Vec::new();
    for chunk in qa_order.chunks(n_qa) {
        let mut rows: Vec<EncodedPair> = chunk
            .iter()
            .map(|&i| EncodedPair {
                kind: PairKind::Qa,
                ..qa[i].clone()
            })
            .collect();
        if config.adaptation {
            let want = (chunk.len() * n_qr).div_ceil(n_qa);
            for _ in 0..want {
                if qr_cursor == qr_order.len() {
                    qr_order.shuffle(&mut rng);
                    qr_cursor = 0;
                }
                let mut r = strip_label(&qr[qr_order[qr_cursor]]);
                r.kind = PairKind::Qr;
                rows.push(r);
                qr_cursor += 1;
            }
        }
        rows.shuffle(&mut rng);
        batches.push(PairBatch::new(rows)?);
    }
    Ok(batches)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub step: usize,
    pub epoch: usize,
    pub lambda: f64,
    pub qa_loss: f64,
    pub domain_loss: Option<f64>,
    pub domain_acc: Option<f64>,
    /// QA accuracy of the pre-update forward passes over the epoch.
    pub train_acc: f64,
    pub dev_acc: Option<f64>,
}

impl EpochLog {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("log line serializes")
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best dev accuracy, ties going to the later epoch
    /// (last epoch when there is no dev set).
    pub model: PairModel,
    pub best_epoch: usize,
    pub best_dev_acc: Option<f64>,
    pub log: Vec<EpochLog>,
}

/// Called after each epoch with the log line, the current parameters and
/// whether the epoch is due a periodic checkpoint.
pub type EpochHook<'a> = dyn FnMut(&EpochLog, &PairModel, bool) -> Result<()> + 'a;

pub fn train(config: &TrainConfig, model: PairModel, data: &TrainData) -> Result<TrainOutcome> {
    train_with_hook(config, model, data, &mut |_, _, _| Ok(()))
}

pub fn train_with_hook(
    config: &TrainConfig,
    mut model: PairModel,
    data: &TrainData,
    hook: &mut EpochHook<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let qr: &[EncodedPair] = if config.adaptation { &data.qr_train } else { &[] };
    let per_epoch = make_batches(&data.qa_train, qr, config, 0)?.len();
    let total_steps = per_epoch * config.epochs;
    let adam = AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut opt = OptimizerState::new(&model.params.store, adam)?;
    let mut step = 0usize;
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, PairModel)> = None;

    for epoch in 1..=config.epochs {
        let batches = make_batches(&data.qa_train, qr, config, epoch)?;
        let mut qa_sum = 0.0;
        let mut qa_batches = 0usize;
        let mut dom_sum = 0.0;
        let mut dom_correct = 0usize;
        let mut dom_seen = 0usize;
        let mut qa_correct = 0usize;
        let mut qa_seen = 0usize;
        let mut lambda = 0.0;

        for (b, batch) in batches.iter().enumerate() {
            lambda = match config.fixed_lambda {
                Some(l) => l,
                None => config.lambda_scale * lambda_schedule(step as f64 / total_steps as f64)?,
            };
            let gate = config.adaptation.then_some(DomainGate::Reverse(lambda));
            let mut g = Graph::new();
            let bound = BoundParams::bind(&mut g, &model.params);
            let diverged = |qa: f64, dom: f64| Error::Divergence {
                step,
                epoch,
                batch: b,
                lambda,
                qa_loss: qa,
                domain_loss: dom,
            };
            let parts = match model.total_loss(&mut g, &bound, batch, gate) {
                Ok(p) => p,
                Err(Error::Numeric(_)) => return Err(diverged(f64::NAN, f64::NAN)),
                Err(e) => return Err(e),
            };
            let qa_loss = g.values(parts.qa)[0];
            let dom_loss = parts.domain.map_or(0.0, |d| g.values(d)[0]);
            if !qa_loss.is_finite() || !dom_loss.is_finite() {
                return Err(diverged(qa_loss, dom_loss));
            }

            let qa_logits = g.values(parts.forward.qa_logits);
            for (r, row) in batch.rows().iter().enumerate() {
                if let (PairKind::Qa, Some(label)) = (row.kind, row.label) {
                    qa_seen += 1;
                    if prediction_from_logits(&qa_logits[2 * r..2 * r + 2]).label == label {
                        qa_correct += 1;
                    }
                }
            }
            if batch.qa_count() > 0 {
                qa_sum += qa_loss;
                qa_batches += 1;
            }
            if let Some(d) = parts.forward.domain_logits {
                dom_sum += dom_loss;
                let z = g.values(d);
                for (r, row) in batch.rows().iter().enumerate() {
                    let predicted = usize::from(z[2 * r + 1] > z[2 * r]);
                    dom_correct += usize::from(predicted == row.kind.domain_label());
                    dom_seen += 1;
                }
            }

            g.backward(parts.total)?;
            g.accumulate_param_grads(&mut model.params.store);
            adam_step(&mut model.params.store, &mut opt)?;
            step += 1;
        }

        let dev_acc = if data.qa_dev.is_empty() {
            None
        } else {
            Some(evaluate(&model, &data.qa_dev, "dev")?.accuracy)
        };
        let entry = EpochLog {
            step,
            epoch,
            lambda,
            qa_loss: if qa_batches > 0 { qa_sum / qa_batches as f64 } else { 0.0 },
            domain_loss: config.adaptation.then(|| dom_sum / batches.len() as f64),
            domain_acc: config
                .adaptation
                .then(|| dom_correct as f64 / dom_seen.max(1) as f64),
            train_acc: qa_correct as f64 / qa_seen.max(1) as f64,
            dev_acc,
        };
        log::info!("{}", entry.to_line());

        let improved = match (&best, dev_acc) {
            (None, _) => true,
            (Some(_), None) => true,
            (Some((b, _, _)), Some(a)) => a >= *b,
        };
        if improved {
            best = Some((dev_acc.unwrap_or(0.0), epoch, model.clone()));
        }
        let due = config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0;
        hook(&entry, &model, due)?;
        log.push(entry);
    }

    let (acc, best_epoch, best_model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model: best_model,
        best_epoch,
        best_dev_acc: (!data.qa_dev.is_empty()).then_some(acc),
        log,
    })
}

/// Predicts every pair and tallies the confusion counts.
pub fn evaluate(model: &PairModel, pairs: &[EncodedPair], dataset: &str) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Usage(format!("evaluation set {dataset:?} is empty")));
    }
    let mut gold = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        match p.label {
            Some(l @ (0 | 1)) => gold.push(l),
            _ => {
                return Err(Error::Data(format!(
                    "evaluation pair {i} in {dataset:?} has no 0/1 label"
                )))
            }
        }
    }
    let predicted: Vec<u8> = model.predict_pairs(pairs)?.iter().map(|p| p.label).collect();
    Ok(EvalReport::from_counts(dataset, Confusion::from_pairs(&gold, &predicted)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub adaptation: bool,
    pub source: EvalReport,
    pub target: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub without_adaptation: ArmReport,
    pub with_adaptation: ArmReport,
}

impl AblationReport {
    /// Four rows: each arm evaluated on source and target data.
    pub fn table(&self) -> String {
        let mut out = format!("{:<34}| Train  | Eval   | Accuracy\n", "Model");
        out.push_str(&format!("{}+--------+--------+---------\n", "-".repeat(34)));
        for (name, arm) in [
            ("No domain-adapt", &self.without_adaptation),
            ("Domain-adapt", &self.with_adaptation),
        ] {
            for (eval, r) in [("Source", &arm.source), ("Target", &arm.target)] {
                out.push_str(&format!(
                    "{:<34}| Source | {:<6} | {:>7.2}%\n",
                    format!("{name} (Eval on {eval})"),
                    eval,
                    100.0 * r.accuracy
                ));
            }
        }
        out
    }
}

/// Trains the same initial model with and without the domain branch and
/// evaluates both on the source and target test sets.
pub fn ablation_compare(
    config: &TrainConfig,
    initial: &PairModel,
    data: &TrainData,
    source_test: &[EncodedPair],
    target_test: &[EncodedPair],
) -> Result<AblationReport> {
    let arm = |adaptation: bool| -> Result<ArmReport> {
        let cfg = TrainConfig {
            adaptation,
            ..config.clone()
        };
        let trained = train(&cfg, initial.clone(), data)?.model;
        Ok(ArmReport {
            adaptation,
            source: evaluate(&trained, source_test, "source")?,
            target: evaluate(&trained, target_test, "target")?,
        })
    };
    Ok(AblationReport {
        without_adaptation: arm(false)?,
        with_adaptation: arm(true)?,
    })
}
