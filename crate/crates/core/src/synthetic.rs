//! Synthetic two-domain pair task.
//!
//! A question names one topic; a candidate is relevant when its content
//! token belongs to the same topic. Content tokens are shared by both
//! domains. Around the content token each candidate carries style tokens,
//! and the two domains draw them from disjoint vocabularies.
//!
//! Content embeddings live in the first half of the embedding space and
//! style embeddings in the second half. Target style tokens additionally
//! carry one shared offset vector inside the content half. A model fit to
//! source candidates alone reads that offset as content and mis-scores
//! target pairs unless its encoder learns to discard the direction, which is
//! what domain-adversarial training pushes it to do.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncodedPair, ModelConfig, PairKind};
use crate::text::{EmbeddingTable, Vocabulary, PAD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShiftConfig {
    pub topics: usize,
    pub tokens_per_topic: usize,
    pub style_tokens_per_domain: usize,
    pub question_fillers: usize,
    /// Style tokens placed around the content token of each candidate.
    pub style_len: usize,
    /// Embedding width; the first half holds content, the second style.
    pub embed_dim: usize,
    pub content_scale: f64,
    pub style_scale: f64,
    /// Norm of the content-space offset carried by target style tokens.
    pub shift_scale: f64,
    pub source_train: usize,
    pub target_train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for DomainShiftConfig {
    fn default() -> Self {
        DomainShiftConfig {
            topics: 2,
            tokens_per_topic: 2,
            style_tokens_per_domain: 4,
            question_fillers: 2,
            style_len: 3,
            embed_dim: 12,
            content_scale: 1.0,
            style_scale: 1.0,
            shift_scale: 3.0,
            source_train: 1000,
            target_train: 1000,
            dev: 64,
            test: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DomainShiftTask {
    pub vocab: Vocabulary,
    pub embeddings: EmbeddingTable,
    /// Labeled source pairs.
    pub source_train: Vec<EncodedPair>,
    pub source_dev: Vec<EncodedPair>,
    pub source_test: Vec<EncodedPair>,
    /// Unlabeled target pairs.
    pub target_train: Vec<EncodedPair>,
    /// Labeled target pairs, for evaluation only.
    pub target_test: Vec<EncodedPair>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Domain {
    Source,
    Target,
}

struct Layout {
    topic_tokens: Vec<Vec<usize>>,
    fillers: Vec<usize>,
    style: [Vec<usize>; 2],
}

fn random_direction(rng: &mut impl Rng, dims: std::ops::Range<usize>, total: usize, scale: f64) -> Vec<f64> {
    let mut v = vec![0.0; total];
    let mut norm = 0.0f64;
    for d in dims.clone() {
        v[d] = rng.sample::<f64, _>(StandardNormal);
        norm += v[d] * v[d];
    }
    let k = scale / norm.sqrt().max(1e-12);
    for d in dims {
        v[d] *= k;
    }
    v
}

impl DomainShiftTask {
    pub fn generate(config: &DomainShiftConfig, model: &ModelConfig) -> Result<Self> {
        if config.topics < 2 || config.tokens_per_topic == 0 || config.style_tokens_per_domain == 0 {
            return Err(Error::Config("synthetic task needs >= 2 topics and non-empty vocabularies".into()));
        }
        if config.embed_dim < 2 || config.embed_dim != model.embed_dim {
            return Err(Error::Config(format!(
                "synthetic embed_dim {} must be >= 2 and equal the model's {}",
                config.embed_dim, model.embed_dim
            )));
        }
        let mut names = Vec::new();
        let mut layout = Layout {
            topic_tokens: Vec::new(),
            fillers: Vec::new(),
            style: [Vec::new(), Vec::new()],
        };
        let mut next = 2;
        let mut take = |name: String, names: &mut Vec<String>| {
            names.push(name);
            next += 1;
            next - 1
        };
        for t in 0..config.topics {
            let toks = (0..config.tokens_per_topic)
                .map(|k| take(format!("topic{t}_{k}"), &mut names))
                .collect();
            layout.topic_tokens.push(toks);
        }

        for f in 0..config.question_fillers {
            layout.fillers.push(take(format!("ask{f}"), &mut names));
        }
        for (d, tag) in ["src", "tgt"].iter().enumerate() {
            for s in 0..config.style_tokens_per_domain {
                layout.style[d].push(take(format!("{tag}_style{s}"), &mut names));
            }
        }
        let vocab = Vocabulary::from_tokens(names)?;

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dim = config.embed_dim;
        let half = dim / 2;
        let mut values = vec![0.0; vocab.len() * dim];
        for idx in 0..vocab.len() {
            if idx == PAD {
                continue;
            }
            let name = vocab.token(idx).unwrap_or_default();
            let row = if name.contains("_style") {
                random_direction(&mut rng, half..dim, dim, config.style_scale)
            } else {
                random_direction(&mut rng, 0..half, dim, config.content_scale)
            };
            values[idx * dim..(idx + 1) * dim].copy_from_slice(&row);
        }
        // The offset is a random mix of topic embeddings, so it lies in the
        // directions a source-trained encoder actually responds to.
        let mut shift = vec![0.0f64; dim];
        for &t in layout.topic_tokens.iter().flatten() {
            let w: f64 = rng.sample(StandardNormal);
            for (s, v) in shift.iter_mut().zip(&values[t * dim..(t + 1) * dim]) {
                *s += w * v;
            }
        }
        let norm = shift.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for &t in &layout.style[1] {
            for (v, s) in values[t * dim..(t + 1) * dim].iter_mut().zip(&shift) {
                *v += s * config.shift_scale / norm;
            }
        }
        let embeddings = EmbeddingTable::new(dim, values, vec![false; vocab.len()])?;

        let mut make = |n: usize, domain: Domain, labeled: bool| -> Result<Vec<EncodedPair>> {
            (0..n)
                .map(|i| sample_pair(&mut rng, config, &layout, model, domain, labeled, i % 2 == 0))
                .collect()
        };
        let source_train = make(config.source_train, Domain::Source, true)?;
        let source_dev = make(config.dev, Domain::Source, true)?;
        let source_test = make(config.test, Domain::Source, true)?;
        let target_train = make(config.target_train, Domain::Target, false)?;
        let target_test = make(config.test, Domain::Target, true)?;
        Ok(DomainShiftTask {
            vocab,
            embeddings,
            source_train,
            source_dev,
            source_test,
            target_train,
            target_test,
        })
    }
}

fn pad_to(mut v: Vec<usize>, len: usize) -> Result<(Vec<usize>, usize)> {
    let n = v.len();
    if n > len {
        return Err(Error::Config(format!("synthetic sequence of {n} exceeds max length {len}")));
    }
    v.resize(len, PAD);
    Ok((v, n))
}

fn sample_pair(
    rng: &mut impl Rng,
    config: &DomainShiftConfig,
    layout: &Layout,
    model: &ModelConfig,
    domain: Domain,
    labeled: bool,
    relevant: bool,
) -> Result<EncodedPair> {
    let topic = rng.gen_range(0..config.topics);
    let mut question = vec![*layout.topic_tokens[topic].choose(rng).expect("non-empty topic")];
    if let Some(&f) = layout.fillers.choose(rng) {
        question.insert(0, f);
    }
    let cand_topic = if relevant {
        topic
    } else {
        let other = rng.gen_range(0..config.topics - 1);
        if other >= topic {
            other + 1
        } else {
            other
        }
    };
    let style = &layout.style[match domain {
        Domain::Source => 0,
        Domain::Target => 1,
    }];
    let mut candidate: Vec<usize> = (0..config.style_len)
        .map(|_| *style.choose(rng).expect("non-empty style"))
        .collect();
    let at = rng.gen_range(0..=candidate.len());
    candidate.insert(at, *layout.topic_tokens[cand_topic].choose(rng).expect("non-empty topic"));

    let (q, ql) = pad_to(question, model.max_question_len)?;
    let (c, cl) = pad_to(candidate, model.max_candidate_len)?;
    Ok(EncodedPair {
        question: q,
        question_len: ql,
        candidate: c,
        candidate_len: cl,
        kind: match domain {
            Domain::Source => PairKind::Qa,
            Domain::Target => PairKind::Qr,
        },
        label: labeled.then_some(u8::from(relevant)),
    })
}
