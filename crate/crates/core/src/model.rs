//! Sentence-pair classifier with a domain-adversarial branch.
//!
//! Question and candidate (answer or review sentence) are encoded by two
//! disjoint bidirectional LSTMs. The two encodings are concatenated into the
//! pair representation, which feeds
//!
//! * the QA head, whose loss is only taken over question-answer rows, and
//! * the domain head, placed behind a gradient reversal node so that the
//!   encoders are pushed toward features that do not reveal whether the
//!   candidate is an answer or a review.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::text::{encode_sequence, tokenize, EmbeddingTable, Vocabulary, GLOVE_DIM};

/// Number of LSTM gates; gate blocks are laid out as input, forget, cell, output.
pub const GATES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    /// Hidden size of each LSTM direction.
    pub hidden: usize,
    /// Widths of the two hidden layers in each classifier head.
    pub head_layers: [usize; 2],
    pub init_range: f64,
    pub forget_bias: f64,
    pub max_question_len: usize,
    pub max_candidate_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: GLOVE_DIM,
            hidden: 300,
            head_layers: [512, 256],
            init_range: 0.08,
            forget_bias: 1.0,
            max_question_len: 50,
            max_candidate_len: 65,
        }
    }
}

impl ModelConfig {
    pub fn encoding_dim(&self) -> usize {
        2 * self.hidden
    }

    pub fn pair_dim(&self) -> usize {
        4 * self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.embed_dim,
            self.hidden,
            self.head_layers[0],
            self.head_layers[1],
            self.max_question_len,
            self.max_candidate_len,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if !(self.init_range >= 0.0) {
            return Err(Error::Config("init_range must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairKind {
    /// Question with a forum answer (source domain, labeled).
    #[serde(rename = "QA")]
    Qa,
    /// Question with a review sentence (target domain).
    #[serde(rename = "QR")]
    Qr,
}

impl PairKind {
    /// Domain class: 0 for answers, 1 for reviews.
    pub fn domain_label(self) -> usize {
        match self {
            PairKind::Qa => 0,
            PairKind::Qr => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PairKind::Qa => "QA",
            PairKind::Qr => "QR",
        }
    }
}

/// Index form of one question/candidate pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub question: Vec<usize>,
    pub question_len: usize,
    pub candidate: Vec<usize>,
    pub candidate_len: usize,
    pub kind: PairKind,
    pub label: Option<u8>,
}

impl EncodedPair {
    pub fn from_tokens<S: AsRef<str>>(
        question: &[S],
        candidate: &[S],
        kind: PairKind,
        label: Option<u8>,
        vocab: &Vocabulary,
        config: &ModelConfig,
    ) -> Result<Self> {
        let (q, ql) = encode_sequence(question, vocab, config.max_question_len)?;
        let (c, cl) = encode_sequence(candidate, vocab, config.max_candidate_len)?;
        Ok(EncodedPair {
            question: q,
            question_len: ql,
            candidate: c,
            candidate_len: cl,
            kind,
            label,
        })
    }
}

/// Rows for one training step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairBatch {
    rows: Vec<EncodedPair>,
}

impl PairBatch {
    pub fn new(rows: Vec<EncodedPair>) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            match (r.kind, r.label) {
                (PairKind::Qa, None) => {
                    return Err(Error::Data(format!("QA row {i} has no label")))
                }
                (PairKind::Qr, Some(_)) => {
                    return Err(Error::Data(format!("QR row {i} carries a label")))
                }
                (_, Some(l)) if l > 1 => {
                    return Err(Error::Data(format!("row {i} has label {l}")))
                }
                _ => {}
            }
        }
        Ok(PairBatch { rows })
    }

    pub fn rows(&self) -> &[EncodedPair] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn qa_count(&self) -> usize {
        self.rows.iter().filter(|r| r.kind == PairKind::Qa).count()
    }

    pub fn qa_targets(&self) -> Vec<Option<usize>> {
        self.rows
            .iter()
            .map(|r| match r.kind {
                PairKind::Qa => r.label.map(usize::from),
                PairKind::Qr => None,
            })
            .collect()
    }

    pub fn domain_targets(&self) -> Vec<Option<usize>> {
        self.rows.iter().map(|r| Some(r.kind.domain_label())).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LstmDirection {
    /// `[embed, 4h]`
    pub w_input: ParamId,
    /// `[h, 4h]`
    pub w_recurrent: ParamId,
    /// `[4h]`
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiLstmParams {
    pub forward: LstmDirection,
    pub backward: LstmDirection,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadParams {
    pub layers: [Dense; 3],
}

/// All trainable tensors plus typed handles into them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub store: ParamStore,
    pub question_encoder: BiLstmParams,
    pub candidate_encoder: BiLstmParams,
    pub qa_head: HeadParams,
    pub domain_head: HeadParams,
}

/// Name and shape of every tensor, in store order.
pub fn parameter_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (e, h) = (config.embed_dim, config.hidden);
    let mut out = Vec::new();
    for enc in ["question_encoder", "candidate_encoder"] {
        for dir in ["forward", "backward"] {
            out.push((format!("{enc}.{dir}.w_input"), vec![e, GATES * h]));
            out.push((format!("{enc}.{dir}.w_recurrent"), vec![h, GATES * h]));
            out.push((format!("{enc}.{dir}.bias"), vec![GATES * h]));
        }
    }
    let widths = [config.pair_dim(), config.head_layers[0], config.head_layers[1], 2];
    for head in ["qa_head", "domain_head"] {
        for l in 0..3 {
            out.push((format!("{head}.layer{l}.weight"), vec![widths[l], widths[l + 1]]));
            out.push((format!("{head}.layer{l}.bias"), vec![widths[l + 1]]));
        }
    }
    out
}

impl ModelParams {
    /// Uniform `[-init_range, init_range]` weights, zero biases, forget-gate
    /// biases at `forget_bias`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = config.init_range;
        let h = config.hidden;
        let mut store = ParamStore::new();
        for (name, shape) in parameter_layout(config) {
            let n: usize = shape.iter().product();
            let values: Vec<f64> = if name.ends_with(".bias") {
                let mut b = vec![0.0; n];
                if name.contains("_encoder.") {
                    b[h..2 * h].iter_mut().for_each(|v| *v = config.forget_bias);
                }
                b
            } else if r > 0.0 {
                (0..n).map(|_| rng.gen_range(-r..=r)).collect()
            } else {
                vec![0.0; n]
            };
            store.insert(name, Tensor::new(shape, values)?)?;
        }
        Self::from_store(config, store)
    }

    /// Binds typed handles to a store, checking that every expected tensor
    /// is present with the right shape and nothing else is.
    pub fn from_store(config: &ModelConfig, store: ParamStore) -> Result<Self> {
        let layout = parameter_layout(config);
        if layout.len() != store.len() {
            return Err(Error::Data(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                store.len()
            )));
        }
        for (name, shape) in &layout {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Data(format!("missing parameter {name}")))?;
            if store.get(id).shape() != shape.as_slice() {
                return Err(Error::Data(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    store.get(id).shape()
                )));
            }
        }
        let id = |n: String| store.id(&n).expect("checked above");
        let dir = |enc: &str, d: &str| LstmDirection {
            w_input: id(format!("{enc}.{d}.w_input")),
            w_recurrent: id(format!("{enc}.{d}.w_recurrent")),
            bias: id(format!("{enc}.{d}.bias")),
        };
        let enc = |e: &str| BiLstmParams {
            forward: dir(e, "forward"),
            backward: dir(e, "backward"),
        };
        let head = |hd: &str| HeadParams {
            layers: [0, 1, 2].map(|l| Dense {
                weight: id(format!("{hd}.layer{l}.weight")),
                bias: id(format!("{hd}.layer{l}.bias")),
            }),
        };
        Ok(ModelParams {
            question_encoder: enc("question_encoder"),
            candidate_encoder: enc("candidate_encoder"),
            qa_head: head("qa_head"),
            domain_head: head("domain_head"),
            store,
        })
    }

    pub fn encoder_ids(&self) -> Vec<ParamId> {
        [self.question_encoder, self.candidate_encoder]
            .iter()
            .flat_map(|e| [e.forward, e.backward])
            .flat_map(|d| [d.w_input, d.w_recurrent, d.bias])
            .collect()
    }

    pub fn head_ids(head: &HeadParams) -> Vec<ParamId> {
        head.layers.iter().flat_map(|d| [d.weight, d.bias]).collect()
    }
}

/// How the domain head is attached to the pair representation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DomainGate {
    /// Gradient reversal scaled by lambda.
    Reverse(f64),
    /// Plain connection; used to check the sign of the reversal.
    Identity,
}

#[derive(Clone, Copy, Debug)]
struct BoundDirection {
    w_input: Var,
    w_recurrent: Var,
    bias: Var,
}

#[derive(Clone, Copy, Debug)]
struct BoundHead {
    layers: [(Var, Var); 3],
}

/// Parameter leaves of one graph.
#[derive(Clone, Copy, Debug)]
pub struct BoundParams {
    question: [BoundDirection; 2],
    candidate: [BoundDirection; 2],
    qa_head: BoundHead,
    domain_head: BoundHead,
}

impl BoundParams {
    pub fn bind(graph: &mut Graph, params: &ModelParams) -> Self {
        let store = &params.store;
        let mut dir = |d: &LstmDirection| BoundDirection {
            w_input: graph.param(store, d.w_input),
            w_recurrent: graph.param(store, d.w_recurrent),
            bias: graph.param(store, d.bias),
        };
        let question = [dir(&params.question_encoder.forward), dir(&params.question_encoder.backward)];
        let candidate = [dir(&params.candidate_encoder.forward), dir(&params.candidate_encoder.backward)];
        let mut head = |h: &HeadParams| BoundHead {
            layers: h.layers.map(|d| (graph.param(store, d.weight), graph.param(store, d.bias))),
        };
        let qa_head = head(&params.qa_head);
        let domain_head = head(&params.domain_head);
        BoundParams {
            question,
            candidate,
            qa_head,
            domain_head,
        }
    }
}

/// Which of the two encoders to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Question,
    Candidate,
}

fn run_direction(
    g: &mut Graph,
    projected: Var,
    dir: &BoundDirection,
    order: impl Iterator<Item = usize>,
    hidden: usize,
) -> Result<Var> {
    let mut state: Option<(Var, Var)> = None;
    for t in order {
        let xt = g.row(projected, t)?;
        let gates = match state {
            Some((h_prev, _)) => {
                let rec = g.matmul(h_prev, dir.w_recurrent)?;
                g.add(xt, rec)?
            }
            None => xt,
        };
        let i_pre = g.slice_last(gates, 0, hidden)?;
        let f_pre = g.slice_last(gates, hidden, hidden)?;
        let c_pre = g.slice_last(gates, 2 * hidden, hidden)?;
        let o_pre = g.slice_last(gates, 3 * hidden, hidden)?;
        let i = g.sigmoid(i_pre);
        let f = g.sigmoid(f_pre);
        let cand = g.tanh(c_pre);
        let o = g.sigmoid(o_pre);
        let write = g.mul(i, cand)?;
        let c = match state {
            Some((_, c_prev)) => {
                let keep = g.mul(f, c_prev)?;
                g.add(keep, write)?
            }
            None => write,
        };
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        state = Some((h, c));
    }
    state
        .map(|(h, _)| h)
        .ok_or_else(|| Error::Usage("cannot encode an empty sequence".into()))
}

/// Runs both LSTM directions over the first `length` tokens and returns
/// `[forward final state; backward final state]` as a vector of `2h`.
pub fn bilstm_encode(
    g: &mut Graph,
    bound: &BoundParams,
    side: Side,
    indices: &[usize],
    length: usize,
    embeddings: &EmbeddingTable,
    hidden: usize,
) -> Result<Var> {
    if length == 0 {
        return Err(Error::Usage("sequence length must be >= 1".into()));
    }
    if length > indices.len() {
        return Err(Error::Usage(format!(
            "length {length} exceeds index array of {}",
            indices.len()
        )));
    }
    let dirs = match side {
        Side::Question => &bound.question,
        Side::Candidate => &bound.candidate,
    };
    let x = embeddings.gather(&indices[..length])?;
    let x = g.constant(Tensor::matrix(length, embeddings.dim(), x)?);
    let mut finals = [None; 2];
    for (k, dir) in dirs.iter().enumerate() {
        let xw = g.matmul(x, dir.w_input)?;
        let projected = g.add_row_broadcast(xw, dir.bias)?;
        finals[k] = Some(if k == 0 {
            run_direction(g, projected, dir, 0..length, hidden)?
        } else {
            run_direction(g, projected, dir, (0..length).rev(), hidden)?
        });
    }
    let joined = g.concat(finals[0].unwrap(), finals[1].unwrap())?;
    g.reshape(joined, vec![2 * hidden])
}

fn head_forward(g: &mut Graph, head: &BoundHead, x: Var) -> Result<Var> {
    let mut h = x;
    for (l, (w, b)) in head.layers.iter().enumerate() {
        let z = g.matmul(h, *w)?;
        let z = g.add_row_broadcast(z, *b)?;
        h = if l < 2 { g.tanh(z) } else { z };
    }
    Ok(h)
}

#[derive(Clone, Copy, Debug)]
pub struct PairForward {
    /// `[n, 4h]`, question encoding then candidate encoding per row.
    pub pair: Var,
    pub qa_logits: Var,
    /// `None` when the domain branch was not built.
    pub domain_logits: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub qa: Var,
    pub domain: Option<Var>,
    pub forward: PairForward,
}

/// Pair representations for every row, stacked to `[n, 4h]`.
pub fn encode_pairs(
    g: &mut Graph,
    bound: &BoundParams,
    rows: &[EncodedPair],
    model: &PairModel,
) -> Result<Var> {
    if rows.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let h = model.config.hidden;
    let mut reps = Vec::with_capacity(rows.len());
    for r in rows {
        let vq = bilstm_encode(g, bound, Side::Question, &r.question, r.question_len, &model.embeddings, h)?;
        let vc = bilstm_encode(g, bound, Side::Candidate, &r.candidate, r.candidate_len, &model.embeddings, h)?;
        reps.push(g.concat(vq, vc)?);
    }
    g.stack_rows(&reps)
}

/// Immutable bundle of everything needed to run the network.
#[derive(Clone, Debug, PartialEq)]
pub struct PairModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub embeddings: EmbeddingTable,
    pub params: ModelParams,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub label: u8,
    pub confidence: f64,
}

/// Softmax over two logits with ties going to label 0.
pub fn prediction_from_logits(logits: &[f64]) -> Prediction {
    let max = logits[0].max(logits[1]);
    let e0 = (logits[0] - max).exp();
    let e1 = (logits[1] - max).exp();
    let (p0, p1) = (e0 / (e0 + e1), e1 / (e0 + e1));
    if p1 > p0 {
        Prediction {
            label: 1,
            confidence: p1,
        }
    } else {
        Prediction {
            label: 0,
            confidence: p0,
        }
    }
}

/// Rows per graph when predicting a list of pairs.
const PREDICT_CHUNK: usize = 32;

impl PairModel {
    pub fn new(config: ModelConfig, vocab: Vocabulary, embeddings: EmbeddingTable, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Self::from_parts(config, vocab, embeddings, params)
    }

    pub fn from_parts(
        config: ModelConfig,
        vocab: Vocabulary,
        embeddings: EmbeddingTable,
        params: ModelParams,
    ) -> Result<Self> {
        config.validate()?;
        if embeddings.dim() != config.embed_dim || embeddings.rows() != vocab.len() {
            return Err(Error::Dimension {
                op: "pair_model",
                lhs: vec![vocab.len(), config.embed_dim],
                rhs: vec![embeddings.rows(), embeddings.dim()],
            });
        }
        Ok(PairModel {
            config,
            vocab,
            embeddings,
            params,
        })
    }

    /// QA logits for every row, and domain logits behind `gate` when
    /// `with_domain` is set.
    pub fn forward_pair(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        batch: &PairBatch,
        gate: Option<DomainGate>,
    ) -> Result<PairForward> {
        let pair = encode_pairs(g, bound, batch.rows(), self)?;
        let qa_logits = head_forward(g, &bound.qa_head, pair)?;
        let domain_logits = match gate {
            None => None,
            Some(DomainGate::Reverse(lambda)) => {
                let flipped = g.grad_reverse(pair, lambda)?;
                Some(head_forward(g, &bound.domain_head, flipped)?)
            }
            Some(DomainGate::Identity) => Some(head_forward(g, &bound.domain_head, pair)?),
        };
        Ok(PairForward {
            pair,
            qa_logits,
            domain_logits,
        })
    }

    /// QA head loss plus, when `gate` is given, the domain loss.
    pub fn total_loss(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        batch: &PairBatch,
        gate: Option<DomainGate>,
    ) -> Result<LossParts> {
        let forward = self.forward_pair(g, bound, batch, gate)?;
        let qa = masked_qa_loss(g, forward.qa_logits, batch)?;
        let domain = match forward.domain_logits {
            Some(d) => Some(domain_loss(g, d, batch)?),
            None => None,
        };
        let total = match domain {
            Some(d) => g.add(qa, d)?,
            None => qa,
        };
        Ok(LossParts {
            total,
            qa,
            domain,
            forward,
        })
    }

    pub fn encode_text(&self, question: &str, candidate: &str, kind: PairKind, label: Option<u8>) -> Result<EncodedPair> {
        let q = tokenize(question);
        let c = tokenize(candidate);
        if q.is_empty() || c.is_empty() {
            return Err(Error::Usage("question and candidate must contain at least one token".into()));
        }
        EncodedPair::from_tokens(&q, &c, kind, label, &self.vocab, &self.config)
    }

    pub fn predict(&self, question: &str, candidate: &str) -> Result<Prediction> {
        let pair = self.encode_text(question, candidate, PairKind::Qr, None)?;
        Ok(self.predict_pairs(std::slice::from_ref(&pair))?[0])
    }

    /// Predictions for many pairs; chunks run on separate graphs in parallel.
    pub fn predict_pairs(&self, pairs: &[EncodedPair]) -> Result<Vec<Prediction>> {
        let chunks: Vec<Result<Vec<Prediction>>> = pairs
            .par_chunks(PREDICT_CHUNK)
            .map(|chunk| {
                let mut g = Graph::new();
                let bound = BoundParams::bind(&mut g, &self.params);
                let pair = encode_pairs(&mut g, &bound, chunk, self)?;
                let logits = head_forward(&mut g, &bound.qa_head, pair)?;
                Ok(g.values(logits).chunks(2).map(prediction_from_logits).collect())
            })
            .collect();
        let mut out = Vec::with_capacity(pairs.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }
}

/// Mean cross-entropy over the QA rows only. With no QA rows the result is
/// a constant zero with no edges into the graph.
pub fn masked_qa_loss(g: &mut Graph, qa_logits: Var, batch: &PairBatch) -> Result<Var> {
    if g.shape(qa_logits).first() != Some(&batch.len()) {
        return Err(Error::Dimension {
            op: "masked_qa_loss",
            lhs: g.shape(qa_logits).to_vec(),
            rhs: vec![batch.len()],
        });
    }
    let mut targets = Vec::with_capacity(batch.len());
    for (i, r) in batch.rows().iter().enumerate() {
        targets.push(match (r.kind, r.label) {
            (PairKind::Qa, Some(l)) => Some(usize::from(l)),
            (PairKind::Qa, None) => return Err(Error::Data(format!("QA row {i} has no label"))),
            (PairKind::Qr, _) => None,
        });
    }
    if targets.iter().all(Option::is_none) {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    g.masked_softmax_cross_entropy(qa_logits, &targets)
}

/// Mean cross-entropy of the domain head against answer/review labels.
pub fn domain_loss(g: &mut Graph, domain_logits: Var, batch: &PairBatch) -> Result<Var> {
    if g.shape(domain_logits).first() != Some(&batch.len()) {
        return Err(Error::Dimension {
            op: "domain_loss",
            lhs: g.shape(domain_logits).to_vec(),
            rhs: vec![batch.len()],
        });
    }
    g.masked_softmax_cross_entropy(domain_logits, &batch.domain_targets())
}

/// Reversal strength as a function of training progress in `[0, 1]`:
/// `2 / (1 + exp(-10 p)) - 1`.
pub fn lambda_schedule(progress: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&progress) {
        return Err(Error::Parameter(format!(
            "progress must lie in [0, 1], got {progress}"
        )));
    }
    Ok(2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0)
}
