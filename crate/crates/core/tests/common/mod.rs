//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use prqa_core::autodiff::{Graph, ParamId};
use prqa_core::model::{BoundParams, DomainGate, EncodedPair, ModelConfig, PairBatch, PairKind, PairModel};
use prqa_core::text::{EmbeddingTable, Vocabulary};

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-3;
/// Denominator floor for the relative error of near-zero gradients.
pub const ABS_FLOOR: f64 = 1e-7;

pub fn tiny_model(seed: u64) -> PairModel {
    let cfg = ModelConfig {
        embed_dim: 5,
        hidden: 4,
        head_layers: [6, 5],
        init_range: 0.5,
        max_question_len: 3,
        max_candidate_len: 3,
        ..ModelConfig::default()
    };
    let vocab = Vocabulary::from_tokens(["a", "b", "c", "d", "e", "f", "g", "h"]).unwrap();
    assert_eq!(vocab.len(), 10);
    let emb = EmbeddingTable::random(vocab.len(), cfg.embed_dim, seed ^ 0xabc);
    let mut m = PairModel::new(cfg, vocab, emb, seed).unwrap();
    // Scale up embeddings so gradients are not vanishingly small.
    let scaled: Vec<f64> = m.embeddings.values().iter().map(|v| v * 10.0).collect();
    let flags: Vec<bool> = (0..m.embeddings.rows()).map(|_| false).collect();
    m.embeddings = EmbeddingTable::new(m.config.embed_dim, scaled, flags).unwrap();
    m
}

pub fn batch() -> PairBatch {
    PairBatch::new(vec![
        EncodedPair {
            question: vec![2, 5, 7],
            question_len: 3,
            candidate: vec![3, 9, 4],
            candidate_len: 3,
            kind: PairKind::Qa,
            label: Some(1),
        },
        EncodedPair {
            question: vec![8, 2, 6],
            question_len: 3,
            candidate: vec![5, 5, 1],
            candidate_len: 3,
            kind: PairKind::Qr,
            label: None,
        },
    ])
    .unwrap()
}

/// (qa loss, domain loss) by a plain forward pass.
pub fn losses(model: &PairModel, batch: &PairBatch) -> (f64, f64) {
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, &model.params);
    let parts = model
        .total_loss(&mut g, &bound, batch, Some(DomainGate::Identity))
        .unwrap();
    (g.values(parts.qa)[0], g.values(parts.domain.unwrap())[0])
}

pub fn analytic(model: &mut PairModel, batch: &PairBatch, gate: DomainGate) {
    model.params.store.zero_grad();
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, &model.params);
    let parts = model.total_loss(&mut g, &bound, batch, Some(gate)).unwrap();
    g.backward(parts.total).unwrap();
    g.accumulate_param_grads(&mut model.params.store);
}

/// Worst relative error over every parameter element. Encoder parameters
/// are compared with d(qa)/dθ - λ d(domain)/dθ, head parameters with
/// d(qa + domain)/dθ.
pub fn worst_error(model: &mut PairModel, batch: &PairBatch, gate: DomainGate) -> (f64, usize) {
    analytic(model, batch, gate);
    let encoder: Vec<ParamId> = model.params.encoder_ids();
    let enc_scale = match gate {
        DomainGate::Reverse(l) => -l,
        DomainGate::Identity => 1.0,
    };
    let ids: Vec<ParamId> = model.params.store.ids().collect();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for id in ids {
        let scale = if encoder.contains(&id) { enc_scale } else { 1.0 };
        for j in 0..model.params.store.get(id).len() {
            let orig = model.params.store.get(id).values()[j];
            model.params.store.get_mut(id).values_mut()[j] = orig + H;
            let (qp, dp) = losses(model, batch);
            model.params.store.get_mut(id).values_mut()[j] = orig - H;
            let (qm, dm) = losses(model, batch);
            model.params.store.get_mut(id).values_mut()[j] = orig;
            let numeric = ((qp - qm) + scale * (dp - dm)) / (2.0 * H);
            let a = model.params.store.get(id).grad()[j];
            let denom = a.abs().max(numeric.abs()).max(ABS_FLOOR);
            let err = (a - numeric).abs() / denom;
            assert!(
                err <= REL_TOL,
                "{}[{j}]: analytic {a:e} numeric {numeric:e}",
                model.params.store.name(id)
            );
            worst = worst.max(err);
            checked += 1;
        }
    }
    (worst, checked)
}

