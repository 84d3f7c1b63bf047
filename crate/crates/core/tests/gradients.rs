//! Analytic gradients of the pair model against central finite differences.

mod common;

use common::{tiny_model, worst_error, batch, REL_TOL};
use prqa_core::model::DomainGate;

#[test]
fn reversed_gradients_match_finite_differences() {
    let mut model = tiny_model(4);
    let (worst, n) = worst_error(&mut model, &batch(), DomainGate::Reverse(1.0));
    assert_eq!(n, model.params.store.numel());
    assert!(worst <= REL_TOL);
}

#[test]
fn plain_gradients_match_finite_differences() {
    let mut model = tiny_model(5);
    let (worst, _) = worst_error(&mut model, &batch(), DomainGate::Identity);
    assert!(worst <= REL_TOL);
}

#[test]
fn partial_reversal_matches_finite_differences() {
    let mut model = tiny_model(6);
    let (worst, _) = worst_error(&mut model, &batch(), DomainGate::Reverse(0.35));
    assert!(worst <= REL_TOL);
}
