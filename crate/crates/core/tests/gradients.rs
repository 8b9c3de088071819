mod common;

use std::time::Instant;

use common::grad::{self, TOL};
use common::GradCheck;

fn assert_all(cases: Vec<(String, GradCheck)>) {
    for (name, c) in cases {
        assert!(c.ok(TOL), "{name}: {c:?}");
    }
}

#[test]
fn projection_head_gradients() {
    assert_all(grad::projection_head());
}

#[test]
fn cross_attention_gradients() {
    let cases = grad::cross_attention();
    assert!(cases[0].1.checked >= 16 * 8, "{}", cases[0].1.checked);
    assert_all(cases);
}

#[test]
fn both_loss_modes_gradients() {
    let cases = grad::loss_modes();
    assert_eq!(cases.len(), 6);
    for (_, c) in &cases {
        assert_eq!(c.checked, 2 * 6 * 5);
    }
    assert_all(cases);
}

#[test]
fn tiny_end_to_end_model_gradients() {
    let start = Instant::now();
    assert_all(grad::end_to_end_models());
    assert!(start.elapsed().as_secs() < 30);
}
