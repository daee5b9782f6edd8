//! Reverse-mode gradients against central finite differences.

mod support;

use support::grad;

#[test]
fn matmul() {
    grad::matmul();
}

#[test]
fn broadcasting_binary_ops() {
    grad::broadcasting_binary_ops();
}

#[test]
fn elementwise_ops() {
    grad::elementwise_ops();
}

#[test]
fn softmax_every_axis() {
    grad::softmax_every_axis();
}

#[test]
fn layer_norm() {
    grad::layer_norm();
}

#[test]
fn indexing_ops() {
    grad::indexing_ops();
}

#[test]
fn losses() {
    grad::losses();
}

#[test]
fn tiny_model_loss_end_to_end() {
    grad::tiny_model_loss_end_to_end();
}
