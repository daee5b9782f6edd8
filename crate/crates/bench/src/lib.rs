//! Fixtures shared by the benchmarks.

use acn_core::model::ModelConfig;
use acn_core::train::Sequence;
use acn_core::Model;

/// The toy shape with a byte-level vocabulary.
pub fn toy_model(seed: u64) -> Model {
    let mut cfg = ModelConfig::toy(256, 256);
    cfg.adapter_enabled = true;
    cfg.copy_enabled = true;
    Model::init(cfg, seed).expect("toy config is valid")
}

/// A deterministic token sequence of length `len`, fully supervised after
/// the first quarter.
pub fn sequence(len: usize) -> Sequence {
    let tokens: Vec<usize> = (0..len).map(|i| (i * 37 + 11) % 256).collect();
    let mask = (0..len).map(|i| u8::from(i >= len / 4)).collect();
    Sequence { tokens, mask }
}
