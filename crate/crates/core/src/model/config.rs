use serde::{Deserialize, Serialize};

use crate::error::{AcnError, Result};

/// Reference backbone depth at full scale (the 117M-parameter GPT-2).
pub const REFERENCE_N_LAYER: usize = 12;
pub const REFERENCE_N_HEAD: usize = 12;
pub const REFERENCE_D_MODEL: usize = 768;
/// Adapter bottleneck used at full scale.
pub const DEFAULT_ADAPTER_SIZE: usize = 512;
/// Bottleneck sizes of the adapter-size study.
pub const ADAPTER_SWEEP_SIZES: [usize; 4] = [128, 256, 512, 1024];

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layer: usize,
    pub n_head: usize,
    /// Hidden size `H`.
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Adapter bottleneck `A`.
    pub adapter_size: usize,
    pub adapter_enabled: bool,
    pub copy_enabled: bool,
}

impl ModelConfig {
    /// The GPT-2 small shape with the full-scale adapter size.
    pub fn reference(vocab_size: usize) -> Self {
        Self {
            n_layer: REFERENCE_N_LAYER,
            n_head: REFERENCE_N_HEAD,
            d_model: REFERENCE_D_MODEL,
            d_ff: 4 * REFERENCE_D_MODEL,
            vocab_size,
            max_positions: 1024,
            adapter_size: DEFAULT_ADAPTER_SIZE,
            adapter_enabled: true,
            copy_enabled: true,
        }
    }

    /// Two layers, two heads, `H = 64`, `A = 32`.
    pub fn toy(vocab_size: usize, max_positions: usize) -> Self {
        Self {
            n_layer: 2,
            n_head: 2,
            d_model: 64,
            d_ff: 256,
            vocab_size,
            max_positions,
            adapter_size: 32,
            adapter_enabled: true,
            copy_enabled: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_head
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.n_layer >= 1, "n_layer >= 1"),
            (self.n_head >= 1, "n_head >= 1"),
            (self.d_model >= 1, "d_model >= 1"),
            (
                self.n_head >= 1 && self.d_model % self.n_head == 0,
                "d_model divisible by n_head",
            ),
            (self.d_ff >= 1, "d_ff >= 1"),
            (self.vocab_size >= 1, "vocab_size >= 1"),
            (self.max_positions >= 1, "max_positions >= 1"),
            (self.adapter_size >= 1, "adapter_size >= 1"),
        ];
        let violated: Vec<&str> = checks
            .iter()
            .filter(|(ok, _)| !ok)
            .map(|(_, what)| *what)
            .collect();
        if violated.is_empty() {
            Ok(())
        } else {
            Err(AcnError::Config(violated.join(", ")))
        }
    }
}
