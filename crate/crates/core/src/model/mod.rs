//! The network: a GPT-2 style decoder, a residual adapter after every
//! block, and a copy head that mixes the LM distribution with last-layer
//! attention scattered onto context tokens.

mod adapter;
mod checkpoint;
mod config;
mod copy;
mod decode;
mod forward;
mod partition;

pub use adapter::{adapter_forward, AdapterLayer};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{
    ModelConfig, ADAPTER_SWEEP_SIZES, DEFAULT_ADAPTER_SIZE, LAYER_NORM_EPS, REFERENCE_D_MODEL,
    REFERENCE_N_HEAD, REFERENCE_N_LAYER,
};
pub use copy::{copy_distribution, copy_gate, mix_distributions, CopyHead};
pub use decode::{Decoder, StepOutput};
pub use forward::{ForwardOutput, TapeForward};
pub use partition::{ParamKind, ParamPartition};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

/// One pre-LN transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    /// `[H, 3H]`, columns ordered q | k | v.
    pub qkv_w: Tensor,
    pub qkv_b: Tensor,
    pub attn_proj_w: Tensor,
    pub attn_proj_b: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
    pub mlp_proj_w: Tensor,
    pub mlp_proj_b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// Token embedding, tied with the output projection.
    pub wte: Tensor,
    pub wpe: Tensor,
    pub blocks: Vec<Block>,
    pub adapters: Vec<AdapterLayer>,
    pub ln_f_gamma: Tensor,
    pub ln_f_beta: Tensor,
    pub copy: CopyHead,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }
}

impl Model {
    /// Deterministic initialization. Backbone weights are drawn from a small
    /// normal; adapter up-projections and the copy head start at zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let (h, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let proj_std = INIT_STD / (2.0 * config.n_layer as f64).sqrt();
        let wte = init.normal(&[v, h], INIT_STD);
        let wpe = init.normal(&[config.max_positions, h], INIT_STD);
        let blocks = (0..config.n_layer)
            .map(|_| Block {
                ln1_gamma: Tensor::filled(&[h], 1.0),
                ln1_beta: Tensor::zeros(&[h]),
                qkv_w: init.normal(&[h, 3 * h], INIT_STD),
                qkv_b: Tensor::zeros(&[3 * h]),
                attn_proj_w: init.normal(&[h, h], proj_std),
                attn_proj_b: Tensor::zeros(&[h]),
                ln2_gamma: Tensor::filled(&[h], 1.0),
                ln2_beta: Tensor::zeros(&[h]),
                fc_w: init.normal(&[h, f], INIT_STD),
                fc_b: Tensor::zeros(&[f]),
                mlp_proj_w: init.normal(&[f, h], proj_std),
                mlp_proj_b: Tensor::zeros(&[h]),
            })
            .collect();
        let adapters = (0..config.n_layer)
            .map(|_| AdapterLayer {
                ln_gamma: Tensor::filled(&[h], 1.0),
                ln_beta: Tensor::zeros(&[h]),
                w_down: init.normal(&[h, config.adapter_size], INIT_STD),
                w_up: Tensor::zeros(&[config.adapter_size, h]),
            })
            .collect();
        Ok(Self {
            wte,
            wpe,
            blocks,
            adapters,
            ln_f_gamma: Tensor::filled(&[h], 1.0),
            ln_f_beta: Tensor::zeros(&[h]),
            copy: CopyHead {
                w_c: Tensor::zeros(&[2 * h, 1]),
                b_c: Tensor::zeros(&[1]),
            },
            config,
        })
    }

    /// Every parameter with its stable name, in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> =
            vec![("wte".into(), &self.wte), ("wpe".into(), &self.wpe)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(block_fields(b).into_iter().map(|(n, t)| (format!("h.{i}.{n}"), t)));
        }
        for (i, a) in self.adapters.iter().enumerate() {
            out.extend([
                (format!("adapter.{i}.ln.gamma"), &a.ln_gamma),
                (format!("adapter.{i}.ln.beta"), &a.ln_beta),
                (format!("adapter.{i}.down"), &a.w_down),
                (format!("adapter.{i}.up"), &a.w_up),
            ]);
        }
        out.extend([
            ("ln_f.gamma".into(), &self.ln_f_gamma),
            ("ln_f.beta".into(), &self.ln_f_beta),
            ("copy.w".into(), &self.copy.w_c),
            ("copy.b".into(), &self.copy.b_c),
        ]);
        out
    }

    /// Same order and names as [`Model::params`].
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> =
            vec![("wte".into(), &mut self.wte), ("wpe".into(), &mut self.wpe)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(
                block_fields_mut(b)
                    .into_iter()
                    .map(|(n, t)| (format!("h.{i}.{n}"), t)),
            );
        }
        for (i, a) in self.adapters.iter_mut().enumerate() {
            out.extend([
                (format!("adapter.{i}.ln.gamma"), &mut a.ln_gamma),
                (format!("adapter.{i}.ln.beta"), &mut a.ln_beta),
                (format!("adapter.{i}.down"), &mut a.w_down),
                (format!("adapter.{i}.up"), &mut a.w_up),
            ]);
        }
        out.extend([
            ("ln_f.gamma".into(), &mut self.ln_f_gamma),
            ("ln_f.beta".into(), &mut self.ln_f_beta),
            ("copy.w".into(), &mut self.copy.w_c),
            ("copy.b".into(), &mut self.copy.b_c),
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.params_mut() {
            t.zero_grad();
        }
    }

    /// Copy of this model with freshly initialized adapters of width `size`.
    /// Backbone and copy head are untouched.
    pub fn with_adapter_size(&self, size: usize, seed: u64) -> Result<Self> {
        let mut config = self.config.clone();
        config.adapter_size = size;
        let fresh = Model::init(config.clone(), seed)?;
        let mut m = self.clone();
        m.config = config;
        m.adapters = fresh.adapters;
        Ok(m)
    }

    /// Copy of this model with adapters and the copy head switched on or off.
    pub fn with_modules(&self, adapter_enabled: bool, copy_enabled: bool) -> Self {
        let mut m = self.clone();
        m.config.adapter_enabled = adapter_enabled;
        m.config.copy_enabled = copy_enabled;
        m
    }
}

fn block_fields(b: &Block) -> [(&'static str, &Tensor); 12] {
    [
        ("ln1.gamma", &b.ln1_gamma),
        ("ln1.beta", &b.ln1_beta),
        ("attn.qkv.w", &b.qkv_w),
        ("attn.qkv.b", &b.qkv_b),
        ("attn.proj.w", &b.attn_proj_w),
        ("attn.proj.b", &b.attn_proj_b),
        ("ln2.gamma", &b.ln2_gamma),
        ("ln2.beta", &b.ln2_beta),
        ("mlp.fc.w", &b.fc_w),
        ("mlp.fc.b", &b.fc_b),
        ("mlp.proj.w", &b.mlp_proj_w),
        ("mlp.proj.b", &b.mlp_proj_b),
    ]
}

fn block_fields_mut(b: &mut Block) -> [(&'static str, &mut Tensor); 12] {
    [
        ("ln1.gamma", &mut b.ln1_gamma),
        ("ln1.beta", &mut b.ln1_beta),
        ("attn.qkv.w", &mut b.qkv_w),
        ("attn.qkv.b", &mut b.qkv_b),
        ("attn.proj.w", &mut b.attn_proj_w),
        ("attn.proj.b", &mut b.attn_proj_b),
        ("ln2.gamma", &mut b.ln2_gamma),
        ("ln2.beta", &mut b.ln2_beta),
        ("mlp.fc.w", &mut b.fc_w),
        ("mlp.fc.b", &mut b.fc_b),
        ("mlp.proj.w", &mut b.mlp_proj_w),
        ("mlp.proj.b", &mut b.mlp_proj_b),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layer: 2,
            n_head: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 12,
            max_positions: 16,
            adapter_size: 4,
            adapter_enabled: true,
            copy_enabled: true,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::init(tiny(), 7).unwrap();
        let b = Model::init(tiny(), 7).unwrap();
        assert_eq!(a, b);
        let c = Model::init(tiny(), 8).unwrap();
        assert_ne!(a.wte, c.wte);
    }

    #[test]
    fn init_zeroes_up_projection_and_copy_head() {
        let m = Model::init(tiny(), 1).unwrap();
        for a in &m.adapters {
            assert!(a.w_up.data().iter().all(|&v| v == 0.0));
        }
        assert!(m.copy.w_c.data().iter().all(|&v| v == 0.0));
        assert_eq!(m.copy.b_c.item(), 0.0);
    }

    #[test]
    fn param_names_are_unique_and_aligned() {
        let mut m = Model::init(tiny(), 1).unwrap();
        let names: Vec<String> = m.params().into_iter().map(|(n, _)| n).collect();
        let set: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        let names_mut: Vec<String> = m.params_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, names_mut);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = tiny();
        cfg.n_head = 3;
        assert!(Model::init(cfg, 0).is_err());
    }
}
