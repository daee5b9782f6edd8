use super::config::LAYER_NORM_EPS;
use super::copy::mix_unchecked;
use super::Model;
use crate::error::{AcnError, Result};
use crate::tensor::kernels;

/// Distributions for the position just fed to a [`Decoder`].
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub gen_probs: Vec<f64>,
    pub mixed_probs: Vec<f64>,
    /// Head-averaged last-layer attention over positions `0..=t`.
    pub attention: Vec<f64>,
    /// `g_c`; zero when the copy head is disabled.
    pub gate: f64,
}

/// Incremental forward pass with cached keys and values.
///
/// Uses the same kernels in the same accumulation order as
/// [`Model::forward_tape`], so every step reproduces the corresponding row of
/// a full forward pass bit for bit.
pub struct Decoder<'m> {
    model: &'m Model,
    /// `[layer][head]` → row-major `[t, head_dim]`.
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
    tokens: Vec<usize>,
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m Model) -> Self {
        let cfg = &model.config;
        Self {
            model,
            keys: vec![vec![Vec::new(); cfg.n_head]; cfg.n_layer],
            values: vec![vec![Vec::new(); cfg.n_head]; cfg.n_layer],
            tokens: Vec::new(),
        }
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Feeds several tokens, returning the output of the last one.
    pub fn feed(&mut self, tokens: &[usize]) -> Result<Option<StepOutput>> {
        let mut last = None;
        for &t in tokens {
            last = Some(self.step(t)?);
        }
        Ok(last)
    }

    pub fn step(&mut self, token: usize) -> Result<StepOutput> {
        let m = self.model;
        let cfg = &m.config;
        let pos = self.tokens.len();
        if pos >= cfg.max_positions {
            return Err(AcnError::SequenceTooLong {
                len: pos + 1,
                max: cfg.max_positions,
            });
        }
        if token >= cfg.vocab_size {
            return Err(AcnError::TokenOutOfRange {
                id: token,
                vocab_size: cfg.vocab_size,
            });
        }
        self.tokens.push(token);
        let (h, nh, hd, f) = (cfg.d_model, cfg.n_head, cfg.head_dim(), cfg.d_ff);
        let scale = 1.0 / (hd as f64).sqrt();

        let embedding: Vec<f64> = m
            .wte
            .row(token)
            .iter()
            .zip(m.wpe.row(pos))
            .map(|(a, b)| a + b)
            .collect();
        let mut x = embedding.clone();
        let mut ln = vec![0.0; h];
        let mut qkv = vec![0.0; 3 * h];
        let mut o = vec![0.0; h];
        let mut proj = vec![0.0; h];
        let mut fc = vec![0.0; f];
        let mut attention = Vec::new();

        for (layer, b) in m.blocks.iter().enumerate() {
            kernels::layer_norm_row(&x, b.ln1_gamma.data(), b.ln1_beta.data(), LAYER_NORM_EPS, &mut ln);
            kernels::matmul(&ln, b.qkv_w.data(), &mut qkv, 1, h, 3 * h);
            for (v, &bias) in qkv.iter_mut().zip(b.qkv_b.data()) {
                *v += bias;
            }
            let last_layer = layer + 1 == cfg.n_layer;
            let mut attn_sum: Option<Vec<f64>> = None;
            for head in 0..nh {
                let q = &qkv[head * hd..(head + 1) * hd];
                self.keys[layer][head].extend_from_slice(&qkv[h + head * hd..h + (head + 1) * hd]);
                self.values[layer][head]
                    .extend_from_slice(&qkv[2 * h + head * hd..2 * h + (head + 1) * hd]);
                let keys = &self.keys[layer][head];
                let mut p: Vec<f64> = keys.chunks(hd).map(|k| kernels::dot(q, k) * scale).collect();
                kernels::softmax_row(&mut p);
                kernels::matmul(
                    &p,
                    &self.values[layer][head],
                    &mut o[head * hd..(head + 1) * hd],
                    1,
                    pos + 1,
                    hd,
                );
                if last_layer {
                    attn_sum = Some(match attn_sum {
                        None => p,
                        Some(acc) => acc.iter().zip(&p).map(|(a, b)| a + b).collect(),
                    });
                }
            }
            kernels::matmul(&o, b.attn_proj_w.data(), &mut proj, 1, h, h);
            for ((xv, &pv), &bias) in x.iter_mut().zip(&proj).zip(b.attn_proj_b.data()) {
                *xv += pv + bias;
            }

            kernels::layer_norm_row(&x, b.ln2_gamma.data(), b.ln2_beta.data(), LAYER_NORM_EPS, &mut ln);
            kernels::matmul(&ln, b.fc_w.data(), &mut fc, 1, h, f);
            for (v, &bias) in fc.iter_mut().zip(b.fc_b.data()) {
                *v = kernels::gelu(*v + bias);
            }
            kernels::matmul(&fc, b.mlp_proj_w.data(), &mut proj, 1, f, h);
            for ((xv, &pv), &bias) in x.iter_mut().zip(&proj).zip(b.mlp_proj_b.data()) {
                *xv += pv + bias;
            }

            if cfg.adapter_enabled {
                let input = x.clone();
                m.adapters[layer].forward_row(&input, &mut x);
            }
            if let Some(sum) = attn_sum {
                let inv = 1.0 / nh as f64;
                attention = sum.into_iter().map(|v| v * inv).collect();
            }
        }

        let mut hidden = vec![0.0; h];
        kernels::layer_norm_row(&x, m.ln_f_gamma.data(), m.ln_f_beta.data(), LAYER_NORM_EPS, &mut hidden);
        let mut gen_probs = vec![0.0; cfg.vocab_size];
        kernels::matmul_nt(&hidden, m.wte.data(), &mut gen_probs, 1, h, cfg.vocab_size);
        kernels::softmax_row(&mut gen_probs);

        let (gate, mixed_probs) = if cfg.copy_enabled {
            let gate = kernels::sigmoid(m.copy.logit(&embedding, &hidden));
            let mut copy = vec![0.0; cfg.vocab_size];
            for (&a, &id) in attention.iter().zip(&self.tokens) {
                copy[id] += a;
            }
            (gate, mix_unchecked(&gen_probs, &copy, gate))
        } else {
            (0.0, gen_probs.clone())
        };
        Ok(StepOutput {
            gen_probs,
            mixed_probs,
            attention,
            gate,
        })
    }
}
