use super::config::LAYER_NORM_EPS;
use super::Model;
use crate::error::{AcnError, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Handles into a tape produced by [`Model::forward_tape`].
#[derive(Debug, Clone)]
pub struct TapeForward {
    /// Input embedding `e_j` (token + position), `[T, H]`.
    pub embedding: Var,
    /// Final hidden state `h^L` after the output layer norm, `[T, H]`.
    pub hidden: Var,
    pub logits: Var,
    pub gen_probs: Var,
    /// Last-layer attention averaged over heads, `[T, T]`.
    pub last_attention: Var,
    /// `[T, 1]`; absent when the copy head is disabled.
    pub gate: Option<Var>,
    pub mixed_probs: Var,
    /// Parameter name → leaf, in [`Model::params`] order.
    pub params: Vec<(String, Var)>,
}

/// Values of one full forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub hidden: Tensor,
    pub gen_probs: Tensor,
    pub last_attention: Tensor,
    pub mixed_probs: Tensor,
    /// `g_c` per position; all zero when the copy head is disabled.
    pub gate: Vec<f64>,
}

impl Model {
    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        let cfg = &self.config;
        if tokens.is_empty() {
            return Err(AcnError::Dimension("empty token sequence".into()));
        }
        if tokens.len() > cfg.max_positions {
            return Err(AcnError::SequenceTooLong {
                len: tokens.len(),
                max: cfg.max_positions,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(AcnError::TokenOutOfRange {
                id,
                vocab_size: cfg.vocab_size,
            });
        }
        Ok(())
    }

    /// Records the full network on `tape`. Parameters enter as leaves that
    /// require a gradient iff their `requires_grad` flag is set.
    pub fn forward_tape(&self, tape: &mut Tape, tokens: &[usize]) -> Result<TapeForward> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let t = tokens.len();
        let (h, nh, hd) = (cfg.d_model, cfg.n_head, cfg.head_dim());

        let params: Vec<(String, Var)> = self
            .params()
            .into_iter()
            .map(|(name, p)| (name, tape.leaf(p)))
            .collect();
        let mut it = params.iter().map(|(_, v)| *v);
        let mut next = || it.next().expect("parameter order is fixed");

        let wte = next();
        let wpe = next();
        let tok = tape.gather_rows(wte, tokens)?;
        let positions: Vec<usize> = (0..t).collect();
        let pos = tape.gather_rows(wpe, &positions)?;
        let embedding = tape.add(tok, pos)?;

        let block_vars: Vec<[Var; 12]> = (0..cfg.n_layer)
            .map(|_| std::array::from_fn(|_| next()))
            .collect();
        let adapter_vars: Vec<[Var; 4]> = (0..cfg.n_layer)
            .map(|_| std::array::from_fn(|_| next()))
            .collect();
        let (lnf_g, lnf_b, copy_w, copy_b) = (next(), next(), next(), next());

        let scale = 1.0 / (hd as f64).sqrt();
        let mut x = embedding;
        let mut last_attention = None;
        for (layer, bv) in block_vars.iter().enumerate() {
            let [ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_g, ln2_b, fc_w, fc_b, mproj_w, mproj_b] =
                *bv;
            let a = tape.layer_norm(x, ln1_g, ln1_b, LAYER_NORM_EPS)?;
            let qkv = tape.matmul(a, qkv_w)?;
            let qkv = tape.add(qkv, qkv_b)?;
            let mut heads = Vec::with_capacity(nh);
            let mut attn_sum: Option<Var> = None;
            for head in 0..nh {
                let q = tape.slice_cols(qkv, head * hd, hd)?;
                let k = tape.slice_cols(qkv, h + head * hd, hd)?;
                let v = tape.slice_cols(qkv, 2 * h + head * hd, hd)?;
                let s = tape.matmul_nt(q, k)?;
                let s = tape.scale(s, scale);
                let s = tape.causal_mask(s)?;
                let p = tape.softmax(s, 1)?;
                heads.push(tape.matmul(p, v)?);
                if layer + 1 == cfg.n_layer {
                    attn_sum = Some(match attn_sum {
                        None => p,
                        Some(acc) => tape.add(acc, p)?,
                    });
                }
            }
            let o = if nh == 1 { heads[0] } else { tape.concat_cols(&heads)? };
            let o = tape.matmul(o, proj_w)?;
            let o = tape.add(o, proj_b)?;
            x = tape.add(x, o)?;

            let m = tape.layer_norm(x, ln2_g, ln2_b, LAYER_NORM_EPS)?;
            let m = tape.matmul(m, fc_w)?;
            let m = tape.add(m, fc_b)?;
            let m = tape.gelu(m);
            let m = tape.matmul(m, mproj_w)?;
            let m = tape.add(m, mproj_b)?;
            x = tape.add(x, m)?;

            if cfg.adapter_enabled {
                x = self.adapters[layer].forward_bound(tape, x, adapter_vars[layer])?;
            }
            if let Some(sum) = attn_sum {
                last_attention = Some(tape.scale(sum, 1.0 / nh as f64));
            }
        }
        let last_attention = last_attention.expect("n_layer >= 1");

        let hidden = tape.layer_norm(x, lnf_g, lnf_b, LAYER_NORM_EPS)?;
        let logits = tape.matmul_nt(hidden, wte)?;
        let gen_probs = tape.softmax(logits, 1)?;

        let (gate, mixed_probs) = if cfg.copy_enabled {
            let cat = tape.concat_cols(&[embedding, hidden])?;
            let z = tape.matmul(cat, copy_w)?;
            let z = tape.add(z, copy_b)?;
            let gate = tape.sigmoid(z);
            let copy = tape.scatter_cols(last_attention, tokens, cfg.vocab_size)?;
            let keep = tape.affine(gate, -1.0, 1.0);
            let gen_part = tape.mul(keep, gen_probs)?;
            let copy_part = tape.mul(gate, copy)?;
            (Some(gate), tape.add(gen_part, copy_part)?)
        } else {
            (None, gen_probs)
        };

        Ok(TapeForward {
            embedding,
            hidden,
            logits,
            gen_probs,
            last_attention,
            gate,
            mixed_probs,
            params,
        })
    }

    /// Next-token loss of one sequence on the tape. Position `j` predicts
    /// token `j + 1`; `mask[j]` gates the loss on the prediction of token
    /// `j + 1`. With the copy head on, the loss is the NLL of the mixed
    /// distribution; otherwise the cross-entropy of the LM logits.
    pub fn loss_tape(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        target_mask: &[u8],
    ) -> Result<(Var, TapeForward)> {
        if tokens.len() < 2 {
            return Err(AcnError::Training(
                "a training sequence needs at least two tokens".into(),
            ));
        }
        if target_mask.len() != tokens.len() {
            return Err(AcnError::Dimension(format!(
                "mask of {} entries for {} tokens",
                target_mask.len(),
                tokens.len()
            )));
        }
        let inputs = &tokens[..tokens.len() - 1];
        let targets = &tokens[1..];
        let mask = &target_mask[1..];
        let fwd = self.forward_tape(tape, inputs)?;
        let loss = if self.config.copy_enabled {
            tape.masked_nll(fwd.mixed_probs, targets, mask)?
        } else {
            tape.masked_cross_entropy(fwd.logits, targets, mask)?
        };
        Ok((loss, fwd))
    }

    pub fn backbone_forward(&self, tokens: &[usize]) -> Result<(Tensor, Tensor, Tensor)> {
        let out = self.with_modules(self.config.adapter_enabled, false).forward_full(tokens)?;
        Ok((out.hidden, out.gen_probs, out.last_attention))
    }

    /// Full forward pass returning values only.
    pub fn forward_full(&self, tokens: &[usize]) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let f = self.forward_tape(&mut tape, tokens)?;
        let gate = match f.gate {
            Some(g) => tape.value(g).to_vec(),
            None => vec![0.0; tokens.len()],
        };
        Ok(ForwardOutput {
            hidden: tape.to_tensor(f.hidden),
            gen_probs: tape.to_tensor(f.gen_probs),
            last_attention: tape.to_tensor(f.last_attention),
            mixed_probs: tape.to_tensor(f.mixed_probs),
            gate,
        })
    }

    /// Mean next-token loss over a set of sequences with every position
    /// supervised, with adapters and copy head as configured.
    pub fn mean_loss(&self, sequences: &[Vec<usize>]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for seq in sequences.iter().filter(|s| s.len() >= 2) {
            let mut tape = Tape::new();
            let mask = vec![1u8; seq.len()];
            let (loss, _) = self.loss_tape(&mut tape, seq, &mask)?;
            let n = seq.len() - 1;
            total += tape.value(loss)[0] * n as f64;
            count += n;
        }
        if count == 0 {
            return Err(AcnError::EmptyMask);
        }
        Ok(total / count as f64)
    }

    /// `exp` of the per-token mean loss.
    pub fn perplexity(&self, sequences: &[Vec<usize>]) -> Result<f64> {
        Ok(self.mean_loss(sequences)?.exp())
    }
}

#[cfg(test)]
mod tests {
    use super::super::ModelConfig;
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layer: 2,
            n_head: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 11,
            max_positions: 12,
            adapter_size: 4,
            adapter_enabled: true,
            copy_enabled: true,
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let m = Model::init(cfg(), 3).unwrap();
        let out = m.forward_full(&[4]).unwrap();
        assert_eq!(out.last_attention.data(), &[1.0]);
    }

    #[test]
    fn rows_are_distributions() {
        let m = Model::init(cfg(), 3).unwrap();
        let out = m.forward_full(&[1, 5, 5, 2, 9]).unwrap();
        for probs in [&out.gen_probs, &out.mixed_probs, &out.last_attention] {
            for r in 0..probs.rows() {
                let s: f64 = probs.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gate_is_half_at_init() {
        let m = Model::init(cfg(), 3).unwrap();
        let out = m.forward_full(&[1, 2, 3]).unwrap();
        assert!(out.gate.iter().all(|&g| g == 0.5));
    }

    #[test]
    fn too_long_is_an_error() {
        let m = Model::init(cfg(), 3).unwrap();
        let toks = vec![1; 13];
        assert!(matches!(
            m.forward_full(&toks),
            Err(AcnError::SequenceTooLong { len: 13, max: 12 })
        ));
    }

    #[test]
    fn out_of_vocab_is_an_error() {
        let m = Model::init(cfg(), 3).unwrap();
        assert!(m.forward_full(&[1, 11]).is_err());
    }
}
