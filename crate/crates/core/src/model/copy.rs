use crate::error::{AcnError, Result};
use crate::tensor::{kernels, Tensor};

const PROB_TOL: f64 = 1e-9;

/// Gate `g_c = σ([e_j; h_j] · W_c + b_c)` with `W_c` of shape `[2H, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CopyHead {
    pub w_c: Tensor,
    pub b_c: Tensor,
}

impl CopyHead {
    pub fn hidden_size(&self) -> usize {
        self.w_c.numel() / 2
    }

    /// `[e; h] · W_c + b_c` on one position; shared with the decoder.
    pub(crate) fn logit(&self, e: &[f64], h: &[f64]) -> f64 {
        let mut cat = Vec::with_capacity(e.len() + h.len());
        cat.extend_from_slice(e);
        cat.extend_from_slice(h);
        let mut out = [0.0];
        kernels::matmul(&cat, self.w_c.data(), &mut out, 1, cat.len(), 1);
        out[0] + self.b_c.item()
    }
}

/// Copy probability for one position. `e_j` is the input embedding (token
/// plus position), `h_j` the final hidden state.
pub fn copy_gate(head: &CopyHead, e_j: &[f64], h_j: &[f64]) -> Result<f64> {
    let h = head.hidden_size();
    if e_j.len() != h || h_j.len() != h {
        return Err(AcnError::Dimension(format!(
            "copy gate over H={h} given vectors of {} and {}",
            e_j.len(),
            h_j.len()
        )));
    }
    Ok(kernels::sigmoid(head.logit(e_j, h_j)))
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&v| !(v >= 0.0)) {
        return Err(AcnError::Dimension(format!("{what} has negative or NaN mass")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > PROB_TOL {
        return Err(AcnError::Dimension(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

/// Scatter-adds attention mass onto the vocabulary ids of the attended
/// context tokens: `P_copy(w) = Σ_{k: token_k = w} a_k`.
pub fn copy_distribution(
    attention_row: &[f64],
    context_tokens: &[usize],
    vocab_size: usize,
) -> Result<Vec<f64>> {
    if attention_row.len() != context_tokens.len() {
        return Err(AcnError::Dimension(format!(
            "{} attention weights for {} context tokens",
            attention_row.len(),
            context_tokens.len()
        )));
    }
    check_distribution(attention_row, "attention row")?;
    let mut out = vec![0.0; vocab_size];
    for (&a, &id) in attention_row.iter().zip(context_tokens) {
        if id >= vocab_size {
            return Err(AcnError::TokenOutOfRange { id, vocab_size });
        }
        out[id] += a;
    }
    Ok(out)
}

/// `P(w) = (1 - g_c) · P_gen(w) + g_c · P_copy(w)`.
pub fn mix_distributions(gen: &[f64], copy: &[f64], g_c: f64) -> Result<Vec<f64>> {
    if gen.len() != copy.len() {
        return Err(AcnError::Dimension(format!(
            "mixing distributions of {} and {} entries",
            gen.len(),
            copy.len()
        )));
    }
    if !(0.0..=1.0).contains(&g_c) {
        return Err(AcnError::Dimension(format!("gate {g_c} outside [0, 1]")));
    }
    check_distribution(gen, "generation distribution")?;
    check_distribution(copy, "copy distribution")?;
    Ok(mix_unchecked(gen, copy, g_c))
}

/// Same arithmetic as the tape path: `(g·(-1) + 1)·gen + g·copy`.
pub(crate) fn mix_unchecked(gen: &[f64], copy: &[f64], g_c: f64) -> Vec<f64> {
    let keep = g_c * -1.0 + 1.0;
    gen.iter()
        .zip(copy)
        .map(|(&p, &c)| keep * p + g_c * c)
        .collect()
}
