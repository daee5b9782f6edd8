use super::config::LAYER_NORM_EPS;
use crate::error::{AcnError, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Residual bottleneck: `x = h + ReLU(LN(h) · W_down) · W_up`.
///
/// Row-vector convention: `W_down` is `[H, A]` and `W_up` is `[A, H]`. There
/// are no projection biases.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayer {
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    pub w_down: Tensor,
    pub w_up: Tensor,
}

impl AdapterLayer {
    pub fn hidden_size(&self) -> usize {
        self.ln_gamma.numel()
    }

    pub(crate) fn forward_tape(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let g = tape.leaf(&self.ln_gamma);
        let b = tape.leaf(&self.ln_beta);
        let down = tape.leaf(&self.w_down);
        let up = tape.leaf(&self.w_up);
        self.forward_bound(tape, h, [g, b, down, up])
    }

    /// Forward with parameters already recorded on the tape.
    pub(crate) fn forward_bound(&self, tape: &mut Tape, h: Var, p: [Var; 4]) -> Result<Var> {
        let [g, b, down, up] = p;
        let normed = tape.layer_norm(h, g, b, LAYER_NORM_EPS)?;
        let z = tape.matmul(normed, down)?;
        let z = tape.relu(z);
        let delta = tape.matmul(z, up)?;
        tape.add(h, delta)
    }

    /// Single-row forward shared with the incremental decoder.
    pub(crate) fn forward_row(&self, h: &[f64], out: &mut [f64]) {
        use crate::tensor::kernels;
        let hs = h.len();
        let a = self.w_down.cols();
        let mut normed = vec![0.0; hs];
        kernels::layer_norm_row(h, self.ln_gamma.data(), self.ln_beta.data(), LAYER_NORM_EPS, &mut normed);
        let mut z = vec![0.0; a];
        kernels::matmul(&normed, self.w_down.data(), &mut z, 1, hs, a);
        for v in z.iter_mut() {
            *v = kernels::relu(*v);
        }
        let mut delta = vec![0.0; hs];
        kernels::matmul(&z, self.w_up.data(), &mut delta, 1, a, hs);
        for ((o, &x), &d) in out.iter_mut().zip(h).zip(&delta) {
            *o = x + d;
        }
    }
}

/// Applies one adapter to `h` of shape `[.., H]`.
pub fn adapter_forward(adapter: &AdapterLayer, h: &Tensor) -> Result<Tensor> {
    if h.cols() != adapter.hidden_size() {
        return Err(AcnError::Dimension(format!(
            "adapter over H={} applied to {:?}",
            adapter.hidden_size(),
            h.shape()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(h);
    let y = adapter.forward_tape(&mut tape, x)?;
    Ok(tape.to_tensor(y))
}
