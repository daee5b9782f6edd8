use super::kernels;
use super::Tensor;
use crate::error::{AcnError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add {
        a: Var,
        b: Var,
        a_idx: Option<Vec<usize>>,
        b_idx: Option<Vec<usize>>,
    },
    Mul {
        a: Var,
        b: Var,
        a_idx: Option<Vec<usize>>,
        b_idx: Option<Vec<usize>>,
    },
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<(f64, f64)>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    CausalMask(Var),
    ScatterCols {
        x: Var,
        ids: Vec<usize>,
    },
    MaskedCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<u8>,
        probs: Vec<f64>,
        count: usize,
    },
    MaskedNll {
        probs: Var,
        targets: Vec<usize>,
        mask: Vec<u8>,
        count: usize,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of ops for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the record is topologically
/// sorted by construction. A node requires a gradient iff one of its inputs
/// does; constant subgraphs are skipped during [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn cols(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Trailing-aligned broadcast: dims are matched from the right, and each pair
/// must be equal or contain a 1. Missing leading dims act as 1.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(AcnError::Dimension(format!(
                    "shapes {a:?} and {b:?} do not broadcast"
                )))
            }
        };
    }
    Ok(out)
}

/// Flat source index for every output element, or `None` when shapes match.
fn broadcast_indices(src: &[usize], out: &[usize]) -> Option<Vec<usize>> {
    if src == out {
        return None;
    }
    let rank = out.len();
    let offset = rank - src.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..src.len()).rev() {
        strides[i + offset] = if src[i] == 1 { 0 } else { s };
        s *= src[i];
    }
    let total = numel(out);
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..total {
        idx.push(flat);
        for d in (0..rank).rev() {
            counter[d] += 1;
            flat += strides[d];
            if counter[d] < out[d] {
                break;
            }
            flat -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    Some(idx)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. It takes part in differentiation iff the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes are well-formed")
    }

    /// `[.., k] · [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || cols(&sa) != sb[0] {
            return Err(AcnError::Dimension(format!(
                "matmul of {sa:?} and {sb:?}: inner dims differ"
            )));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = numel(&sa) / k;
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a), self.value(b), &mut out, m, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::MatMul(a, b), rg))
    }

    /// `[.., k] · [n, k]ᵀ -> [.., n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || cols(&sa) != sb[1] {
            return Err(AcnError::Dimension(format!(
                "matmul_nt of {sa:?} and {sb:?}ᵀ: inner dims differ"
            )));
        }
        let (n, k) = (sb[0], sb[1]);
        let m = numel(&sa) / k;
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(self.value(a), self.value(b), &mut out, m, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::MatMulNt(a, b), rg))
    }

    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let a_idx = broadcast_indices(self.shape(a), &shape);
        let b_idx = broadcast_indices(self.shape(b), &shape);
        let (va, vb) = (self.value(a), self.value(b));
        let total = numel(&shape);
        let mut out = Vec::with_capacity(total);
        for i in 0..total {
            let x = va[a_idx.as_ref().map_or(i, |m| m[i])];
            let y = vb[b_idx.as_ref().map_or(i, |m| m[i])];
            out.push(if mul { x * y } else { x + y });
        }
        let rg = self.rg(a) || self.rg(b);
        let op = if mul {
            Op::Mul { a, b, a_idx, b_idx }
        } else {
            Op::Add { a, b, a_idx, b_idx }
        };
        Ok(self.push(shape, out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    /// `x * scale + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * scale + shift).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * scale).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::Affine(x, scale), rg)
    }

    fn unary(&mut self, x: Var, f: fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::relu, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(AcnError::Dimension(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let mut out = self.value(x).to_vec();
        kernels::softmax_axis(&mut out, outer, len, inner);
        let rg = self.rg(x);
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let h = cols(&shape);
        if self.shape(gamma) != [h] || self.shape(beta) != [h] {
            return Err(AcnError::Dimension(format!(
                "layer_norm over {shape:?} needs gamma/beta of [{h}], got {:?}/{:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rows = numel(&shape) / h;
        let mut out = vec![0.0; rows * h];
        let mut stats = Vec::with_capacity(rows);
        {
            let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
            for r in 0..rows {
                stats.push(kernels::layer_norm_row(
                    &xv[r * h..(r + 1) * h],
                    g,
                    b,
                    eps,
                    &mut out[r * h..(r + 1) * h],
                ));
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            rg,
        ))
    }

    /// Rows of a `[V, H]` table selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(AcnError::Dimension(format!("gather from non-matrix {shape:?}")));
        }
        let (v, h) = (shape[0], shape[1]);
        let mut out = Vec::with_capacity(ids.len() * h);
        let tv = self.value(table);
        for &id in ids {
            if id >= v {
                return Err(AcnError::TokenOutOfRange { id, vocab_size: v });
            }
            out.extend_from_slice(&tv[id * h..(id + 1) * h]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), h],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Columns `start..start + len` of a 2-D value.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || start + len > shape[1] || len == 0 {
            return Err(AcnError::Dimension(format!(
                "column slice {start}..{} of {shape:?}",
                start + len
            )));
        }
        let (rows, c) = (shape[0], shape[1]);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * c + start..r * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![rows, len], out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0])[0];
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(AcnError::Dimension(format!(
                    "concat of {s:?} with {rows} rows"
                )));
            }
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Sets entries above the diagonal of a square matrix to `-inf`.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(AcnError::Dimension(format!("causal mask on {shape:?}")));
        }
        let t = shape[0];
        let mut out = self.value(x).to_vec();
        for i in 0..t {
            for v in &mut out[i * t + i + 1..(i + 1) * t] {
                *v = f64::NEG_INFINITY;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::CausalMask(x), rg))
    }

    /// Scatter-adds column `k` of `x[T, K]` into column `ids[k]` of a
    /// `[T, width]` result.
    pub fn scatter_cols(&mut self, x: Var, ids: &[usize], width: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != ids.len() {
            return Err(AcnError::Dimension(format!(
                "scatter of {shape:?} with {} ids",
                ids.len()
            )));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= width) {
            return Err(AcnError::TokenOutOfRange {
                id,
                vocab_size: width,
            });
        }
        let (rows, k) = (shape[0], shape[1]);
        let xv = self.value(x);
        let mut out = vec![0.0; rows * width];
        for r in 0..rows {
            for (c, &id) in ids.iter().enumerate() {
                out[r * width + id] += xv[r * k + c];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![rows, width],
            out,
            Op::ScatterCols {
                x,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    fn check_targets(
        &self,
        shape: &[usize],
        targets: &[usize],
        mask: &[u8],
    ) -> Result<usize> {
        if shape.len() != 2 || shape[0] != targets.len() || targets.len() != mask.len() {
            return Err(AcnError::Dimension(format!(
                "loss over {shape:?} with {} targets and {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        if let Some(&id) = targets.iter().find(|&&t| t >= shape[1]) {
            return Err(AcnError::TokenOutOfRange {
                id,
                vocab_size: shape[1],
            });
        }
        let count = mask.iter().filter(|&&m| m != 0).count();
        if count == 0 {
            return Err(AcnError::EmptyMask);
        }
        Ok(count)
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)` over
    /// the positions where `mask` is 1.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[u8],
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let count = self.check_targets(&shape, targets, mask)?;
        let v = shape[1];
        let mut probs = self.value(logits).to_vec();
        let mut total = 0.0;
        for (t, row) in probs.chunks_mut(v).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            if mask[t] != 0 {
                total += lse - row[targets[t]];
            }
            kernels::softmax_row(row);
        }
        let loss = total / count as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::MaskedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Mean of `-ln probs[t, targets[t]]` over the positions where `mask` is 1.
    pub fn masked_nll(&mut self, probs: Var, targets: &[usize], mask: &[u8]) -> Result<Var> {
        let shape = self.shape(probs).to_vec();
        let count = self.check_targets(&shape, targets, mask)?;
        let v = shape[1];
        let pv = self.value(probs);
        let mut total = 0.0;
        for t in 0..targets.len() {
            if mask[t] != 0 {
                total -= pv[t * v + targets[t]].ln();
            }
        }
        let loss = total / count as f64;
        let rg = self.rg(probs);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::MaskedNll {
                probs,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    /// Gradient of the last `backward` call with respect to `v`. `None` for
    /// values that do not require a gradient or were not reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_scaled(loss, 1.0)
    }

    /// Reverse pass seeded with `d loss = seed`.
    pub fn backward_scaled(&mut self, loss: Var, seed: f64) -> Result<()> {
        let shape = self.shape(loss);
        if numel(shape) != 1 {
            return Err(AcnError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(vec![seed]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let want = |v: Var| nodes[v.0].requires_grad;
        // Accumulator for input `v`, allocated on first use.
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sb, va, vb) = (&nodes[b.0].shape, &nodes[a.0].value, &nodes[b.0].value);
                let (k, n) = (sb[0], sb[1]);
                let m = va.len() / k;
                if want(*a) {
                    // dA = G · Bᵀ
                    let mut tmp = vec![0.0; m * k];
                    kernels::matmul_nt(g, vb, &mut tmp, m, n, k);
                    add_into(slot(grads, nodes, *a), &tmp);
                }
                if want(*b) {
                    // dB = Aᵀ · G
                    kernels::matmul_tn_acc(va, g, slot(grads, nodes, *b), m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (sb, va, vb) = (&nodes[b.0].shape, &nodes[a.0].value, &nodes[b.0].value);
                let (n, k) = (sb[0], sb[1]);
                let m = va.len() / k;
                if want(*a) {
                    // dA = G · B
                    let mut tmp = vec![0.0; m * k];
                    kernels::matmul(g, vb, &mut tmp, m, n, k);
                    add_into(slot(grads, nodes, *a), &tmp);
                }
                if want(*b) {
                    // dB = Gᵀ · A
                    kernels::matmul_tn_acc(g, va, slot(grads, nodes, *b), m, n, k);
                }
            }
            Op::Add { a, b, a_idx, b_idx } => {
                for (v, map) in [(a, a_idx), (b, b_idx)] {
                    if want(*v) {
                        let acc = slot(grads, nodes, *v);
                        match map {
                            None => add_into(acc, g),
                            Some(m) => {
                                for (i, &gi) in g.iter().enumerate() {
                                    acc[m[i]] += gi;
                                }
                            }
                        }
                    }
                }
            }
            Op::Mul { a, b, a_idx, b_idx } => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let at = |i: usize| a_idx.as_ref().map_or(i, |m| m[i]);
                let bt = |i: usize| b_idx.as_ref().map_or(i, |m| m[i]);
                if want(*a) {
                    let acc = slot(grads, nodes, *a);
                    for (i, &gi) in g.iter().enumerate() {
                        acc[at(i)] += gi * vb[bt(i)];
                    }
                }
                if want(*b) {
                    let acc = slot(grads, nodes, *b);
                    for (i, &gi) in g.iter().enumerate() {
                        acc[bt(i)] += gi * va[at(i)];
                    }
                }
            }
            Op::Affine(x, scale) => {
                if want(*x) {
                    let acc = slot(grads, nodes, *x);
                    for (a, &gi) in acc.iter_mut().zip(g) {
                        *a += gi * scale;
                    }
                }
            }
            Op::Relu(x) => {
                if want(*x) {
                    let xv = &nodes[x.0].value;
                    let acc = slot(grads, nodes, *x);
                    for ((a, &gi), &xi) in acc.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *a += gi;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if want(*x) {
                    let acc = slot(grads, nodes, *x);
                    for ((a, &gi), &y) in acc.iter_mut().zip(g).zip(&node.value) {
                        *a += gi * y * (1.0 - y);
                    }
                }
            }
            Op::Gelu(x) => {
                if want(*x) {
                    let xv = &nodes[x.0].value;
                    let acc = slot(grads, nodes, *x);
                    for ((a, &gi), &xi) in acc.iter_mut().zip(g).zip(xv) {
                        *a += gi * kernels::gelu_grad(xi);
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                if want(*x) {
                    let y = &node.value;
                    let acc = slot(grads, nodes, *x);
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: f64 = (0..*len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..*len {
                                acc[at(l)] += y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let h = cols(&node.shape);
                let xv = &nodes[x.0].value;
                let gv = &nodes[gamma.0].value;
                let mut dx = want(*x).then(|| vec![0.0; xv.len()]);
                let mut dgamma = want(*gamma).then(|| vec![0.0; h]);
                let mut dbeta = want(*beta).then(|| vec![0.0; h]);
                let mut xhat = vec![0.0; h];
                let mut dxhat = vec![0.0; h];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let xr = &xv[r * h..(r + 1) * h];
                    let gr = &g[r * h..(r + 1) * h];
                    for j in 0..h {
                        xhat[j] = (xr[j] - mean) * rstd;
                        dxhat[j] = gr[j] * gv[j];
                    }
                    if let Some(dg) = dgamma.as_mut() {
                        for j in 0..h {
                            dg[j] += gr[j] * xhat[j];
                        }
                    }
                    if let Some(db) = dbeta.as_mut() {
                        for j in 0..h {
                            db[j] += gr[j];
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let hf = h as f64;
                        let mean_d = dxhat.iter().sum::<f64>() / hf;
                        let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / hf;
                        for j in 0..h {
                            dx[r * h + j] = rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                        }
                    }
                }
                for (v, d) in [(x, dx), (gamma, dgamma), (beta, dbeta)] {
                    if let Some(d) = d {
                        add_into(slot(grads, nodes, *v), &d);
                    }
                }
            }
            Op::Gather { table, ids } => {
                if want(*table) {
                    let h = cols(&node.shape);
                    let acc = slot(grads, nodes, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..h {
                            acc[id * h + j] += g[r * h + j];
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if want(*x) {
                    let c = nodes[x.0].shape[1];
                    let len = node.shape[1];
                    let acc = slot(grads, nodes, *x);
                    for r in 0..node.shape[0] {
                        for j in 0..len {
                            acc[r * c + start + j] += g[r * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut offset = 0;
                for p in parts {
                    let c = nodes[p.0].shape[1];
                    if want(*p) {
                        let acc = slot(grads, nodes, *p);
                        for r in 0..node.shape[0] {
                            for j in 0..c {
                                acc[r * c + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::CausalMask(x) => {
                if want(*x) {
                    let t = node.shape[0];
                    let acc = slot(grads, nodes, *x);
                    for i in 0..t {
                        for j in 0..=i {
                            acc[i * t + j] += g[i * t + j];
                        }
                    }
                }
            }
            Op::ScatterCols { x, ids } => {
                if want(*x) {
                    let width = node.shape[1];
                    let k = ids.len();
                    let acc = slot(grads, nodes, *x);
                    for r in 0..node.shape[0] {
                        for (c, &id) in ids.iter().enumerate() {
                            acc[r * k + c] += g[r * width + id];
                        }
                    }
                }
            }
            Op::MaskedCrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                if want(*logits) {
                    let v = cols(&nodes[logits.0].shape);
                    let scale = g[0] / *count as f64;
                    let acc = slot(grads, nodes, *logits);
                    for (t, &tgt) in targets.iter().enumerate() {
                        if mask[t] == 0 {
                            continue;
                        }
                        for j in 0..v {
                            acc[t * v + j] += scale * probs[t * v + j];
                        }
                        acc[t * v + tgt] -= scale;
                    }
                }
            }
            Op::MaskedNll {
                probs,
                targets,
                mask,
                count,
            } => {
                if want(*probs) {
                    let v = cols(&nodes[probs.0].shape);
                    let pv = &nodes[probs.0].value;
                    let scale = g[0] / *count as f64;
                    let acc = slot(grads, nodes, *probs);
                    for (t, &tgt) in targets.iter().enumerate() {
                        if mask[t] != 0 {
                            acc[t * v + tgt] -= scale / pv[t * v + tgt];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if want(*x) {
                    let acc = slot(grads, nodes, *x);
                    for a in acc.iter_mut() {
                        *a += g[0];
                    }
                }
            }
        }
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}
