//! Reverse-mode gradients against central finite differences.
//!
//! Error metric per input tensor: `‖analytic − numeric‖₂ / max(‖analytic‖₂,
//! ‖numeric‖₂, 1e-12)`, required to be at most 1e-4.

use std::cell::Cell;

use acn_core::model::{Model, ModelConfig, ParamPartition};
use acn_core::train::{batch_gradients, Sequence};
use acn_core::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

thread_local! {
    static WORST: Cell<f64> = const { Cell::new(0.0) };
}

/// Largest relative error seen on this thread since the last call.
pub fn take_worst() -> f64 {
    WORST.with(|w| w.replace(0.0))
}

fn note(e: f64) {
    WORST.with(|w| w.set(w.get().max(e)));
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Reduces any output to a scalar through fixed pseudo-random weights so
/// every output element contributes a distinct amount.
fn weighted(tape: &mut Tape, out: Var) -> Var {
    let shape = tape.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
    let w = tape.constant(shape, w).unwrap();
    let p = tape.mul(out, w).unwrap();
    tape.sum(p)
}

fn check(name: &str, inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_grad(true)))
        .collect();
    let loss = f(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let eval = |ins: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x)).collect();
        let l = f(&mut t, &vs);
        t.value(l)[0]
    };
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; input.numel()]);
        let mut numeric = vec![0.0; input.numel()];
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            numeric[i] = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
        }
        let e = rel_err(&analytic, &numeric);
        note(e);
        assert!(e <= TOL, "{name}: input {k} relative error {e:e}");
    }
}

fn for_seeds(mut f: impl FnMut(&mut ChaCha8Rng)) {
    for seed in 0..SEEDS {
        f(&mut ChaCha8Rng::seed_from_u64(seed));
    }
}

pub fn matmul() {
    for_seeds(|r| {
        let ins = [random(r, &[2, 3, 4], -1.0, 1.0), random(r, &[4, 5], -1.0, 1.0)];
        check("matmul", &ins, |t, v| {
            let o = t.matmul(v[0], v[1]).unwrap();
            weighted(t, o)
        });
        let ins = [random(r, &[3, 4], -1.0, 1.0), random(r, &[5, 4], -1.0, 1.0)];
        check("matmul_nt", &ins, |t, v| {
            let o = t.matmul_nt(v[0], v[1]).unwrap();
            weighted(t, o)
        });
    });
}

pub fn broadcasting_binary_ops() {
    for_seeds(|r| {
        for shapes in [[vec![3, 4], vec![4]], [vec![2, 3, 4], vec![3, 1]], [vec![3, 1], vec![1, 4]]] {
            let ins = [random(r, &shapes[0], -1.0, 1.0), random(r, &shapes[1], -1.0, 1.0)];
            check("add", &ins, |t, v| {
                let o = t.add(v[0], v[1]).unwrap();
                weighted(t, o)
            });
            check("mul", &ins, |t, v| {
                let o = t.mul(v[0], v[1]).unwrap();
                weighted(t, o)
            });
        }
    });
}

pub fn elementwise_ops() {
    for_seeds(|r| {
        let x = [random(r, &[3, 5], -2.0, 2.0)];
        check("affine", &x, |t, v| {
            let o = t.affine(v[0], -1.5, 0.25);
            weighted(t, o)
        });
        check("scale", &x, |t, v| {
            let o = t.scale(v[0], 0.3);
            weighted(t, o)
        });
        check("sigmoid", &x, |t, v| {
            let o = t.sigmoid(v[0]);
            weighted(t, o)
        });
        check("gelu", &x, |t, v| {
            let o = t.gelu(v[0]);
            weighted(t, o)
        });
        check("sum", &x, |t, v| t.sum(v[0]));
        // Keep ReLU inputs away from the kink.
        let mut y = random(r, &[3, 5], 0.05, 2.0);
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            if i % 2 == 0 {
                *v = -*v;
            }
        }
        check("relu", &[y], |t, v| {
            let o = t.relu(v[0]);
            weighted(t, o)
        });
    });
}

pub fn softmax_every_axis() {
    for_seeds(|r| {
        let x = [random(r, &[2, 3, 4], -2.0, 2.0)];
        for axis in 0..3 {
            check("softmax", &x, |t, v| {
                let o = t.softmax(v[0], axis).unwrap();
                weighted(t, o)
            });
        }
    });
}

pub fn layer_norm() {
    for_seeds(|r| {
        let ins = [
            random(r, &[3, 6], -2.0, 2.0),
            random(r, &[6], 0.5, 1.5),
            random(r, &[6], -0.5, 0.5),
        ];
        check("layer_norm", &ins, |t, v| {
            let o = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            weighted(t, o)
        });
    });
}

pub fn indexing_ops() {
    for_seeds(|r| {
        let table = [random(r, &[5, 3], -1.0, 1.0)];
        check("gather_rows", &table, |t, v| {
            let o = t.gather_rows(v[0], &[4, 0, 4, 2]).unwrap();
            weighted(t, o)
        });
        let x = [random(r, &[3, 6], -1.0, 1.0)];
        check("slice_cols", &x, |t, v| {
            let o = t.slice_cols(v[0], 2, 3).unwrap();
            weighted(t, o)
        });
        let ins = [random(r, &[3, 2], -1.0, 1.0), random(r, &[3, 4], -1.0, 1.0)];
        check("concat_cols", &ins, |t, v| {
            let o = t.concat_cols(&[v[0], v[1], v[0]]).unwrap();
            weighted(t, o)
        });
        let sq = [random(r, &[4, 4], -1.0, 1.0)];
        check("causal_mask+softmax", &sq, |t, v| {
            let m = t.causal_mask(v[0]).unwrap();
            let o = t.softmax(m, 1).unwrap();
            weighted(t, o)
        });
        let a = [random(r, &[3, 4], -1.0, 1.0)];
        check("scatter_cols", &a, |t, v| {
            let o = t.scatter_cols(v[0], &[2, 0, 2, 5], 6).unwrap();
            weighted(t, o)
        });
    });
}

pub fn losses() {
    for_seeds(|r| {
        let logits = [random(r, &[4, 5], -2.0, 2.0)];
        let targets = [1, 4, 0, 2];
        let mask = [1, 0, 1, 1];
        check("masked_cross_entropy", &logits, |t, v| {
            t.masked_cross_entropy(v[0], &targets, &mask).unwrap()
        });
        check("masked_nll", &logits, |t, v| {
            let p = t.softmax(v[0], 1).unwrap();
            t.masked_nll(p, &targets, &mask).unwrap()
        });
    });
}

fn tiny_model(seed: u64, copy: bool) -> Model {
    let cfg = ModelConfig {
        n_layer: 2,
        n_head: 2,
        d_model: 8,
        d_ff: 12,
        vocab_size: 11,
        max_positions: 8,
        adapter_size: 3,
        adapter_enabled: true,
        copy_enabled: copy,
    };
    let mut m = Model::init(cfg, seed).unwrap();
    // Zero-initialized modules would hide their gradient paths.
    let mut r = ChaCha8Rng::seed_from_u64(seed + 100);
    for (name, p) in m.params_mut() {
        if name.ends_with(".up") || name.starts_with("copy.") {
            p.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.3..0.3));
        }
    }
    m
}

fn end_to_end(seed: u64, copy: bool) {
    let mut m = tiny_model(seed, copy);
    ParamPartition::full(&m).apply(&mut m).unwrap();
    let batch = vec![
        Sequence {
            tokens: vec![1, 5, 2, 5, 9, 3, 1],
            mask: vec![1, 1, 0, 1, 1, 0, 1],
        },
        Sequence::plain(vec![4, 4, 10, 0, 7]),
    ];
    let (_, grads) = batch_gradients(&m, &batch).unwrap();
    let names: Vec<String> = m.params().into_iter().map(|(n, _)| n).collect();
    for name in &names {
        let n = m.params().into_iter().find(|(k, _)| k == name).unwrap().1.numel();
        let mut numeric = vec![0.0; n];
        for i in 0..n {
            let eval = |delta: f64| {
                let mut p = m.clone();
                for (k, t) in p.params_mut() {
                    if &k == name {
                        t.data_mut()[i] += delta;
                    }
                }
                batch_gradients(&p, &batch).unwrap().0
            };
            numeric[i] = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
        }
        let e = rel_err(&grads[name], &numeric);
        note(e);
        assert!(e <= TOL, "seed {seed} copy {copy}: {name} relative error {e:e}");
    }
}

/// Every parameter of a tiny model, copy head on and off.
pub fn tiny_model_loss_end_to_end() {
    for seed in 0..3 {
        end_to_end(seed, true);
        end_to_end(seed, false);
    }
}
