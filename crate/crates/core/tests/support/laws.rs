//! Structural laws of the network: causality, decoder equivalence,
//! normalization, module identities and an independent reference.

use acn_core::model::{Decoder, Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randomized(cfg: ModelConfig, seed: u64) -> Model {
    let mut m = Model::init(cfg, seed).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for (_, p) in m.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-0.3..0.3));
    }
    m
}

fn small(copy: bool, adapters: bool) -> ModelConfig {
    ModelConfig {
        n_layer: 2,
        n_head: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: 23,
        max_positions: 24,
        adapter_size: 5,
        adapter_enabled: adapters,
        copy_enabled: copy,
    }
}

pub fn decoder_steps_equal_full_forward_rows_bitwise() {
    for seed in 0..6 {
        for (copy, adapters) in [(true, true), (false, true), (true, false), (false, false)] {
            let m = randomized(small(copy, adapters), seed);
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let tokens: Vec<usize> = (0..17).map(|_| r.gen_range(0..23)).collect();
            let full = m.forward_full(&tokens).unwrap();
            let mut dec = Decoder::new(&m);
            for (t, &tok) in tokens.iter().enumerate() {
                let s = dec.step(tok).unwrap();
                assert_eq!(s.gen_probs.as_slice(), full.gen_probs.row(t), "gen row {t}");
                assert_eq!(s.mixed_probs.as_slice(), full.mixed_probs.row(t), "mixed row {t}");
                assert_eq!(s.gate, full.gate[t]);
                let row = full.last_attention.row(t);
                assert_eq!(s.attention.as_slice(), &row[..=t]);
                assert!(row[t + 1..].iter().all(|&v| v == 0.0));
            }
        }
    }
}

pub fn outputs_are_causal() {
    let m = randomized(small(true, true), 3);
    let a: Vec<usize> = (0..12).map(|i| (i * 5) % 23).collect();
    let fa = m.forward_full(&a).unwrap();
    for k in 0..a.len() {
        let mut b = a.clone();
        b[k] = (b[k] + 1) % 23;
        let fb = m.forward_full(&b).unwrap();
        for t in 0..k {
            assert_eq!(fa.mixed_probs.row(t), fb.mixed_probs.row(t), "position {t} saw token {k}");
        }
        assert_ne!(fa.mixed_probs.row(k), fb.mixed_probs.row(k));
    }
}

pub fn mixed_rows_sum_to_one_over_random_models() {
    for seed in 0..100 {
        let m = randomized(small(true, seed % 2 == 0), seed);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let tokens: Vec<usize> = (0..9).map(|_| r.gen_range(0..23)).collect();
        let out = m.forward_full(&tokens).unwrap();
        for t in 0..tokens.len() {
            let s: f64 = out.mixed_probs.row(t).iter().sum();
            assert!((s - 1.0).abs() <= 1e-9, "seed {seed} row {t}: {s}");
        }
    }
}

pub fn zero_up_projection_makes_adapters_transparent() {
    let mut m = randomized(small(true, true), 8);
    for a in &mut m.adapters {
        a.w_up.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let tokens = [3, 1, 4, 1, 5, 9, 2, 6];
    let with = m.forward_full(&tokens).unwrap();
    let without = m.with_modules(false, true).forward_full(&tokens).unwrap();
    for (a, b) in with.hidden.data().iter().zip(without.hidden.data()) {
        assert!((a - b).abs() <= 1e-12);
    }
}

pub fn zero_copy_head_gives_half_gate() {
    let mut m = randomized(small(true, true), 9);
    m.copy.w_c.data_mut().iter_mut().for_each(|v| *v = 0.0);
    m.copy.b_c.data_mut()[0] = 0.0;
    let out = m.forward_full(&[1, 2, 3]).unwrap();
    assert!(out.gate.iter().all(|&g| g == 0.5));
}

/// Independent straight-line evaluation of the whole network for one layer,
/// one head, written with plain loops over nested vectors.
pub mod reference {
    pub type Mat = Vec<Vec<f64>>;

    pub fn matmul(a: &Mat, b: &Mat) -> Mat {
        a.iter()
            .map(|row| {
                (0..b[0].len())
                    .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                    .collect()
            })
            .collect()
    }

    pub fn add_row(a: &Mat, bias: &[f64]) -> Mat {
        a.iter()
            .map(|r| r.iter().zip(bias).map(|(x, b)| x + b).collect())
            .collect()
    }

    pub fn add(a: &Mat, b: &Mat) -> Mat {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
            .collect()
    }

    pub fn layer_norm(a: &Mat, g: &[f64], b: &[f64]) -> Mat {
        a.iter()
            .map(|r| {
                let n = r.len() as f64;
                let mean = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                r.iter()
                    .enumerate()
                    .map(|(i, x)| (x - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
                    .collect()
            })
            .collect()
    }

    pub fn softmax(r: &[f64]) -> Vec<f64> {
        let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = r.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    pub fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    pub fn transpose(a: &Mat) -> Mat {
        (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
    }
}

pub fn to_mat(t: &acn_core::Tensor) -> reference::Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn tiny_forward_matches_straight_line_reference() {
    use reference::*;
    let cfg = ModelConfig {
        n_layer: 1,
        n_head: 1,
        d_model: 4,
        d_ff: 8,
        vocab_size: 6,
        max_positions: 3,
        adapter_size: 2,
        adapter_enabled: true,
        copy_enabled: true,
    };
    for seed in 0..5 {
        let m = randomized(cfg.clone(), seed);
        let tokens = [2usize, 5, 2];
        let b = &m.blocks[0];
        let ad = &m.adapters[0];
        let vec1 = |t: &acn_core::Tensor| t.data().to_vec();

        let e: Mat = tokens
            .iter()
            .enumerate()
            .map(|(j, &tok)| m.wte.row(tok).iter().zip(m.wpe.row(j)).map(|(a, p)| a + p).collect())
            .collect();
        let a = layer_norm(&e, &vec1(&b.ln1_gamma), &vec1(&b.ln1_beta));
        let qkv = add_row(&matmul(&a, &to_mat(&b.qkv_w)), &vec1(&b.qkv_b));
        let q: Mat = qkv.iter().map(|r| r[0..4].to_vec()).collect();
        let k: Mat = qkv.iter().map(|r| r[4..8].to_vec()).collect();
        let v: Mat = qkv.iter().map(|r| r[8..12].to_vec()).collect();
        let mut attn: Mat = Vec::new();
        for i in 0..3 {
            let scores: Vec<f64> = (0..=i)
                .map(|j| q[i].iter().zip(&k[j]).map(|(x, y)| x * y).sum::<f64>() / 2.0)
                .collect();
            let mut p = softmax(&scores);
            p.resize(3, 0.0);
            attn.push(p);
        }
        let o = matmul(&attn, &v);
        let o = add_row(&matmul(&o, &to_mat(&b.attn_proj_w)), &vec1(&b.attn_proj_b));
        let x = add(&e, &o);
        let h2 = layer_norm(&x, &vec1(&b.ln2_gamma), &vec1(&b.ln2_beta));
        let f = add_row(&matmul(&h2, &to_mat(&b.fc_w)), &vec1(&b.fc_b));
        let f: Mat = f.iter().map(|r| r.iter().map(|&z| gelu(z)).collect()).collect();
        let f = add_row(&matmul(&f, &to_mat(&b.mlp_proj_w)), &vec1(&b.mlp_proj_b));
        let x = add(&x, &f);
        // Adapter: x + ReLU(LN(x) W_down) W_up.
        let z = matmul(&layer_norm(&x, &vec1(&ad.ln_gamma), &vec1(&ad.ln_beta)), &to_mat(&ad.w_down));
        let z: Mat = z.iter().map(|r| r.iter().map(|&v| v.max(0.0)).collect()).collect();
        let x = add(&x, &matmul(&z, &to_mat(&ad.w_up)));
        let h = layer_norm(&x, &vec1(&m.ln_f_gamma), &vec1(&m.ln_f_beta));
        let logits = matmul(&h, &transpose(&to_mat(&m.wte)));
        let gen: Mat = logits.iter().map(|r| softmax(r)).collect();

        let out = m.forward_full(&tokens).unwrap();
        for j in 0..3 {
            let cat: Vec<f64> = e[j].iter().chain(&h[j]).copied().collect();
            let logit: f64 = cat.iter().zip(m.copy.w_c.data()).map(|(a, w)| a * w).sum::<f64>()
                + m.copy.b_c.data()[0];
            let g = 1.0 / (1.0 + (-logit).exp());
            let mut copy = vec![0.0; 6];
            for (i, &tok) in tokens.iter().enumerate() {
                copy[tok] += attn[j][i];
            }
            let mixed: Vec<f64> = (0..6).map(|w| (1.0 - g) * gen[j][w] + g * copy[w]).collect();

            assert!((out.gate[j] - g).abs() <= 1e-9);
            for w in 0..6 {
                assert!((out.gen_probs.row(j)[w] - gen[j][w]).abs() <= 1e-9);
                assert!((out.mixed_probs.row(j)[w] - mixed[w]).abs() <= 1e-9, "seed {seed} pos {j} tok {w}");
            }
            for i in 0..4 {
                assert!((out.hidden.row(j)[i] - h[j][i]).abs() <= 1e-9);
            }
        }
    }
}
