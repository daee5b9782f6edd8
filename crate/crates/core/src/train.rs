//! Masked next-token training with Adam and the frozen-backbone contract.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dialogue::LinearizedTurn;
use crate::error::{AcnError, Result};
use crate::model::{Model, ParamKind, ParamPartition};
use crate::tensor::Tape;

pub const DEFAULT_LEARNING_RATE: f64 = 3e-4;
pub const DEFAULT_BATCH_SIZE: usize = 2;
pub const DEFAULT_EPOCHS: usize = 15;
pub const DEFAULT_GRAD_CLIP: f64 = 1.0;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    PretrainFull,
    FinetuneAdapters,
    FinetuneFull,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Global gradient-norm ceiling; `f64::INFINITY` disables clipping.
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: DEFAULT_EPOCHS,
            grad_clip_norm: DEFAULT_GRAD_CLIP,
            seed: 0,
            mode: TrainMode::FinetuneAdapters,
        }
    }
}

impl TrainConfig {
    pub fn with_mode(mode: TrainMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    /// A zero learning rate is allowed; it leaves every parameter unchanged.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(AcnError::Config(format!("learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(AcnError::Config("batch size and epochs must be positive".into()));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(AcnError::Config(format!("grad clip norm {}", self.grad_clip_norm)));
        }
        Ok(())
    }
}

/// One supervised sequence: token ids and a per-token loss mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    pub tokens: Vec<usize>,
    pub mask: Vec<u8>,
}

impl Sequence {
    /// Every position supervised.
    pub fn plain(tokens: Vec<usize>) -> Self {
        let mask = vec![1; tokens.len()];
        Self { tokens, mask }
    }
}

impl From<LinearizedTurn> for Sequence {
    fn from(t: LinearizedTurn) -> Self {
        Self {
            tokens: t.token_ids,
            mask: t.loss_mask,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam moments for the trainable parameters only.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    moments: BTreeMap<String, Moments>,
    pub step: u64,
}

impl AdamState {
    /// Zeroed moments for every parameter whose `requires_grad` flag is set.
    pub fn new(model: &Model) -> Self {
        let moments = model
            .params()
            .into_iter()
            .filter(|(_, t)| t.requires_grad)
            .map(|(n, t)| {
                let z = vec![0.0; t.numel()];
                (n, Moments { m: z.clone(), v: z })
            })
            .collect();
        Self { moments, step: 0 }
    }

    pub fn tracks(&self, name: &str) -> bool {
        self.moments.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.moments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.moments.is_empty()
    }

    /// One bias-corrected update of every tracked parameter. Advances the
    /// step counter once.
    pub fn apply(&mut self, model: &mut Model, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, p) in model.params_mut() {
            let Some(mo) = self.moments.get_mut(&name) else {
                continue;
            };
            let g = grads
                .get(&name)
                .ok_or_else(|| AcnError::Training(format!("no gradient for {name}")))?;
            if g.len() != p.numel() || mo.m.len() != p.numel() {
                return Err(AcnError::Training(format!("moment shape mismatch for {name}")));
            }
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(&mut mo.m).zip(&mut mo.v) {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Mean masked loss over `batch` and its gradient for every parameter with
/// `requires_grad` set. Errors if a frozen parameter receives a gradient.
pub fn batch_gradients(model: &Model, batch: &[Sequence]) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    if batch.is_empty() {
        return Err(AcnError::Training("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut loss_sum = 0.0;
    for seq in batch {
        let mut tape = Tape::new();
        let (loss, fwd) = model.loss_tape(&mut tape, &seq.tokens, &seq.mask)?;
        loss_sum += tape.value(loss)[0];
        tape.backward_scaled(loss, scale)?;
        for ((name, var), (_, p)) in fwd.params.iter().zip(model.params()) {
            let g = tape.take_grad(*var);
            match (p.requires_grad, g) {
                (false, Some(_)) => return Err(AcnError::FrozenGradient(name.clone())),
                (false, None) => {}
                (true, g) => {
                    let g = g.unwrap_or_else(|| vec![0.0; p.numel()]);
                    match grads.get_mut(name) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => {
                            grads.insert(name.clone(), g);
                        }
                    }
                }
            }
        }
    }
    Ok((loss_sum * scale, grads))
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flatten()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Forward, backward, clip and Adam update on one batch. Returns the mean
/// loss before the update.
pub fn train_step(model: &mut Model, batch: &[Sequence], adam: &mut AdamState, config: &TrainConfig) -> Result<f64> {
    let (loss, mut grads) = batch_gradients(model, batch)?;
    if let Some(name) = grads.keys().find(|n| !adam.tracks(n)) {
        return Err(AcnError::Training(format!("{name} is trainable but has no optimizer state")));
    }
    clip_global_norm(&mut grads, config.grad_clip_norm);
    adam.apply(model, &grads, config.learning_rate)?;
    Ok(loss)
}

/// One record of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
    pub wall_time_s: f64,
}

/// Line-delimited JSON sink for [`EpochLog`] records.
pub fn write_log_line(out: &mut impl Write, log: &EpochLog) -> Result<()> {
    let line = serde_json::to_string(log)?;
    writeln!(out, "{line}").map_err(|e| AcnError::io("<training log>", e))
}

/// Trains the parameters of `partition` for `config.epochs` epochs with the
/// sequences reshuffled each epoch. `on_epoch` sees each epoch's record as it
/// completes.
pub fn train(
    model: &mut Model,
    data: &[Sequence],
    partition: &ParamPartition,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    if data.is_empty() {
        return Err(AcnError::Training("no training sequences".into()));
    }
    match config.mode {
        TrainMode::PretrainFull => {
            if let Some(n) = partition.trainable.iter().find(|n| ParamKind::of(n) != ParamKind::Backbone) {
                return Err(AcnError::Config(format!("pretraining may not train {n}")));
            }
        }
        TrainMode::FinetuneAdapters => {
            if !partition.is_adapter_finetune() {
                return Err(AcnError::Config(
                    "adapter fine-tuning requires a frozen backbone".into(),
                ));
            }
        }
        TrainMode::FinetuneFull => {}
    }
    partition.apply(model)?;
    let mut adam = AdamState::new(model);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Sequence> = chunk.iter().map(|&i| data[i].clone()).collect();
            total += train_step(model, &batch, &mut adam, config)?;
            steps += 1;
        }
        let log = EpochLog {
            epoch,
            mean_loss: total / steps as f64,
            steps,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Trains every backbone parameter on plain text with all positions
/// supervised. The model must have adapters and the copy head switched off.
pub fn pretrain_backbone(
    model: &mut Model,
    corpus: &[Vec<usize>],
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if config.mode != TrainMode::PretrainFull {
        return Err(AcnError::Config(format!("pretraining in mode {:?}", config.mode)));
    }
    if model.config.adapter_enabled || model.config.copy_enabled {
        return Err(AcnError::Config(
            "pretraining needs adapters and the copy head disabled".into(),
        ));
    }
    let data: Vec<Sequence> = corpus
        .iter()
        .filter(|s| s.len() >= 2)
        .map(|s| Sequence::plain(s.clone()))
        .collect();
    let partition = ParamPartition::backbone_only(model);
    train(model, &data, &partition, config, on_epoch)
}

/// Fine-tunes the trainable side of `partition` on linearized dialogue turns.
pub fn finetune(
    model: &mut Model,
    turns: &[Sequence],
    partition: &ParamPartition,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if config.mode == TrainMode::PretrainFull {
        return Err(AcnError::Config("fine-tuning in pretraining mode".into()));
    }
    train(model, turns, partition, config, on_epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::Tensor;

    fn tiny() -> Model {
        let cfg = ModelConfig {
            n_layer: 1,
            n_head: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 12,
            max_positions: 16,
            adapter_size: 4,
            adapter_enabled: true,
            copy_enabled: true,
        };
        Model::init(cfg, 3).unwrap()
    }

    fn seqs() -> Vec<Sequence> {
        vec![
            Sequence::plain(vec![1, 2, 3, 4, 5]),
            Sequence {
                tokens: vec![5, 4, 3, 2, 1, 0],
                mask: vec![1, 1, 0, 0, 1, 1],
            },
            Sequence::plain(vec![7, 8, 9]),
        ]
    }

    #[test]
    fn adam_hand_step() {
        // First step: m̂ = g, v̂ = g², so Δ = lr·g/(|g| + eps).
        let mut m = tiny();
        m.copy.b_c = Tensor::new(vec![1], vec![1.0]).unwrap().with_grad(true);
        let mut adam = AdamState::new(&m);
        assert_eq!(adam.len(), 1);
        let grads = BTreeMap::from([("copy.b".to_string(), vec![0.5])]);
        adam.apply(&mut m, &grads, 0.1).unwrap();
        let w = m.copy.b_c.data()[0];
        assert!((w - 0.9).abs() < 1e-3, "{w}");
        assert!((w - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn clip_scales_to_norm() {
        let mut g = BTreeMap::from([("a".to_string(), vec![3.0]), ("b".to_string(), vec![4.0])]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g["a"][0] - 0.6).abs() < 1e-15 && (g["b"][0] - 0.8).abs() < 1e-15);
        let mut small = BTreeMap::from([("a".to_string(), vec![0.1])]);
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small["a"], vec![0.1]);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let mut m = tiny();
        let mut adam = AdamState::new(&m);
        assert!(train_step(&mut m, &[], &mut adam, &TrainConfig::default()).is_err());
    }

    #[test]
    fn duplicated_batch_has_same_loss_and_gradient() {
        let mut m = tiny();
        ParamPartition::full(&m).apply(&mut m).unwrap();
        let one = vec![seqs()[1].clone()];
        let two = vec![seqs()[1].clone(), seqs()[1].clone()];
        let (l1, g1) = batch_gradients(&m, &one).unwrap();
        let (l2, g2) = batch_gradients(&m, &two).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (k, a) in &g1 {
            for (x, y) in a.iter().zip(&g2[k]) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn untrained_loss_is_near_log_vocab() {
        let m = tiny().with_modules(false, false);
        let (loss, _) = batch_gradients(&m, &seqs()).unwrap();
        assert!((loss - 12f64.ln()).abs() < 0.1, "{loss}");
    }

    #[test]
    fn adapter_finetune_leaves_backbone_bit_identical() {
        let mut m = tiny();
        let before = m.clone();
        let p = ParamPartition::adapter_finetune(&m);
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        finetune(&mut m, &seqs(), &p, &cfg, |_| {}).unwrap();
        let mut changed = 0;
        for ((name, a), (_, b)) in m.params().into_iter().zip(before.params()) {
            if ParamKind::of(&name) == ParamKind::Backbone {
                assert_eq!(a.data(), b.data(), "{name}");
            } else if a.data() != b.data() {
                changed += 1;
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut m = tiny();
        let before = m.clone();
        let p = ParamPartition::adapter_finetune(&m);
        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        finetune(&mut m, &seqs(), &p, &cfg, |_| {}).unwrap();
        for ((_, a), (_, b)) in m.params().into_iter().zip(before.params()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn parameter_outside_optimizer_aborts() {
        // A parameter unfrozen behind the optimizer's back aborts the step.
        let mut m = tiny();
        ParamPartition::adapter_finetune(&m).apply(&mut m).unwrap();
        let mut adam = AdamState::new(&m);
        m.wte.requires_grad = true;
        let err = train_step(&mut m, &seqs()[..1], &mut adam, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, AcnError::Training(_)), "{err}");
    }

    #[test]
    fn pretraining_rejects_adapter_modes() {
        let mut m = tiny();
        let cfg = TrainConfig::with_mode(TrainMode::PretrainFull);
        let data = vec![vec![1, 2, 3]];
        assert!(matches!(
            pretrain_backbone(&mut m, &data, &cfg, |_| {}),
            Err(AcnError::Config(_))
        ));
        let mut plain = m.with_modules(false, false);
        let full = ParamPartition::full(&plain);
        assert!(matches!(
            train(&mut plain, &[Sequence::plain(vec![1, 2])], &full, &cfg, |_| {}),
            Err(AcnError::Config(_))
        ));
    }

    #[test]
    fn pretraining_memorizes_and_is_deterministic() {
        let run = || {
            let mut m = tiny().with_modules(false, false);
            let cfg = TrainConfig {
                epochs: 200,
                learning_rate: 1e-2,
                batch_size: 1,
                ..TrainConfig::with_mode(TrainMode::PretrainFull)
            };
            let logs = pretrain_backbone(&mut m, &[vec![3, 1, 4, 1, 5, 9, 2, 6]], &cfg, |_| {}).unwrap();
            (m, logs)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert!(la.iter().zip(&lb).all(|(x, y)| x.mean_loss == y.mean_loss));
        assert!(la.last().unwrap().mean_loss < 0.1, "{}", la.last().unwrap().mean_loss);
        assert!(la[1].mean_loss < la[0].mean_loss);
    }

    #[test]
    fn log_lines_are_json() {
        let mut buf = Vec::new();
        let log = EpochLog {
            epoch: 1,
            mean_loss: 2.5,
            steps: 4,
            wall_time_s: 0.1,
        };
        write_log_line(&mut buf, &log).unwrap();
        let back: EpochLog = serde_json::from_str(std::str::from_utf8(&buf).unwrap().trim()).unwrap();
        assert_eq!(back, log);
    }
}
