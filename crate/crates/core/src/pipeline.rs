//! End-to-end runs: data preparation, backbone pretraining, fine-tuning and
//! evaluation, plus the ablation, adapter-size sweep and forgetting probe
//! built from them.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::codec::{train_vocab, Vocab};
use crate::corpus::{entity_pools, generate_synthetic, pretrain_pieces, CorpusFile, EntityPool};
use crate::dialogue::{encoding_pieces, linearize_turn, MAX_HISTORY_TURNS};
use crate::error::Result;
use crate::eval::{evaluate, EvalReport};
use crate::infer::StageLimits;
use crate::kb::Database;
use crate::model::{Model, ModelConfig, ParamPartition};
use crate::train::{finetune, pretrain_backbone, EpochLog, Sequence, TrainConfig, TrainMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub train_dialogues: usize,
    pub eval_dialogues: usize,
    pub pretrain_dialogues: usize,
    /// Also pretrain on fully serialized turns of the pretrain entity pool,
    /// not only on their plain conversation text.
    pub pretrain_structured: bool,
    pub vocab_size: usize,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub limits: StageLimits,
}

impl ExperimentConfig {
    /// The toy setting: two layers, two heads, width 64, adapter width 32.
    /// Pretraining favors many fresh dialogues over many epochs. Names are
    /// renamed per sequence, so repeated epochs would only teach the model
    /// to memorize the renamed copies.
    pub fn toy(seed: u64) -> Self {
        let vocab_size = 512;
        Self {
            seed,
            train_dialogues: 50,
            eval_dialogues: 30,
            pretrain_dialogues: 1500,
            pretrain_structured: true,
            vocab_size,
            model: ModelConfig::toy(vocab_size, 512),
            pretrain: TrainConfig {
                seed,
                epochs: 4,
                learning_rate: 1e-3,
                ..TrainConfig::with_mode(TrainMode::PretrainFull)
            },
            finetune: TrainConfig {
                seed,
                ..TrainConfig::with_mode(TrainMode::FinetuneAdapters)
            },
            limits: StageLimits::default(),
        }
    }
}

/// Corpora, databases and vocabulary of one experiment.
#[derive(Debug, Clone)]
pub struct Data {
    pub vocab: Vocab,
    pub train: CorpusFile,
    pub train_db: Database,
    pub eval: CorpusFile,
    pub eval_db: Database,
    /// Pretraining sequences, each as the pieces that are encoded
    /// independently.
    pub pretrain_text: Vec<Vec<String>>,
    /// Every entity name of every pool.
    pub lexicon: BTreeSet<String>,
}

/// Encoding pieces of every turn of `corpus`.
pub fn corpus_pieces(corpus: &CorpusFile) -> Vec<String> {
    corpus
        .dialogues
        .iter()
        .flat_map(|d| {
            (0..d.turns.len()).flat_map(move |i| encoding_pieces(&d.turns[..i], &d.turns[i], MAX_HISTORY_TURNS))
        })
        .collect()
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Data> {
    let (train, train_db) = generate_synthetic(cfg.seed, cfg.train_dialogues, EntityPool::Train);
    let (eval, eval_db) = generate_synthetic(cfg.seed + 1, cfg.eval_dialogues, EntityPool::Eval);
    let (pre, pre_db) = generate_synthetic(cfg.seed + 2, cfg.pretrain_dialogues, EntityPool::Pretrain);
    let pretrain_text = pretrain_pieces(&pre, &pre_db, cfg.pretrain_structured);
    let mut pieces = corpus_pieces(&train);
    pieces.extend(pretrain_text.iter().flatten().cloned());
    let vocab = train_vocab(&pieces, cfg.vocab_size)?;
    let lexicon = entity_pools()
        .values()
        .flat_map(Database::entity_names)
        .collect();
    Ok(Data {
        vocab,
        train,
        train_db,
        eval,
        eval_db,
        pretrain_text,
        lexicon,
    })
}

/// One training sequence per turn, with the gold history as context.
pub fn linearize_corpus(vocab: &Vocab, corpus: &CorpusFile) -> Result<Vec<Sequence>> {
    let mut out = Vec::new();
    for d in &corpus.dialogues {
        for i in 0..d.turns.len() {
            out.push(linearize_turn(vocab, &d.turns[..i], &d.turns[i], MAX_HISTORY_TURNS)?.into());
        }
    }
    Ok(out)
}

/// Backbone pretrained on the plain-text corpus, with adapters and copy
/// head switched off.
pub fn pretrained_backbone(
    cfg: &ExperimentConfig,
    data: &Data,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(Model, Vec<EpochLog>)> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = data.vocab.len();
    model_cfg.adapter_enabled = false;
    model_cfg.copy_enabled = false;
    let mut model = Model::init(model_cfg, cfg.seed)?;
    let corpus = pretrain_sequences(data);
    let logs = pretrain_backbone(&mut model, &corpus, &cfg.pretrain, on_epoch)?;
    Ok((model, logs))
}

/// Fine-tuning of `backbone` on the training corpus with adapters on. In
/// [`TrainMode::FinetuneAdapters`] only adapters and copy head train; in
/// [`TrainMode::FinetuneFull`] everything does.
pub fn finetuned(
    cfg: &ExperimentConfig,
    data: &Data,
    backbone: &Model,
    copy_enabled: bool,
    mode: TrainMode,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(Model, Vec<EpochLog>)> {
    let mut model = backbone.with_modules(true, copy_enabled);
    let seqs = linearize_corpus(&data.vocab, &data.train)?;
    let partition = match mode {
        TrainMode::FinetuneFull => ParamPartition::full(&model),
        _ => ParamPartition::adapter_finetune(&model),
    };
    let config = TrainConfig {
        mode,
        ..cfg.finetune.clone()
    };
    let logs = finetune(&mut model, &seqs, &partition, &config, on_epoch)?;
    Ok((model, logs))
}

pub fn evaluate_on(model: &Model, cfg: &ExperimentConfig, data: &Data, corpus: &CorpusFile, db: &Database) -> Result<EvalReport> {
    evaluate(model, &data.vocab, corpus, db, &data.lexicon, &cfg.limits)
}

/// Pretraining sequences as token ids.
pub fn pretrain_sequences(data: &Data) -> Vec<Vec<usize>> {
    data.pretrain_text
        .iter()
        .map(|pieces| pieces.iter().flat_map(|p| data.vocab.encode(p)).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub adapter_size: usize,
    pub final_loss: f64,
    pub report: EvalReport,
}

/// Adapter fine-tuning and held-out evaluation at each adapter width, every
/// run starting from the same backbone and seed.
pub fn adapter_sweep(
    cfg: &ExperimentConfig,
    data: &Data,
    backbone: &Model,
    sizes: &[usize],
    mut on_point: impl FnMut(&SweepPoint),
) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let resized = backbone.with_adapter_size(size, cfg.seed)?;
        let (model, logs) = finetuned(cfg, data, &resized, true, TrainMode::FinetuneAdapters, |_| {})?;
        let point = SweepPoint {
            adapter_size: size,
            final_loss: logs.last().map_or(f64::NAN, |l| l.mean_loss),
            report: evaluate_on(&model, cfg, data, &data.eval, &data.eval_db)?,
        };
        on_point(&point);
        out.push(point);
    }
    Ok(out)
}

/// Backbone-only perplexity on the pretraining corpus before fine-tuning and
/// after adapter-only and full fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub before: f64,
    pub after_adapter_finetune: f64,
    pub after_full_finetune: f64,
}

pub fn forgetting_probe(cfg: &ExperimentConfig, data: &Data, backbone: &Model) -> Result<ForgettingReport> {
    let seqs = pretrain_sequences(data);
    let ppl = |m: &Model| m.with_modules(false, false).perplexity(&seqs);
    let (adapted, _) = finetuned(cfg, data, backbone, true, TrainMode::FinetuneAdapters, |_| {})?;
    let (full, _) = finetuned(cfg, data, backbone, true, TrainMode::FinetuneFull, |_| {})?;
    Ok(ForgettingReport {
        before: ppl(backbone)?,
        after_adapter_finetune: ppl(&adapted)?,
        after_full_finetune: ppl(&full)?,
    })
}
