//! Subcommand implementations. Each one composes library operations and
//! reads or writes versioned files.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use acn_core::codec::{train_vocab, Vocab};
use acn_core::corpus::{entity_pools, generate_synthetic, load_corpus, pretrain_pieces, CorpusFile, EntityPool};
use acn_core::dialogue::DialogueTurn;
use acn_core::eval::{evaluate, EvalReport};
use acn_core::infer::{respond, StageLimits};
use acn_core::kb::Database;
use acn_core::model::ADAPTER_SWEEP_SIZES;
use acn_core::pipeline::{corpus_pieces, linearize_corpus};
use acn_core::train::{finetune, pretrain_backbone, write_log_line, EpochLog, TrainConfig, TrainMode};
use acn_core::{AcnError, Checkpoint, Model, ModelConfig, ParamPartition};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::server::{serve, AppState, ModelResponder};

#[derive(Debug, Parser)]
#[command(name = "acn", version, about = "Adapter and copy-head dialogue models: data, training, evaluation and serving")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic two-domain corpus and its entity database.
    GenCorpus(GenCorpusArgs),
    /// Train a byte-fallback BPE vocabulary.
    TrainVocab(TrainVocabArgs),
    /// Pretrain a backbone language model with adapters and copy head off.
    Pretrain(PretrainArgs),
    /// Fine-tune a checkpoint on a dialogue corpus.
    Finetune(FinetuneArgs),
    /// Score a checkpoint on a corpus.
    Evaluate(EvaluateArgs),
    /// Interactive dialogue on stdin and stdout.
    Chat(ModelArgs),
    /// HTTP JSON session service.
    Serve(ServeArgs),
    /// Fine-tune and evaluate once per adapter bottleneck size.
    SweepAdapters(SweepArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PoolArg {
    Train,
    Eval,
    Pretrain,
}

impl From<PoolArg> for EntityPool {
    fn from(p: PoolArg) -> Self {
        match p {
            PoolArg::Train => EntityPool::Train,
            PoolArg::Eval => EntityPool::Eval,
            PoolArg::Pretrain => EntityPool::Pretrain,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long, value_enum, default_value = "train")]
    pub pool: PoolArg,
    #[arg(long, default_value_t = 50)]
    pub dialogues: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub db_out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainVocabArgs {
    /// Dialogue corpora whose serialized turns feed the merges.
    #[arg(long = "corpus", required = true)]
    pub corpora: Vec<PathBuf>,
    /// Database of each corpus, in the same order.
    #[arg(long = "db", required = true)]
    pub dbs: Vec<PathBuf>,
    #[arg(long, default_value_t = 512)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub db: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Append one JSON line per epoch to this file.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

impl TrainArgs {
    fn config(&self, base: TrainConfig) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr.unwrap_or(base.learning_rate),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            epochs: self.epochs.unwrap_or(base.epochs),
            grad_clip_norm: self.grad_clip.unwrap_or(base.grad_clip_norm),
            seed: self.seed,
            mode: base.mode,
        }
    }
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Model shape as JSON; defaults to the toy shape.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n_layer: Option<usize>,
    #[arg(long)]
    pub n_head: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub adapter_size: Option<usize>,
    #[arg(long)]
    pub max_positions: Option<usize>,
    /// Train on conversation text and entity descriptions only.
    #[arg(long)]
    pub plain: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Adapters,
    Full,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "adapters")]
    pub mode: ModeArg,
    #[arg(long)]
    pub no_copy: bool,
    /// Replace the adapters with fresh ones of this bottleneck size.
    #[arg(long)]
    pub adapter_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Write the report as JSON here as well as printing it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub db: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Pretrained backbone.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub eval_corpus: PathBuf,
    #[arg(long)]
    pub eval_db: PathBuf,
    /// Directory receiving one `adapter-<size>.json` report per size.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(value_parser = clap::value_parser!(u64).range(1..))]
    pub sizes: Vec<u64>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::TrainVocab(a) => train_vocab_cmd(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Chat(a) => chat(a, std::io::stdin().lock(), std::io::stdout().lock()),
        Command::Serve(a) => serve_cmd(a),
        Command::SweepAdapters(a) => sweep(a),
    }
}

fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let (corpus, db) = generate_synthetic(a.seed, a.dialogues, a.pool.into());
    corpus.save(&a.out)?;
    db.save(&a.db_out)?;
    eprintln!("wrote {} dialogues ({} turns) to {}", corpus.dialogues.len(), corpus.turn_count(), a.out.display());
    Ok(())
}

fn train_vocab_cmd(a: TrainVocabArgs) -> Result<()> {
    if a.corpora.len() != a.dbs.len() {
        bail!("got {} --corpus and {} --db paths; pass one database per corpus", a.corpora.len(), a.dbs.len());
    }
    let mut pieces = Vec::new();
    for (c, d) in a.corpora.iter().zip(&a.dbs) {
        let db = Database::load(d)?;
        let corpus = load_corpus(c, &db)?;
        pieces.extend(corpus_pieces(&corpus));
        pieces.extend(pretrain_pieces(&corpus, &db, false).into_iter().flatten());
    }
    let vocab = train_vocab(&pieces, a.size)?;
    vocab.save(&a.out)?;
    eprintln!("vocabulary of {} tokens, hash {}", vocab.len(), vocab.hash());
    Ok(())
}

fn load_data(d: &DataArgs) -> Result<(CorpusFile, Database, Vocab)> {
    let db = Database::load(&d.db)?;
    let corpus = load_corpus(&d.corpus, &db)?;
    let vocab = Vocab::load(&d.vocab)?;
    Ok((corpus, db, vocab))
}

fn load_checkpoint(path: &Path, vocab: &Vocab) -> Result<Model> {
    let ck = Checkpoint::load(path)?;
    ck.check_vocab(&vocab.hash())?;
    Ok(ck.model)
}

/// Prints each epoch to stderr and, with `--log`, appends it as a JSON line.
fn epoch_logger(path: Option<&Path>) -> Result<impl FnMut(&EpochLog)> {
    let mut file = match path {
        Some(p) => Some(
            fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .with_context(|| format!("opening log {}", p.display()))?,
        ),
        None => None,
    };
    Ok(move |log: &EpochLog| {
        eprintln!("epoch {:>3}  loss {:.4}  {:.1}s", log.epoch, log.mean_loss, log.wall_time_s);
        if let Some(f) = file.as_mut() {
            if let Err(e) = write_log_line(f, log) {
                eprintln!("warning: {e}");
            }
        }
    })
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let (corpus, db, vocab) = load_data(&a.data)?;
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| AcnError::io(p, e))?;
            serde_json::from_str::<ModelConfig>(&text).with_context(|| format!("model config {}", p.display()))?
        }
        None => ModelConfig::toy(vocab.len(), 512),
    };
    cfg.vocab_size = vocab.len();
    cfg.n_layer = a.n_layer.unwrap_or(cfg.n_layer);
    cfg.n_head = a.n_head.unwrap_or(cfg.n_head);
    cfg.d_model = a.d_model.unwrap_or(cfg.d_model);
    cfg.d_ff = a.d_ff.unwrap_or(cfg.d_ff);
    cfg.adapter_size = a.adapter_size.unwrap_or(cfg.adapter_size);
    cfg.max_positions = a.max_positions.unwrap_or(cfg.max_positions);
    cfg.adapter_enabled = false;
    cfg.copy_enabled = false;
    let train_cfg = a.train.config(TrainConfig {
        learning_rate: 1e-3,
        ..TrainConfig::with_mode(TrainMode::PretrainFull)
    });
    let mut model = Model::init(cfg, a.train.seed)?;
    let seqs: Vec<Vec<usize>> = pretrain_pieces(&corpus, &db, !a.plain)
        .iter()
        .map(|pieces| pieces.iter().flat_map(|p| vocab.encode(p)).collect())
        .collect();
    pretrain_backbone(&mut model, &seqs, &train_cfg, epoch_logger(a.train.log.as_deref())?)?;
    Checkpoint::new(model, vocab.hash()).save(&a.out)?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn finetune_cmd(a: FinetuneArgs) -> Result<()> {
    let (corpus, _db, vocab) = load_data(&a.data)?;
    let mut model = load_checkpoint(&a.checkpoint, &vocab)?;
    if let Some(size) = a.adapter_size {
        model = model.with_adapter_size(size, a.train.seed)?;
    }
    let mut model = model.with_modules(true, !a.no_copy);
    let (mode, partition) = match a.mode {
        ModeArg::Adapters => (TrainMode::FinetuneAdapters, ParamPartition::adapter_finetune(&model)),
        ModeArg::Full => (TrainMode::FinetuneFull, ParamPartition::full(&model)),
    };
    let cfg = a.train.config(TrainConfig::with_mode(mode));
    let seqs = linearize_corpus(&vocab, &corpus)?;
    finetune(&mut model, &seqs, &partition, &cfg, epoch_logger(a.train.log.as_deref())?)?;
    Checkpoint::new(model, vocab.hash()).save(&a.out)?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

/// Entity names of every synthetic pool plus those of `db`.
fn lexicon(db: &Database) -> BTreeSet<String> {
    let mut names: BTreeSet<String> = entity_pools().values().flat_map(Database::entity_names).collect();
    names.extend(db.entity_names());
    names
}

fn evaluate_report(model: &Model, vocab: &Vocab, corpus: &CorpusFile, db: &Database) -> Result<EvalReport> {
    Ok(evaluate(model, vocab, corpus, db, &lexicon(db), &StageLimits::default())?)
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let (corpus, db, vocab) = load_data(&a.data)?;
    let model = load_checkpoint(&a.checkpoint, &vocab)?;
    let report = evaluate_report(&model, &vocab, &corpus, &db)?;
    print!("{}", report.to_text());
    if let Some(out) = &a.out {
        fs::write(out, report.to_json()?).map_err(|e| AcnError::io(out, e))?;
    }
    Ok(())
}

fn load_model_args(a: &ModelArgs) -> Result<ModelResponder> {
    let vocab = Vocab::load(&a.vocab)?;
    let model = load_checkpoint(&a.checkpoint, &vocab)?;
    let db = Database::load(&a.db)?;
    Ok(ModelResponder {
        model,
        vocab,
        db,
        limits: StageLimits::default(),
    })
}

/// Line-based REPL. An empty line or end of input ends the session;
/// `/reset` clears the history.
pub fn chat(a: ModelArgs, input: impl BufRead, mut out: impl Write) -> Result<()> {
    let r = load_model_args(&a)?;
    let mut history: Vec<DialogueTurn> = Vec::new();
    write!(out, "user> ")?;
    out.flush()?;
    for line in input.lines() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            break;
        }
        if text == "/reset" {
            history.clear();
        } else {
            match respond(&r.model, &r.vocab, &r.db, &history, text, &r.limits) {
                Ok(reply) => {
                    writeln!(out, "  belief: {}", reply.belief.to_text())?;
                    writeln!(out, "  db:     {}", reply.db_text)?;
                    writeln!(out, "  action: {}", reply.action.to_text())?;
                    writeln!(out, "system> {}", reply.response)?;
                    history.push(DialogueTurn {
                        user: text.to_string(),
                        belief: reply.belief,
                        db: reply.db,
                        action: reply.action,
                        system: reply.response,
                    });
                }
                Err(e) => writeln!(out, "error [{}]: {e}", e.code())?,
            }
        }
        write!(out, "user> ")?;
        out.flush()?;
    }
    writeln!(out)?;
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> Result<()> {
    let responder = load_model_args(&a.model)?;
    let state = Arc::new(AppState::new(responder));
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(serve(state, &a.host, a.port))
}

fn sweep(a: SweepArgs) -> Result<()> {
    let (corpus, _db, vocab) = load_data(&a.data)?;
    let eval_db = Database::load(&a.eval_db)?;
    let eval_corpus = load_corpus(&a.eval_corpus, &eval_db)?;
    let backbone = load_checkpoint(&a.checkpoint, &vocab)?;
    let sizes: Vec<usize> = if a.sizes.is_empty() {
        ADAPTER_SWEEP_SIZES.to_vec()
    } else {
        a.sizes.iter().map(|&s| s as usize).collect()
    };
    fs::create_dir_all(&a.out_dir).map_err(|e| AcnError::io(&a.out_dir, e))?;
    let seqs = linearize_corpus(&vocab, &corpus)?;
    let cfg = a.train.config(TrainConfig::with_mode(TrainMode::FinetuneAdapters));
    for size in sizes {
        let mut model = backbone.with_adapter_size(size, a.train.seed)?.with_modules(true, true);
        let partition = ParamPartition::adapter_finetune(&model);
        eprintln!("adapter size {size}");
        finetune(&mut model, &seqs, &partition, &cfg, epoch_logger(a.train.log.as_deref())?)?;
        let report = evaluate_report(&model, &vocab, &eval_corpus, &eval_db)?;
        let path = a.out_dir.join(format!("adapter-{size}.json"));
        fs::write(&path, report.to_json()?).map_err(|e| AcnError::io(&path, e))?;
        println!("{size}\t{:.4}\t{:.2}\t{}", report.joint_accuracy, report.combined, path.display());
    }
    Ok(())
}
