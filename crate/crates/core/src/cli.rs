//! Command-line interface: prepare, train, eval, infer, inspect, checkgrad,
//! gate-stats and null-align.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::embeddings::{build_vocab, impute_oov, load_pretrained, EmbeddingTable, Vocabulary, DEFAULT_WINDOW};
use crate::error::{Error, Result};
use crate::introspect::{export_trace, gate_statistics, null_alignment_report, StopwordList};
use crate::matcher::{Example, Model, ModelConfig, ModelVariant};
use crate::reference::{check_model_gradients, random_instance};
use crate::snli::{parse_snli, read_tsv, write_tsv, Corpus, Label, LabeledPair};
use crate::training::{evaluate, train, LogHeader, TrainConfig};

pub const VOCAB_FILE: &str = "vocab.tsv";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";
pub const OOV_FILE: &str = "oov.txt";
pub const STATS_FILE: &str = "stats.json";
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "mlstm", version, about = "Match-LSTM natural language inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the vocabulary and imputed embedding table from SNLI splits.
    Prepare(PrepareArgs),
    /// Train a model on prepared data.
    Train(TrainArgs),
    /// Accuracy and confusion matrix of a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Predict the label of one pair.
    Infer(PairArgs),
    /// Write the alignment/gate heatmap file of one pair.
    Inspect(InspectArgs),
    /// Finite-difference gradient check on a random tiny instance.
    Checkgrad(CheckgradArgs),
    /// Input/forget gate statistics over a corpus.
    GateStats(GateStatsArgs),
    /// Hypothesis tokens aligned mostly with NULL.
    NullAlign(NullAlignArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Pretrained vectors, `<token> <v1> … <vl>` per line.
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub dim: usize,
    /// Context window (odd) for imputing OOV vectors.
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub prepared: PathBuf,
    #[arg(long, default_value = "mlstm")]
    pub variant: ModelVariant,
    #[arg(long, default_value_t = 150)]
    pub d: usize,
    #[arg(long)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 30)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.95)]
    pub decay: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub adam_epsilon: f64,
    /// Global gradient-norm clipping threshold.
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub no_shuffle: bool,
    /// Separate premise and hypothesis encoder weights.
    #[arg(long)]
    pub unshared: bool,
    /// Checkpoint path for the best-dev parameters.
    #[arg(long)]
    pub out: PathBuf,
    /// Training log; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Prepared-data directory; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    pub prepared: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// SNLI `.jsonl` or `label\tpremise\thypothesis` `.tsv`.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct PairArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub premise: String,
    #[arg(long)]
    pub hypothesis: String,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub pair: PairArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckgradArgs {
    #[arg(long, default_value = "mlstm")]
    pub variant: ModelVariant,
    #[arg(long, default_value_t = 6)]
    pub d: usize,
    #[arg(long, default_value_t = 5)]
    pub l: usize,
    #[arg(long, default_value_t = 4)]
    pub m: usize,
    #[arg(long, default_value_t = 3)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
}

#[derive(Debug, Args)]
pub struct GateStatsArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Extra single-token groups, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub tokens: Vec<String>,
    /// Stop-word list; defaults to `$MLSTM_RESOURCES` or the built-in list.
    #[arg(long)]
    pub stopwords: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NullAlignArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

/// Vocabulary and frozen embedding table written by `prepare`.
pub struct Prepared {
    pub dir: PathBuf,
    pub vocab: Vocabulary,
    pub table: EmbeddingTable,
}

impl Prepared {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut vocab = Vocabulary::load(dir.join(VOCAB_FILE))?;
        vocab.load_oov(dir.join(OOV_FILE))?;
        let table = EmbeddingTable::load(&vocab, dir.join(EMBEDDINGS_FILE))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            vocab,
            table,
        })
    }

    pub fn split(&self, name: &str) -> Result<Option<Corpus>> {
        let path = self.dir.join(format!("{name}.tsv"));
        if path.exists() {
            read_tsv(path).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn examples(&self, pairs: &[LabeledPair]) -> Result<Vec<Example>> {
        pairs.iter().map(|p| Example::from_pair(p, &self.vocab)).collect()
    }
}

/// Reads a corpus as SNLI records, or as TSV when the extension is `.tsv`.
pub fn read_corpus(path: &Path) -> Result<Corpus> {
    if path.extension().is_some_and(|e| e == "tsv") {
        read_tsv(path)
    } else {
        parse_snli(path)
    }
}

#[derive(Serialize)]
struct SplitStats {
    source: String,
    kept: usize,
    dropped: usize,
}

#[derive(Serialize)]
struct PrepareStats {
    splits: std::collections::BTreeMap<String, SplitStats>,
    vocab_size: usize,
    oov: usize,
    embedding_dim: usize,
    window: usize,
    embedding_sha256: String,
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::InvalidInput(e.to_string()))
}

pub fn prepare(args: &PrepareArgs, out: &mut dyn Write) -> Result<()> {
    let mut splits = vec![("train", read_corpus(&args.train)?)];
    if let Some(p) = &args.dev {
        splits.push(("dev", read_corpus(p)?));
    }
    if let Some(p) = &args.test {
        splits.push(("test", read_corpus(p)?));
    }
    let all: Vec<LabeledPair> = splits.iter().flat_map(|(_, c)| c.pairs.iter().cloned()).collect();
    let mut vocab = build_vocab(&all)?;
    let raw = load_pretrained(&args.embeddings, &mut vocab, args.dim)?;
    let table = impute_oov(&raw, &vocab, &all, args.window)?;

    fs::create_dir_all(&args.out)?;
    vocab.save(args.out.join(VOCAB_FILE))?;
    vocab.save_oov(args.out.join(OOV_FILE))?;
    table.save(&vocab, args.out.join(EMBEDDINGS_FILE))?;
    let mut stats = PrepareStats {
        splits: Default::default(),
        vocab_size: vocab.len(),
        oov: vocab.oov().len(),
        embedding_dim: args.dim,
        window: args.window,
        embedding_sha256: table.checksum(),
    };
    for (name, corpus) in &splits {
        write_tsv(corpus, args.out.join(format!("{name}.tsv")))?;
        writeln!(out, "{name}: {} kept, {} dropped", corpus.kept, corpus.dropped)?;
        stats.splits.insert(
            name.to_string(),
            SplitStats {
                source: corpus.source.display().to_string(),
                kept: corpus.kept,
                dropped: corpus.dropped,
            },
        );
    }
    fs::write(args.out.join(STATS_FILE), json(&stats)? + "\n")?;
    writeln!(out, "vocabulary: {} tokens, {} without pretrained vectors", vocab.len(), vocab.oov().len())?;
    Ok(())
}

pub fn train_cmd(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let prepared = Prepared::load(&args.prepared)?;
    let train_pairs = prepared
        .split("train")?
        .ok_or_else(|| Error::InvalidInput(format!("no train.tsv in {}", args.prepared.display())))?;
    let dev_pairs = prepared.split("dev")?.unwrap_or_default();
    let train_set = prepared.examples(&train_pairs.pairs)?;
    let dev_set = prepared.examples(&dev_pairs.pairs)?;

    let config = ModelConfig {
        shared_encoder: !args.unshared,
        ..ModelConfig::new(args.variant, args.d, prepared.table.dim())
    };
    let tc = TrainConfig {
        lr0: args.lr,
        beta1: args.beta1,
        beta2: args.beta2,
        adam_epsilon: args.adam_epsilon,
        decay: args.decay,
        batch_size: args.batch_size,
        epochs: args.epochs,
        seed: args.seed,
        shuffle: !args.no_shuffle,
        clip: args.clip,
    };
    tc.validate()?;
    let mut model = Model::new(config, args.seed)?;

    let log_path = args.log.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path)?);
    let mut header = serde_json::to_value(LogHeader::new(&config, model.count_parameters(), &tc))
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    header["record"] = "config".into();
    writeln!(log, "{}", json(&header)?)?;
    log.flush()?;
    writeln!(out, "{} parameters (embeddings excluded)", model.count_parameters())?;

    let outcome = train(&mut model, &prepared.table, &train_set, &dev_set, &tc, |rec| {
        writeln!(log, "{}", json(rec)?)?;
        log.flush()?;
        let dev = rec.dev_acc.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
        writeln!(out, "epoch {} lr {:.6} loss {:.6} train {:.4} dev {dev}", rec.epoch, rec.lr, rec.train_loss, rec.train_acc)?;
        Ok(())
    })?;

    let checkpoint = Checkpoint {
        config,
        seed: args.seed,
        init: crate::training::INIT_SCHEME.into(),
        prepared: Some(fs::canonicalize(&args.prepared)?.display().to_string()),
        embedding_checksum: Some(prepared.table.checksum()),
        epoch: Some(outcome.best_epoch),
        store: outcome.best,
    };
    checkpoint.save(&args.out)?;
    writeln!(out, "saved epoch {} to {}", outcome.best_epoch, args.out.display())?;
    Ok(())
}

/// Loads a checkpoint and its prepared data, refusing an embedding table
/// whose checksum differs from the one recorded at training time.
pub fn load_model(args: &ModelArgs) -> Result<(Model, Prepared)> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let dir = match (&args.prepared, &ck.prepared) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => return Err(Error::InvalidInput("checkpoint records no prepared directory; pass --prepared".into())),
    };
    let prepared = Prepared::load(&dir)?;
    if let Some(sum) = &ck.embedding_checksum {
        if *sum != prepared.table.checksum() {
            return Err(Error::Incompatible(format!(
                "embedding table in {} does not match the one the checkpoint was trained with",
                dir.display()
            )));
        }
    }
    if prepared.table.dim() != ck.config.embed_dim {
        return Err(Error::Incompatible(format!(
            "checkpoint expects {}-dimensional embeddings, {} has {}",
            ck.config.embed_dim,
            dir.display(),
            prepared.table.dim()
        )));
    }
    Ok((ck.into_model()?, prepared))
}

pub fn eval_cmd(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let (model, prepared) = load_model(&args.model)?;
    let corpus = read_corpus(&args.data)?;
    let ev = evaluate(&model, &prepared.table, &prepared.examples(&corpus.pairs)?)?;
    writeln!(
        out,
        "accuracy {:.4} ({}/{})",
        ev.accuracy(),
        ev.confusion.correct(),
        ev.confusion.total()
    )?;
    write!(out, "{}", ev.confusion.render())?;
    Ok(())
}

fn pair_from(args: &PairArgs) -> Result<LabeledPair> {
    // The label is unused at inference.
    LabeledPair::from_text(&args.premise, &args.hypothesis, Label::Neutral)
}

pub fn infer_cmd(args: &PairArgs, out: &mut dyn Write) -> Result<()> {
    let (model, prepared) = load_model(&args.model)?;
    let (probs, _) = model.forward_pair(&prepared.vocab, &prepared.table, &pair_from(args)?)?;
    let label = Label::from_index(crate::matcher::argmax(probs.data()))?;
    writeln!(out, "{}", label.as_str())?;
    for l in Label::ALL {
        writeln!(out, "{}\t{}", l.as_str(), probs.get(l.index()))?;
    }
    Ok(())
}

pub fn inspect_cmd(args: &InspectArgs, out: &mut dyn Write) -> Result<()> {
    let (model, prepared) = load_model(&args.pair.model)?;
    let pair = pair_from(&args.pair)?;
    let heat = export_trace(&model, &prepared.vocab, &prepared.table, &pair, &args.out)?;
    writeln!(out, "wrote {}x{} alignment to {}", heat.rows.len(), heat.columns.len(), args.out.display())?;
    Ok(())
}

/// Returns whether every parameter passed.
pub fn checkgrad_cmd(args: &CheckgradArgs, out: &mut dyn Write) -> Result<bool> {
    let config = ModelConfig::new(args.variant, args.d, args.l);
    let (model, table, example) = random_instance(config, args.seed, args.m, args.n)?;
    let report = check_model_gradients(&model, &table, &example, args.epsilon)?;
    for p in &report.params {
        writeln!(out, "{}\t{:e}", p.name, p.max_rel_err)?;
    }
    let worst = report.max_rel_err();
    let pass = worst <= GRADCHECK_TOLERANCE;
    writeln!(out, "max relative error {worst:e} ({})", if pass { "ok" } else { "FAILED" })?;
    Ok(pass)
}

pub fn gate_stats_cmd(args: &GateStatsArgs, out: &mut dyn Write) -> Result<()> {
    let (model, prepared) = load_model(&args.model)?;
    let corpus = read_corpus(&args.data)?;
    let stopwords = match &args.stopwords {
        Some(p) => StopwordList::load(p)?,
        None => StopwordList::from_env()?,
    };
    let report = gate_statistics(&model, &prepared.vocab, &prepared.table, &corpus.pairs, &stopwords, &args.tokens)?;
    let text = report.to_json_lines(&stopwords)?;
    match &args.out {
        Some(p) => fs::write(p, text)?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

pub fn null_align_cmd(args: &NullAlignArgs, out: &mut dyn Write) -> Result<()> {
    let (model, prepared) = load_model(&args.model)?;
    let corpus = read_corpus(&args.data)?;
    for r in null_alignment_report(&model, &prepared.vocab, &prepared.table, &corpus.pairs, args.threshold)? {
        writeln!(out, "{}", json(&r)?)?;
    }
    Ok(())
}

/// Runs one command. `Ok(false)` means the command ran but its check
/// failed.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<bool> {
    match &cli.command {
        Command::Prepare(a) => prepare(a, out)?,
        Command::Train(a) => train_cmd(a, out)?,
        Command::Eval(a) => eval_cmd(a, out)?,
        Command::Infer(a) => infer_cmd(a, out)?,
        Command::Inspect(a) => inspect_cmd(a, out)?,
        Command::Checkgrad(a) => return checkgrad_cmd(a, out),
        Command::GateStats(a) => gate_stats_cmd(a, out)?,
        Command::NullAlign(a) => null_align_cmd(a, out)?,
    }
    Ok(true)
}
