use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use semmatch::config::RunConfig;
use semmatch::data::{gen_synthetic, read_log, read_pairs, CATALOG_FILE, EVAL_LOG_FILE, TRAIN_LOG_FILE};
use semmatch::eval::{eval_queries, matching_corpus, run_matching_eval, run_ranking_eval, MetricReport};
use semmatch::index::{build_index, ProductIndex, Retriever};
use semmatch::pipeline::log_vocabulary;
use semmatch::rng;
use semmatch::shard::{simulate, Exchange, ShardPlan};
use semmatch::tokenizer::encode;
use semmatch::training::{preprocess_logs, save_records, train, RecordStore, TrainData};
use semmatch::{EmbeddingModel, Error, Side, TokenBag, Vocabulary};

/// Semantic product matching: data generation, training, retrieval and
/// evaluation.
#[derive(Parser)]
#[command(name = "semmatch", version)]
struct Cli {
    /// Run configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set model.dim=64`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic catalog, logs and ground truth.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a vocabulary from a training log.
    BuildVocab {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode a log into a fixed-width record file.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        /// Directory holding the catalog and training log.
        #[arg(long)]
        data: PathBuf,
        /// Vocabulary file; built from the training log and written next to
        /// the checkpoint when absent.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Preprocessed record file; the training log is encoded when absent.
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed a catalog into an index file.
    EmbedProducts {
        #[command(flatten)]
        model: ModelArgs,
        /// Catalog file of `id<TAB>text` lines.
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieve the top products for one query.
    Query {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, allow_negative_numbers = true)]
        threshold: Option<f64>,
    },
    /// Evaluate a checkpoint on the eval log of a data directory.
    Evaluate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Task::All)]
        task: Task,
        #[arg(long)]
        k: Option<usize>,
        /// Output file of `metric = value` lines.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Compare sharded and direct cosine on random pairs.
    ShardCheck {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Vocabulary file, `vocab.txt` next to the checkpoint by default.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Task {
    Matching,
    Ranking,
    All,
}

const VOCAB_FILE: &str = "vocab.txt";

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Io(_) | Error::IoPath { .. } => "io",
        Error::NoData(_) => "no_data",
        Error::Config(_) => "config",
        Error::IdOutOfBounds { .. } => "id_out_of_bounds",
        Error::BatchTooSmall(_) => "batch_too_small",
        Error::ShapeMismatch(_) => "shape_mismatch",
        Error::UnevenShards { .. } => "uneven_shards",
        Error::Unsupported(_) => "unsupported",
        Error::Format(_) => "format",
        Error::DuplicateProduct(_) => "duplicate_product",
        Error::TooManyMalformed { .. } => "too_many_malformed",
        Error::NonFiniteLoss { .. } => "non_finite_loss",
    }
}

fn log(msg: impl AsRef<str>) {
    eprintln!("[semmatch] {}", msg.as_ref());
}

fn load_config(cli: &Cli) -> semmatch::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for pair in &cli.overrides {
        cfg.set_pair(pair)?;
    }
    cfg.validate()?;
    for (k, v) in cfg.resolved() {
        log(format!("config {k} = {v}"));
    }
    Ok(cfg)
}

fn read_vocab(path: &Path) -> semmatch::Result<Vocabulary> {
    let f = File::open(path).map_err(|source| Error::IoPath {
        path: path.to_path_buf(),
        source,
    })?;
    Vocabulary::read_from(BufReader::new(f))
}

fn write_vocab(vocab: &Vocabulary, path: &Path) -> semmatch::Result<()> {
    let f = File::create(path).map_err(|source| Error::IoPath {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = BufWriter::new(f);
    vocab.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> semmatch::Result<()> {
    std::fs::write(path, text).map_err(|source| Error::IoPath {
        path: path.to_path_buf(),
        source,
    })
}

fn ensure_parent(path: &Path) -> semmatch::Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|source| Error::IoPath {
            path: dir.to_path_buf(),
            source,
        }),
        _ => Ok(()),
    }
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn load_model(args: &ModelArgs) -> semmatch::Result<(EmbeddingModel, Vocabulary)> {
    let model = EmbeddingModel::load(&args.model)?;
    let vocab_path = args.vocab.clone().unwrap_or_else(|| sibling(&args.model, VOCAB_FILE));
    let vocab = read_vocab(&vocab_path)?;
    if vocab.rows() != model.rows() {
        return Err(Error::ShapeMismatch(format!(
            "vocabulary has {} rows, checkpoint has {}",
            vocab.rows(),
            model.rows()
        )));
    }
    Ok((model, vocab))
}

fn run(cli: Cli) -> semmatch::Result<()> {
    let cfg = load_config(&cli)?;
    let tok = &cfg.tokenizer;
    let out = match &cli.command {
        Command::BuildVocab { out, .. }
        | Command::Preprocess { out, .. }
        | Command::Train { out, .. }
        | Command::EmbedProducts { out, .. } => Some(out.clone()),
        Command::Evaluate { metrics, .. } => metrics.clone(),
        _ => None,
    };
    if let Some(out) = out {
        ensure_parent(&out)?;
    }
    match cli.command {
        Command::GenSynthetic { out } => {
            let data = gen_synthetic(&cfg.synth_config())?;
            data.write_dir(&out)?;
            log(format!(
                "wrote {} products, {} train rows, {} eval rows to {}",
                data.catalog.len(),
                data.train_log.len(),
                data.eval_log.len(),
                out.display()
            ));
        }
        Command::BuildVocab { input, out } => {
            let (rows, stats) = read_log(&input)?;
            let vocab = log_vocabulary(&rows, tok)?;
            write_vocab(&vocab, &out)?;
            log(format!(
                "{} lines ({} malformed), V = {}, B = {}",
                stats.lines,
                stats.malformed,
                vocab.size(),
                vocab.oov_bins()
            ));
        }
        Command::Preprocess { input, vocab, out } => {
            let vocab = read_vocab(&vocab)?;
            let (rows, _) = read_log(&input)?;
            let (records, stats) = preprocess_logs(rows, &vocab, tok)?;
            save_records(&out, vocab.query_max_tokens, vocab.product_max_tokens, &records)?;
            log(format!("{} rows grouped into {} records", stats.rows, stats.records));
        }
        Command::Train {
            data,
            vocab,
            records,
            out,
        } => {
            let catalog = read_pairs(data.join(CATALOG_FILE))?;
            let vocab = match vocab {
                Some(p) => read_vocab(&p)?,
                None => {
                    let (rows, _) = read_log(data.join(TRAIN_LOG_FILE))?;
                    let v = log_vocabulary(&rows, tok)?;
                    write_vocab(&v, &sibling(&out, VOCAB_FILE))?;
                    v
                }
            };
            let records = match records {
                Some(p) => RecordStore::open(p)?.to_vec()?,
                None => {
                    let (rows, _) = read_log(data.join(TRAIN_LOG_FILE))?;
                    preprocess_logs(rows, &vocab, tok)?.0
                }
            };
            let bags: Vec<TokenBag> = catalog.iter().map(|(_, t)| encode(t, Side::Product, &vocab, tok)).collect();
            let train_data = TrainData::new(records, bags)?;
            let train_cfg = cfg.train_config();
            let mut init = rng::derive(train_cfg.seed, "model-init");
            let mut model = EmbeddingModel::new(cfg.model, vocab.size(), vocab.oov_bins(), &mut init)?;
            let history = train(&mut model, &train_data, &cfg.loss, &train_cfg)?;
            for (epoch, loss) in history.epoch_loss.iter().enumerate() {
                log(format!("epoch {} loss {loss:.6}", epoch + 1));
            }
            model.save(&out)?;
            log(format!(
                "wrote {} ({} parameters, fingerprint {:016x})",
                out.display(),
                model.parameter_count(),
                model.fingerprint()
            ));
        }
        Command::EmbedProducts { model, catalog, out } => {
            let (model, vocab) = load_model(&model)?;
            let catalog = read_pairs(&catalog)?;
            let index = build_index(catalog, &model, &vocab, tok)?;
            index.save(&out)?;
            log(format!("indexed {} products", index.len()));
        }
        Command::Query {
            model,
            index,
            text,
            k,
            threshold,
        } => {
            let (model, vocab) = load_model(&model)?;
            let index = ProductIndex::load(&index)?;
            let retriever = Retriever::new(&model, &vocab, tok, &index)?;
            let result = retriever.top_k(&text, k.unwrap_or(cfg.eval.k), threshold.unwrap_or(cfg.eval.threshold))?;
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            for (id, score) in &result.hits {
                writeln!(out, "{id}\t{score:.6}")?;
            }
        }
        Command::Evaluate {
            model,
            data,
            task,
            k,
            metrics,
        } => {
            let metrics_path = metrics.clone().unwrap_or_else(|| sibling(&model.model, "metrics.txt"));
            let (model, vocab) = load_model(&model)?;
            let catalog = read_pairs(data.join(CATALOG_FILE))?;
            let (eval_log, _) = read_log(data.join(EVAL_LOG_FILE))?;
            let queries = eval_queries(&eval_log);
            let k = k.unwrap_or(cfg.eval.k);
            let mut report = MetricReport {
                k,
                ..MetricReport::default()
            };
            if task != Task::Ranking {
                let mut corpus_rng = rng::derive(cfg.seed, "eval-corpus");
                let corpus = matching_corpus(&catalog, &queries, cfg.eval.corpus_size, &mut corpus_rng);
                let index = build_index(corpus.iter().map(|(id, t)| (id.as_str(), t.as_str())), &model, &vocab, tok)?;
                log(format!("matching over {} products", index.len()));
                report = run_matching_eval(&model, &vocab, tok, &queries, &index, k)?;
            }
            if task != Task::Matching {
                let texts: HashMap<String, String> = catalog.into_iter().collect();
                report = report.merge(run_ranking_eval(&model, &vocab, tok, &queries, &texts)?);
            }
            print!("{}", report.to_table());
            write_text(&metrics_path, &report.to_kv())?;
            log(format!("wrote {}", metrics_path.display()));
        }
        Command::ShardCheck { n, dim, pairs, seed } => {
            let seed = seed.unwrap_or(cfg.seed);
            let plan = ShardPlan::new(n, dim)?;
            let model_cfg = semmatch::ModelConfig { dim, ..cfg.model };
            let mut r = rng::derive(seed, "shard-check");
            let model = EmbeddingModel::new(model_cfg, 1000, 0, &mut r)?;
            let rows = model.rows() as u32;
            let mut bag = |len: usize| {
                use rand::Rng as _;
                let k = r.gen_range(1..=len);
                TokenBag::from_ids((0..k).map(|_| r.gen_range(1..rows)).collect(), len)
            };
            let pairs: Vec<(TokenBag, TokenBag)> = (0..pairs).map(|_| (bag(8), bag(24))).collect();
            let direct = pairs
                .iter()
                .map(|(q, p)| model.score(q, p))
                .collect::<semmatch::Result<Vec<f64>>>()?;
            for (name, exchange) in [("partials", Exchange::Partials), ("concatenate", Exchange::Concatenate)] {
                let (scores, ledger) = simulate(&plan, &pairs, &model, exchange)?;
                let dev = scores.iter().zip(&direct).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                println!(
                    "exchange = {name}\tshards = {}\tdim = {dim}\tpairs = {}\tmax_deviation = {dev:e}\tbroadcasts = {}\treplies = {}\tscalars = {}\tscalars_per_pair = {}",
                    ledger.shards,
                    ledger.pairs,
                    ledger.broadcasts,
                    ledger.replies,
                    ledger.scalars,
                    ledger.scalars_per_pair()
                );
            }
        }
    }
    Ok(())
}

#[cfg(feature = "parallel")]
fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    if workers == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

#[cfg(not(feature = "parallel"))]
fn with_workers<R: Send>(_workers: usize, f: impl FnOnce() -> R + Send) -> R {
    f()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    // Worker count lives in the config, so it is peeked before the pool starts.
    let workers = load_workers(&cli);
    match with_workers(workers, || run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error\tkind={}\tmessage={}", error_kind(&e), e.to_string().replace(['\n', '\t'], " "));
            ExitCode::from(1)
        }
    }
}

fn load_workers(cli: &Cli) -> usize {
    let mut cfg = cli
        .config
        .as_ref()
        .and_then(|p| RunConfig::load(p).ok())
        .unwrap_or_default();
    for pair in &cli.overrides {
        let _ = cfg.set_pair(pair);
    }
    cfg.workers
}
