//! `prettr`: index, re-rank, train and benchmark from the command line.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use prettr::compression::Precision;
use prettr::model::checkpoint::{load_checkpoint, save_checkpoint};
use prettr::model::Model;
use prettr::pipeline::{
    cmd_bench, cmd_estimate, cmd_index, cmd_pretrain_compressor, cmd_rerank, cmd_synth, cmd_train, evaluate_run,
    generate, judged_queries, read_corpus, read_qrels, read_queries, read_run, tokenize, write_run, Overrides,
    RerankRequest, RunConfig,
};
use prettr::bench::report_table;
use prettr::store::{implied_avg_tokens, MissingDocPolicy, StoreReader};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "prettr", version, about = "Re-ranking with precomputed document representations")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    split_layer: Option<usize>,
    /// Stored width; 0 disables the compressor.
    #[arg(long, global = true)]
    comp_dim: Option<usize>,
    /// f32 or f16.
    #[arg(long, global = true)]
    precision: Option<Precision>,
    #[arg(long, global = true)]
    cls_only_last: Option<bool>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic collection with a known answer.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Precompute, compress and store document representations.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also project the payload size of a collection this large.
        #[arg(long)]
        collection_docs: Option<f64>,
    },
    /// Re-score the top candidates of a first-stage run.
    Rerank {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        /// Six-column candidate run.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        /// `error` or `encode`; encoding needs --corpus.
        #[arg(long)]
        missing: Option<String>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Judgments to evaluate the output run against.
        #[arg(long)]
        qrels: Option<PathBuf>,
    },
    /// Pre-train the compressor on heading/paragraph pairs.
    PretrainCompressor {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fine-tune on judged candidates with the pairwise loss.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// JSON lines training log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Time the split path at each layer against the unsplit model.
    Bench {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Storage for a collection, or the average length a size implies.
    Estimate {
        #[arg(long)]
        docs: f64,
        #[arg(long, conflicts_with = "bytes", required_unless_present = "bytes")]
        avg_tokens: Option<f64>,
        /// Total payload bytes; prints the implied tokens per document.
        #[arg(long)]
        bytes: Option<f64>,
        /// Value width, defaulting to the configured stored width.
        #[arg(long)]
        width: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": format!("{e:#}") });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}

fn overrides(g: &Global) -> Overrides {
    Overrides {
        seed: g.seed,
        threads: g.threads,
        split_layer: g.split_layer,
        comp_dim: g.comp_dim,
        precision: g.precision,
        cls_only_last: g.cls_only_last,
    }
}

fn run(cli: Cli) -> Result<()> {
    let o = overrides(&cli.global);
    let base = match &cli.global.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    let mut cfg = base.resolve(&o)?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global()?;
    }
    match cli.command {
        Command::Synth { out } => {
            announce(&cfg);
            let data = generate(&cfg.synth);
            cmd_synth(&data, &out)?;
            report(&serde_json::json!({
                "docs": data.docs.len(),
                "queries": data.queries.len(),
                "candidates": data.candidates.len(),
                "out": out,
            }))
        }
        Command::Index { corpus, out, checkpoint, collection_docs } => {
            let model = model_for(&mut cfg, checkpoint.as_deref(), &o)?;
            announce(&cfg);
            let corpus = load_corpus(&corpus)?;
            let mut r = serde_json::to_value(cmd_index(&corpus.docs, &model, &out, cfg.index.precision)?)?;
            r["skipped_malformed"] = corpus.skipped.into();
            if let Some(n) = collection_docs {
                let avg = r["avg_tokens"].as_f64().unwrap_or(0.0);
                let e = cmd_estimate(n, avg, model.config().stored_width(), cfg.index.precision)?;
                r["collection_estimate"] = serde_json::to_value(e)?;
            }
            report(&r)
        }
        Command::Rerank { store, queries, run, out, checkpoint, k, missing, corpus, qrels } => {
            let model = model_for(&mut cfg, checkpoint.as_deref(), &o)?;
            if let Some(k) = k {
                cfg.rerank.k = k;
            }
            if let Some(m) = missing {
                cfg.index.missing = match m.as_str() {
                    "error" => MissingDocPolicy::Error,
                    "encode" => MissingDocPolicy::Encode,
                    other => bail!("unknown missing-document policy {other:?}, expected error or encode"),
                };
            }
            announce(&cfg);
            let store = StoreReader::open(&store).with_context(|| format!("opening {}", store.display()))?;
            let queries = read_queries(open(&queries)?)?;
            let candidates = read_run(open(&run)?)?;
            let docs = corpus.as_deref().map(load_corpus).transpose()?;
            let req = RerankRequest {
                queries: &queries,
                candidates: &candidates,
                k: cfg.rerank.k,
                tag: &cfg.rerank.tag,
                cls_only_last: cfg.rerank.cls_only_last,
                missing: cfg.index.missing,
                corpus: docs.as_ref().map(|c| c.docs.as_slice()),
            };
            let ranked = cmd_rerank(&store, &model, &req)?;
            write_run(&ranked, &out)?;
            let mut r = serde_json::json!({ "entries": ranked.len(), "out": out });
            if let Some(q) = qrels {
                let qrels = read_qrels(open(&q)?)?;
                r["input"] = serde_json::to_value(evaluate_run(&candidates, &qrels, 10))?;
                r["reranked"] = serde_json::to_value(evaluate_run(&ranked, &qrels, 10))?;
            }
            report(&r)
        }
        Command::PretrainCompressor { corpus, out, checkpoint } => {
            let model = model_for(&mut cfg, checkpoint.as_deref(), &o)?;
            announce(&cfg);
            let corpus = load_corpus(&corpus)?;
            let (trained, _, r) = cmd_pretrain_compressor(&cfg, model, &corpus.docs)?;
            save_checkpoint(&trained, &out)?;
            report(&r)
        }
        Command::Train { corpus, queries, qrels, run, out, checkpoint, log } => {
            let model = model_for(&mut cfg, checkpoint.as_deref(), &o)?;
            announce(&cfg);
            let corpus = load_corpus(&corpus)?;
            let queries = read_queries(open(&queries)?)?;
            let qrels = read_qrels(open(&qrels)?)?;
            let candidates = read_run(open(&run)?)?;
            let judged = judged_queries(&queries, &candidates, &qrels, &corpus.docs, model.config().vocab_size);
            let mut sink = log.as_ref().map(File::create).transpose()?.map(BufWriter::new);
            let (outcome, r) = cmd_train(&cfg, model, &judged, sink.as_mut().map(|w| w as &mut dyn Write))?;
            if let Some(mut w) = sink {
                w.flush()?;
            }
            save_checkpoint(&outcome.best, &out)?;
            report(&r)
        }
        Command::Bench { corpus, queries, checkpoint, csv } => {
            let model = model_for(&mut cfg, checkpoint.as_deref(), &o)?;
            announce(&cfg);
            let vocab = model.config().vocab_size;
            let docs: Vec<Vec<u32>> = load_corpus(&corpus)?
                .docs
                .iter()
                .map(|d| tokenize(&d.text, vocab))
                .filter(|t| !t.is_empty())
                .collect();
            let queries: Vec<Vec<u32>> = read_queries(open(&queries)?)?
                .iter()
                .take(cfg.bench.queries)
                .map(|(_, t)| tokenize(t, vocab))
                .collect();
            let rows = cmd_bench(&cfg, &model, &queries, &docs)?;
            let (text, table) = report_table(&rows)?;
            eprint!("{text}");
            if let Some(p) = csv {
                std::fs::write(&p, table)?;
            }
            report(&rows)
        }
        Command::Estimate { docs, avg_tokens, bytes, width } => {
            announce(&cfg);
            let e = width.unwrap_or_else(|| cfg.model.stored_width());
            let p = cfg.index.precision;
            let avg = match (avg_tokens, bytes) {
                (Some(a), _) => a,
                (None, Some(b)) => implied_avg_tokens(b, docs, e as f64, p.bytes_per_value() as f64),
                (None, None) => bail!("give --avg-tokens or --bytes"),
            };
            report(&cmd_estimate(docs, avg, e, p)?)
        }
    }
}

/// Loads the checkpoint, or initializes from the configuration. A
/// checkpoint's architecture wins over the file; only the split layer may
/// be overridden.
fn model_for(cfg: &mut RunConfig, checkpoint: Option<&Path>, o: &Overrides) -> Result<Model> {
    let Some(path) = checkpoint else {
        return Ok(Model::init(cfg.model.clone(), cfg.seed)?);
    };
    let mut model = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(l) = o.split_layer {
        model = model.with_split_layer(l)?;
    }
    let have = model.config().comp_dim;
    let pending = match (o.comp_dim.filter(|&e| e > 0), have) {
        (Some(e), Some(h)) if e != h => bail!("checkpoint compressor width is {h}; --comp-dim {e} cannot change it"),
        (Some(e), None) => Some(e),
        _ => None,
    };
    cfg.model = model.config().clone();
    if pending.is_some() {
        cfg.model.comp_dim = pending;
    }
    Ok(model)
}

fn announce(cfg: &RunConfig) {
    eprintln!("# seed {}\n{}", cfg.seed, cfg.to_toml());
}

fn report<T: Serialize + ?Sized>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn load_corpus(path: &Path) -> Result<prettr::pipeline::Corpus> {
    Ok(read_corpus(open(path)?)?)
}
