//! The work behind each command-line subcommand, free of argument parsing
//! and printing.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::config::RunConfig;
use super::synth::{text_pairs, SynthCollection};
use super::text::{format_run, group_run, rank_scored, tokenize, write_corpus, write_qrels, write_queries, CorpusDoc, RunEntry};
use crate::bench::{run_bench, BenchCase, PhaseTimings};
use crate::compression::{pretrain_compressor, quantize_reps, Precision, PretrainOutcome};
use crate::error::{Error, Result};
use crate::model::{CompressorWeights, Model};
use crate::split::{encode_query, join_and_score, precompute_doc, score_stored, to_stored};
use crate::store::{estimate_storage, MissingDocPolicy, StoreHeader, StoreReader, StoreSummary, StoreWriter};
use crate::train::{train, JudgedQuery, TrainOutcome, ValidationReport};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IndexReport {
    pub docs_indexed: usize,
    /// Documents whose text produced no tokens.
    pub skipped_empty: usize,
    /// Stored rows: document tokens after truncation plus the trailing `[SEP]`.
    pub total_tokens: u64,
    pub avg_tokens: f64,
    pub comp_dim: usize,
    pub precision: Precision,
    /// Values clamped to the half-precision range.
    pub clamped_values: usize,
    pub store: StoreSummary,
    /// `estimate_storage` at the measured document count and average length.
    pub projected_payload_bytes: f64,
    pub seconds: f64,
    pub docs_per_sec: f64,
}

const INDEX_CHUNK: usize = 256;

/// Encodes every document through the first `l` layers, compresses,
/// optionally quantizes, and writes the store. Output is identical for any
/// thread count.
pub fn cmd_index(docs: &[CorpusDoc], model: &Model, out: &Path, precision: Precision) -> Result<IndexReport> {
    let start = Instant::now();
    let vocab = model.config().vocab_size;
    let mut writer = StoreWriter::create(out, StoreHeader::for_model(model, precision)?)?;
    let (mut indexed, mut empty, mut tokens, mut clamped) = (0usize, 0usize, 0u64, 0usize);
    for chunk in docs.chunks(INDEX_CHUNK) {
        let encoded: Vec<Option<(_, usize)>> = chunk
            .par_iter()
            .map(|d| {
                let t = tokenize(&d.text, vocab);
                if t.is_empty() {
                    return Ok(None);
                }
                let stored = to_stored(&precompute_doc(&t, model)?, model)?;
                Ok(Some(match precision {
                    Precision::F32 => (stored, 0),
                    Precision::F16 => quantize_reps(&stored),
                }))
            })
            .collect::<Result<_>>()?;
        for (doc, enc) in chunk.iter().zip(encoded) {
            match enc {
                None => empty += 1,
                Some((reps, c)) => {
                    writer.append(&doc.doc_id, &reps)?;
                    indexed += 1;
                    tokens += reps.rows() as u64;
                    clamped += c;
                }
            }
        }
    }
    let store = writer.finish()?;
    let seconds = start.elapsed().as_secs_f64();
    let avg_tokens = if indexed == 0 { 0.0 } else { tokens as f64 / indexed as f64 };
    let e = model.config().stored_width();
    Ok(IndexReport {
        docs_indexed: indexed,
        skipped_empty: empty,
        total_tokens: tokens,
        avg_tokens,
        comp_dim: e,
        precision,
        clamped_values: clamped,
        store,
        projected_payload_bytes: estimate_storage(indexed as f64, avg_tokens, e as f64, precision.bytes_per_value() as f64),
        seconds,
        docs_per_sec: if seconds > 0.0 { indexed as f64 / seconds } else { 0.0 },
    })
}

pub struct RerankRequest<'a> {
    pub queries: &'a [(String, String)],
    pub candidates: &'a [RunEntry],
    pub k: usize,
    pub tag: &'a str,
    pub cls_only_last: bool,
    pub missing: MissingDocPolicy,
    /// Source text for on-the-fly encoding of documents missing from the
    /// store.
    pub corpus: Option<&'a [CorpusDoc]>,
}

/// Re-scores the top `k` candidates of every query in the run, in the
/// order queries first appear, and ranks them by score (ties by doc id).
pub fn cmd_rerank(store: &StoreReader, model: &Model, req: &RerankRequest) -> Result<Vec<RunEntry>> {
    store.check_model(model)?;
    if req.k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    let vocab = model.config().vocab_size;
    let texts: HashMap<&str, &str> = req.queries.iter().map(|(q, t)| (q.as_str(), t.as_str())).collect();
    let corpus: HashMap<&str, &str> = req
        .corpus
        .unwrap_or_default()
        .iter()
        .map(|d| (d.doc_id.as_str(), d.text.as_str()))
        .collect();
    let mut out = Vec::new();
    for (qid, cands) in group_run(req.candidates) {
        let text = texts
            .get(qid.as_str())
            .ok_or_else(|| Error::NotFound(format!("query {qid:?} is not in the query file")))?;
        let qr = encode_query(&tokenize(text, vocab), model)?;
        let top = &cands[..cands.len().min(req.k)];
        let scored: Vec<(String, f32)> = top
            .par_iter()
            .map(|e| {
                let score = match store.read_doc(&e.doc_id) {
                    Ok(reps) => score_stored(&qr, &reps, model, req.cls_only_last)?,
                    Err(Error::NotFound(msg)) => match req.missing {
                        MissingDocPolicy::Error => return Err(Error::NotFound(msg)),
                        MissingDocPolicy::Encode => {
                            let t = corpus
                                .get(e.doc_id.as_str())
                                .ok_or_else(|| Error::NotFound(format!("{msg}, and no text is available to encode it")))?;
                            join_and_score(&qr, &precompute_doc(&tokenize(t, vocab), model)?, model, req.cls_only_last)?
                        }
                    },
                    Err(other) => return Err(other),
                };
                Ok((e.doc_id.clone(), score))
            })
            .collect::<Result<_>>()?;
        out.extend(rank_scored(&qid, scored, req.tag));
    }
    Ok(out)
}

pub fn write_run(entries: &[RunEntry], path: &Path) -> Result<()> {
    std::fs::write(path, format_run(entries))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub train_queries: usize,
    pub validation_queries: usize,
    pub steps: usize,
    pub best_step: usize,
    pub best: ValidationReport,
    pub initial: ValidationReport,
    pub fingerprint: String,
}

/// Splits judged queries into training and validation (the last
/// `validation_fraction`, at least one) and trains.
pub fn cmd_train(
    cfg: &RunConfig,
    model: Model,
    judged: &[JudgedQuery],
    log: Option<&mut dyn Write>,
) -> Result<(TrainOutcome, TrainReport)> {
    if judged.len() < 2 {
        return Err(Error::invalid("training needs at least two judged queries"));
    }
    let n_val = ((judged.len() as f64 * cfg.validation_fraction).ceil() as usize).clamp(1, judged.len() - 1);
    let (tr, val) = judged.split_at(judged.len() - n_val);
    let outcome = train(model, tr, val, &cfg.train, log)?;
    let report = TrainReport {
        train_queries: tr.len(),
        validation_queries: val.len(),
        steps: outcome.log.len(),
        best_step: outcome.best_step,
        best: outcome.best_report,
        initial: outcome.reports[0].1,
        fingerprint: outcome.best.fingerprint_hex(),
    };
    Ok((outcome, report))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainReport {
    pub train_pairs: usize,
    pub held_out_pairs: usize,
    pub pairs_seen: usize,
    pub steps: usize,
    pub initial_held_out: f64,
    pub best_held_out: f64,
    pub fingerprint: String,
}

/// Builds heading/paragraph pairs from the corpus, holds out the last
/// tenth, and pre-trains the compressor. A model without a compressor gets
/// a freshly initialized one of width `cfg.model.comp_dim`.
pub fn cmd_pretrain_compressor(cfg: &RunConfig, model: Model, docs: &[CorpusDoc]) -> Result<(Model, PretrainOutcome, PretrainReport)> {
    let model = if model.weights().compressor.is_some() {
        model
    } else {
        let e = cfg
            .model
            .comp_dim
            .ok_or_else(|| Error::Config("no compressor width configured (comp_dim)".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        model.with_compressor(Some(CompressorWeights::init(model.config().d_model, e, &mut rng)))?
    };
    let pairs = text_pairs(docs, model.config().vocab_size, cfg.seed);
    if pairs.len() < 2 {
        return Err(Error::invalid("need at least two heading/paragraph pairs"));
    }
    let n_held = (pairs.len() / 10).max(1);
    let (tr, held) = pairs.split_at(pairs.len() - n_held);
    let outcome = pretrain_compressor(&model, tr, held, &cfg.pretrain)?;
    let trained = model.with_compressor(Some(outcome.compressor.clone()))?;
    let report = PretrainReport {
        train_pairs: tr.len(),
        held_out_pairs: held.len(),
        pairs_seen: outcome.pairs_seen,
        steps: outcome.step_losses.len(),
        initial_held_out: outcome.initial_held_out(),
        best_held_out: outcome.best_held_out(),
        fingerprint: trained.fingerprint_hex(),
    };
    Ok((trained, outcome, report))
}

/// Times the unsplit model and the split path at every configured layer on
/// the same weights.
pub fn cmd_bench(cfg: &RunConfig, model: &Model, queries: &[Vec<u32>], docs: &[Vec<u32>]) -> Result<Vec<PhaseTimings>> {
    let n = model.config().n_layers;
    let layers: Vec<usize> = if cfg.bench.layers.is_empty() {
        (0..n).collect()
    } else {
        cfg.bench.layers.clone()
    };
    let docs = &docs[..docs.len().min(cfg.bench.docs_per_query)];
    let cases = layers
        .iter()
        .map(|&l| BenchCase::prepare(model.with_split_layer(l)?, docs, cfg.index.precision))
        .collect::<Result<Vec<_>>>()?;
    run_bench(&model.with_split_layer(0)?, &cases, queries, docs, &cfg.bench.timing())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EstimateReport {
    pub doc_count: f64,
    pub avg_tokens: f64,
    pub comp_dim: usize,
    pub bytes_per_value: usize,
    pub bytes: f64,
    pub terabytes: f64,
    pub gigabytes: f64,
}

/// Payload size of a collection, in bytes and decimal units.
pub fn cmd_estimate(doc_count: f64, avg_tokens: f64, comp_dim: usize, precision: Precision) -> Result<EstimateReport> {
    if !(doc_count > 0.0 && avg_tokens > 0.0 && comp_dim > 0) {
        return Err(Error::invalid("document count, average tokens and width must be positive"));
    }
    let bpv = precision.bytes_per_value();
    let bytes = estimate_storage(doc_count, avg_tokens, comp_dim as f64, bpv as f64);
    Ok(EstimateReport {
        doc_count,
        avg_tokens,
        comp_dim,
        bytes_per_value: bpv,
        bytes,
        terabytes: bytes / 1e12,
        gigabytes: bytes / 1e9,
    })
}

/// Writes `corpus.jsonl`, `queries.tsv`, `qrels.txt` and `candidates.run`.
pub fn cmd_synth(data: &SynthCollection, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_corpus(&data.docs, std::io::BufWriter::new(std::fs::File::create(dir.join("corpus.jsonl"))?))?;
    write_queries(&data.queries, std::fs::File::create(dir.join("queries.tsv"))?)?;
    write_qrels(&data.qrels, std::fs::File::create(dir.join("qrels.txt"))?)?;
    write_run(&data.candidates, &dir.join("candidates.run"))
}
