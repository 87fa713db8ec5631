//! File formats, configuration and the end-to-end commands built on the
//! library: indexing, re-ranking, training, benchmarking.

pub mod commands;
pub mod config;
pub mod metrics;
pub mod synth;
pub mod text;

pub use commands::{
    cmd_bench, cmd_estimate, cmd_index, cmd_pretrain_compressor, cmd_rerank, cmd_synth, cmd_train, write_run,
    EstimateReport, IndexReport, PretrainReport, RerankRequest, TrainReport,
};
pub use config::{Overrides, RunConfig};
pub use metrics::{evaluate_run, ndcg_at_k, precision_at_k, RunMetrics};
pub use synth::{generate, judged_queries, qrels_map, text_pairs, SynthCollection, SynthConfig};
pub use text::{read_corpus, read_qrels, read_queries, read_run, tokenize, Corpus, CorpusDoc, Qrels, RunEntry};
