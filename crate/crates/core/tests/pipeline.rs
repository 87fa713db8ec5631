//! The command layer: indexing, re-ranking, training and reporting.

mod common;

use prettr::bench::parse_report_csv;
use prettr::compression::Precision;
use prettr::model::{Model, ModelConfig};
use prettr::pipeline::{
    cmd_bench, cmd_estimate, cmd_index, cmd_rerank, cmd_train, generate, judged_queries, qrels_map, read_run,
    tokenize, write_run, CorpusDoc, Overrides, RerankRequest, RunConfig, RunEntry, SynthConfig,
};
use prettr::split::{encode_query, join_and_score, precompute_doc};
use prettr::store::{estimate_storage, MissingDocPolicy, StoreReader};
use prettr::Error;

use common::noisy_model;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.synth = SynthConfig {
        queries: 6,
        candidates_per_query: 8,
        relevant_per_query: 2,
        ..SynthConfig::default()
    };
    cfg.resolve(&Overrides::default()).unwrap()
}

fn request<'a>(queries: &'a [(String, String)], run: &'a [RunEntry], k: usize) -> RerankRequest<'a> {
    RerankRequest {
        queries,
        candidates: run,
        k,
        tag: "t",
        cls_only_last: true,
        missing: MissingDocPolicy::Error,
        corpus: None,
    }
}

#[test]
fn indexing_is_deterministic_across_thread_counts() {
    let cfg = small_config();
    let data = generate(&cfg.synth);
    let model = noisy_model(cfg.model.clone(), 1, 0.1);
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for threads in [1, 4, 1] {
        let path = dir.path().join(format!("s{}.bin", files.len()));
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| cmd_index(&data.docs, &model, &path, Precision::F16)).unwrap();
        files.push(std::fs::read(&path).unwrap());
    }
    assert!(files.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn empty_corpus_gives_an_empty_store() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::init(ModelConfig::default(), 0).unwrap();
    let path = dir.path().join("e.bin");
    let r = cmd_index(&[], &model, &path, Precision::F16).unwrap();
    assert_eq!(r.docs_indexed, 0);
    assert_eq!(r.projected_payload_bytes, 0.0);
    assert!(StoreReader::open_for_model(&path, &model).unwrap().ids().is_empty());
}

#[test]
fn projected_size_is_the_estimate_at_measured_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        n_layers: 1,
        split_layer: 1,
        d_model: 64,
        d_ff: 64,
        max_len: 128,
        comp_dim: None,
        ..ModelConfig::default()
    };
    let model = Model::init(cfg, 0).unwrap();
    let text: String = (0..99).map(|k| format!("w{k} ")).collect();
    let docs: Vec<CorpusDoc> = (0..1000)
        .map(|i| CorpusDoc {
            doc_id: format!("d{i}"),
            text: text.clone(),
            title: None,
        })
        .chain(std::iter::once(CorpusDoc {
            doc_id: "blank".into(),
            text: "  ;; ".into(),
            title: None,
        }))
        .collect();
    let r = cmd_index(&docs, &model, &dir.path().join("s.bin"), Precision::F16).unwrap();
    assert_eq!(r.docs_indexed, 1000);
    assert_eq!(r.skipped_empty, 1);
    assert_eq!(r.avg_tokens, 100.0);
    assert_eq!(r.store.payload_bytes, 12_800_000);
    assert_eq!(r.projected_payload_bytes, estimate_storage(1000.0, r.avg_tokens, 64.0, 2.0));
    assert!(r.store.bytes_written > r.store.payload_bytes);
}

#[test]
fn reranking_matches_direct_scoring_and_orders_runs() {
    let cfg = small_config();
    let data = generate(&cfg.synth);
    let model = noisy_model(cfg.model.clone(), 2, 0.1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.bin");
    cmd_index(&data.docs, &model, &path, Precision::F32).unwrap();
    let store = StoreReader::open(&path).unwrap();

    let ranked = cmd_rerank(&store, &model, &request(&data.queries, &data.candidates, 100)).unwrap();
    assert_eq!(ranked.len(), data.candidates.len());
    let text: std::collections::HashMap<_, _> = data.docs.iter().map(|d| (d.doc_id.as_str(), d.text.as_str())).collect();
    for (qid, qtext) in &data.queries {
        let entries: Vec<&RunEntry> = ranked.iter().filter(|e| &e.query_id == qid).collect();
        let qr = encode_query(&tokenize(qtext, 4096), &model).unwrap();
        for (i, e) in entries.iter().enumerate() {
            assert_eq!(e.rank, i + 1);
            let d = precompute_doc(&tokenize(text[e.doc_id.as_str()], 4096), &model).unwrap();
            assert_eq!(e.score, join_and_score(&qr, &d, &model, true).unwrap());
            if i > 0 {
                let prev = entries[i - 1];
                assert!(prev.score > e.score || (prev.score == e.score && prev.doc_id < e.doc_id));
            }
        }
    }
    let again = cmd_rerank(&store, &model, &request(&data.queries, &data.candidates, 100)).unwrap();
    let (a, b) = (dir.path().join("a.run"), dir.path().join("b.run"));
    write_run(&ranked, &a).unwrap();
    write_run(&again, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(read_run(std::fs::read(&a).unwrap().as_slice()).unwrap(), ranked);

    let top1 = cmd_rerank(&store, &model, &request(&data.queries, &data.candidates, 1)).unwrap();
    let firsts: Vec<&str> = data.candidates.iter().filter(|e| e.rank == 1).map(|e| e.doc_id.as_str()).collect();
    assert_eq!(top1.iter().map(|e| e.doc_id.as_str()).collect::<Vec<_>>(), firsts);
}

#[test]
fn missing_queries_and_documents_follow_the_policy() {
    let cfg = small_config();
    let data = generate(&cfg.synth);
    let model = noisy_model(cfg.model.clone(), 3, 0.1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.bin");
    cmd_index(&data.docs[1..], &model, &path, Precision::F32).unwrap();
    let store = StoreReader::open(&path).unwrap();

    let err = cmd_rerank(&store, &model, &request(&data.queries[1..], &data.candidates, 100)).unwrap_err();
    assert!(matches!(err, Error::NotFound(_)), "{err}");
    let err = cmd_rerank(&store, &model, &request(&data.queries, &data.candidates, 100)).unwrap_err();
    assert!(matches!(err, Error::NotFound(_)), "{err}");

    let mut req = request(&data.queries, &data.candidates, 100);
    req.missing = MissingDocPolicy::Encode;
    assert!(cmd_rerank(&store, &model, &req).is_err());
    req.corpus = Some(&data.docs);
    let encoded = cmd_rerank(&store, &model, &req).unwrap();

    let full = dir.path().join("full.bin");
    cmd_index(&data.docs, &model, &full, Precision::F32).unwrap();
    let complete = cmd_rerank(&StoreReader::open(&full).unwrap(), &model, &request(&data.queries, &data.candidates, 100)).unwrap();
    assert_eq!(encoded, complete);

    let other = noisy_model(cfg.model.clone(), 4, 0.1);
    let err = cmd_rerank(&store, &other, &request(&data.queries, &data.candidates, 100)).unwrap_err();
    assert!(matches!(err, Error::StaleRepresentation(_)), "{err}");
}

#[test]
fn training_is_reproducible() {
    let mut cfg = small_config();
    cfg.train.max_batches = 24;
    cfg.train.validate_every = 8;
    cfg.train.batch_size = 4;
    let data = generate(&cfg.synth);
    let judged = judged_queries(&data.queries, &data.candidates, &qrels_map(&data.qrels), &data.docs, 4096);
    let run = || {
        let mut log = Vec::new();
        let model = Model::init(cfg.model.clone(), cfg.seed).unwrap();
        let (_, report) = cmd_train(&cfg, model, &judged, Some(&mut log)).unwrap();
        (report, log)
    };
    let (a, log_a) = run();
    let (b, log_b) = run();
    assert_eq!(a.fingerprint, b.fingerprint);
    assert_eq!(log_a, log_b);
    assert_eq!(String::from_utf8(log_a).unwrap().lines().count(), 24);
    assert_eq!(a.train_queries + a.validation_queries, 6);
}

#[test]
fn bench_csv_roundtrips() {
    let mut cfg = small_config();
    cfg.model.n_layers = 3;
    cfg.bench.docs_per_query = 5;
    cfg.bench.warmups = 0;
    let model = Model::init(cfg.model.clone(), 0).unwrap();
    let docs: Vec<Vec<u32>> = (0..5).map(|i| vec![100 + i; 20]).collect();
    let rows = cmd_bench(&cfg, &model, &[vec![9, 10]], &docs).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].l, None);
    assert_eq!(rows.iter().skip(1).map(|r| r.l.unwrap()).collect::<Vec<_>>(), [0, 1, 2]);
    let (_, csv) = prettr::bench::report_table(&rows).unwrap();
    assert_eq!(parse_report_csv(&csv).unwrap(), rows);
}

#[test]
fn storage_estimates_reproduce_the_reference_figures() {
    let avg = 112e12 / (50e6 * 768.0 * 4.0);
    let docs = 34e12 / (avg * 768.0 * 4.0);
    let f32 = cmd_estimate(docs, avg, 128, Precision::F32).unwrap();
    let f16 = cmd_estimate(docs, avg, 128, Precision::F16).unwrap();
    assert!((f32.terabytes / 5.7 - 1.0).abs() <= 0.02, "{}", f32.terabytes);
    assert!((f16.terabytes / 2.8 - 1.0).abs() <= 0.02, "{}", f16.terabytes);
    assert_eq!(f16.bytes * 2.0, f32.bytes);
    assert!(cmd_estimate(0.0, 1.0, 1, Precision::F32).is_err());
}
