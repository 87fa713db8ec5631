//! Synthetic ranking collections with a known answer.
//!
//! Every document belongs to one topic and carries a few topic marker words
//! among random filler; every query is made of words of one topic. A
//! candidate is relevant exactly when its topic matches the query's, so the
//! task is separable, but only by a model that lets query and document
//! tokens interact.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::text::{tokenize, CorpusDoc, Qrels, RunEntry};
use crate::compression::{build_text_pairs, TextPair};
use crate::train::JudgedQuery;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub topics: usize,
    pub queries: usize,
    pub candidates_per_query: usize,
    pub relevant_per_query: usize,
    pub min_doc_words: usize,
    pub max_doc_words: usize,
    pub markers_per_doc: usize,
    pub query_words: usize,
    pub filler_words: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            topics: 8,
            queries: 256,
            candidates_per_query: 20,
            relevant_per_query: 5,
            min_doc_words: 8,
            max_doc_words: 16,
            markers_per_doc: 6,
            query_words: 2,
            filler_words: 12,
            vocab_size: 4096,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynthCollection {
    pub docs: Vec<CorpusDoc>,
    pub queries: Vec<(String, String)>,
    /// `(qid, doc_id, grade)` for every candidate.
    pub qrels: Vec<(String, String, u32)>,
    /// Candidates in random order, as a first-stage run.
    pub candidates: Vec<RunEntry>,
}

const QUERY_WORDS_PER_TOPIC: usize = 4;
const MARKERS_PER_TOPIC: usize = 6;

struct Lexicon {
    query: Vec<Vec<String>>,
    markers: Vec<Vec<String>>,
    filler: Vec<String>,
}

/// Words whose token ids are pairwise distinct under `tokenize`.
fn distinct_words(prefix: &str, n: usize, vocab: usize, used: &mut HashSet<u32>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    let mut k = 0;
    while out.len() < n {
        let w = format!("{prefix}{k}");
        k += 1;
        if used.insert(tokenize(&w, vocab)[0]) {
            out.push(w);
        }
    }
    out
}

fn lexicon(sc: &SynthConfig) -> Lexicon {
    let mut used = HashSet::new();
    let v = sc.vocab_size;
    Lexicon {
        query: (0..sc.topics).map(|t| distinct_words(&format!("topic{t}q"), QUERY_WORDS_PER_TOPIC, v, &mut used)).collect(),
        markers: (0..sc.topics).map(|t| distinct_words(&format!("topic{t}m"), MARKERS_PER_TOPIC, v, &mut used)).collect(),
        filler: distinct_words("w", sc.filler_words, v, &mut used),
    }
}

fn document(lex: &Lexicon, topic: usize, sc: &SynthConfig, rng: &mut ChaCha8Rng) -> (String, String) {
    let len = rng.gen_range(sc.min_doc_words..=sc.max_doc_words);
    let mut words: Vec<&str> = (0..len).map(|_| lex.filler[rng.gen_range(0..lex.filler.len())].as_str()).collect();
    for _ in 0..sc.markers_per_doc {
        let m = lex.markers[topic][rng.gen_range(0..MARKERS_PER_TOPIC)].as_str();
        let at = rng.gen_range(0..=words.len());
        words.insert(at, m);
    }
    let title: Vec<&str> = lex.query[topic]
        .choose_multiple(rng, sc.query_words.min(QUERY_WORDS_PER_TOPIC))
        .map(String::as_str)
        .collect();
    (title.join(" "), words.join(" "))
}

/// Generates a collection. Queries cycle through the topics; each gets
/// `relevant_per_query` documents of its own topic and the rest from other
/// topics, all unique to that query. Document ids say nothing about
/// relevance.
pub fn generate(sc: &SynthConfig) -> SynthCollection {
    let lex = lexicon(sc);
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let mut out = SynthCollection::default();
    for qi in 0..sc.queries {
        let qid = format!("q{qi}");
        let topic = qi % sc.topics;
        let words: Vec<&str> = lex.query[topic]
            .choose_multiple(&mut rng, sc.query_words.min(QUERY_WORDS_PER_TOPIC))
            .map(String::as_str)
            .collect();
        out.queries.push((qid.clone(), words.join(" ")));
        let mut slots: Vec<bool> = (0..sc.candidates_per_query).map(|k| k < sc.relevant_per_query).collect();
        slots.shuffle(&mut rng);
        let mut ids = Vec::with_capacity(sc.candidates_per_query);
        for (k, relevant) in slots.into_iter().enumerate() {
            let doc_topic = if relevant || sc.topics < 2 {
                topic
            } else {
                (topic + rng.gen_range(1..sc.topics)) % sc.topics
            };
            let (title, text) = document(&lex, doc_topic, sc, &mut rng);
            let doc_id = format!("{qid}d{k}");
            out.docs.push(CorpusDoc {
                doc_id: doc_id.clone(),
                text,
                title: Some(title),
            });
            out.qrels.push((qid.clone(), doc_id.clone(), (doc_topic == topic) as u32));
            ids.push(doc_id);
        }
        ids.shuffle(&mut rng);
        let n = ids.len();
        for (rank, doc_id) in ids.into_iter().enumerate() {
            out.candidates.push(RunEntry {
                query_id: qid.clone(),
                doc_id,
                rank: rank + 1,
                score: (n - rank) as f32,
                tag: "shuffled".into(),
            });
        }
    }
    out
}

/// Joins queries, candidates and judgments into token-level training
/// material. Queries or documents that are unknown are skipped.
pub fn judged_queries(
    queries: &[(String, String)],
    candidates: &[RunEntry],
    qrels: &Qrels,
    docs: &[CorpusDoc],
    vocab_size: usize,
) -> Vec<JudgedQuery> {
    let text: HashMap<&str, &str> = docs.iter().map(|d| (d.doc_id.as_str(), d.text.as_str())).collect();
    let groups = super::text::group_run(candidates);
    let by_qid: HashMap<&str, &Vec<&RunEntry>> = groups.iter().map(|(q, g)| (q.as_str(), g)).collect();
    queries
        .iter()
        .filter_map(|(qid, qtext)| {
            let cands = by_qid.get(qid.as_str())?;
            let docs = cands
                .iter()
                .filter_map(|e| {
                    let t = tokenize(text.get(e.doc_id.as_str())?, vocab_size);
                    let grade = qrels.get(qid).and_then(|j| j.get(&e.doc_id)).copied().unwrap_or(0);
                    (!t.is_empty()).then_some((t, grade))
                })
                .collect();
            Some(JudgedQuery {
                query: tokenize(qtext, vocab_size),
                docs,
            })
        })
        .collect()
}

/// Heading/paragraph pairs from a corpus. The heading is the title when
/// present and otherwise the first eight tokens of the text.
pub fn text_pairs(docs: &[CorpusDoc], vocab_size: usize, seed: u64) -> Vec<TextPair> {
    let entries: Vec<(Vec<u32>, Vec<u32>)> = docs
        .iter()
        .map(|d| {
            let body = tokenize(&d.text, vocab_size);
            match &d.title {
                Some(t) => (tokenize(t, vocab_size), body),
                None => {
                    let cut = body.len().min(8);
                    (body[..cut].to_vec(), body[cut..].to_vec())
                }
            }
        })
        .collect();
    build_text_pairs(&entries, seed)
}

pub fn qrels_map(rows: &[(String, String, u32)]) -> Qrels {
    let mut q = Qrels::new();
    for (qid, doc, g) in rows {
        q.entry(qid.clone()).or_default().insert(doc.clone(), *g);
    }
    q
}
