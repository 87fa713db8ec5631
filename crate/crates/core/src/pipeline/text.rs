//! Tokenization and the plain-text file formats: JSONL corpora, TSV
//! queries, qrels and six-column run files.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hasher;
use std::io::{BufRead, Write};

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::RESERVED_IDS;

/// Lowercases, splits on runs of non-alphanumeric characters and hashes each
/// token (64-bit FNV-1a of its UTF-8 bytes) into `RESERVED_IDS..vocab_size`.
pub fn tokenize(text: &str, vocab_size: usize) -> Vec<u32> {
    let span = (vocab_size - RESERVED_IDS as usize) as u64;
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| {
            let mut h = FnvHasher::default();
            h.write(t.to_lowercase().as_bytes());
            (h.finish() % span) as u32 + RESERVED_IDS
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDoc {
    pub doc_id: String,
    pub text: String,
    /// Optional heading, used to build compressor pre-training pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
}

/// Documents that parsed, and how many lines were skipped as malformed.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub docs: Vec<CorpusDoc>,
    pub skipped: usize,
}

/// Reads line-delimited JSON `{"doc_id", "text"}` records. Blank lines are
/// ignored; lines that do not parse, or have an empty id or text, are
/// counted and skipped.
pub fn read_corpus(input: impl BufRead) -> Result<Corpus> {
    let mut corpus = Corpus::default();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<CorpusDoc>(&line) {
            Ok(doc) if !doc.doc_id.is_empty() && !doc.text.trim().is_empty() => corpus.docs.push(doc),
            _ => corpus.skipped += 1,
        }
    }
    Ok(corpus)
}

pub fn write_corpus(docs: &[CorpusDoc], mut out: impl Write) -> Result<()> {
    for d in docs {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// `qid<TAB>text` lines, in file order.
pub fn read_queries(input: impl BufRead) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (qid, text) = line
            .split_once('\t')
            .ok_or_else(|| Error::invalid(format!("query line {} has no tab", n + 1)))?;
        out.push((qid.to_string(), text.to_string()));
    }
    Ok(out)
}

pub fn write_queries(queries: &[(String, String)], mut out: impl Write) -> Result<()> {
    for (qid, text) in queries {
        writeln!(out, "{qid}\t{text}")?;
    }
    Ok(())
}

/// Graded judgments: `qid → doc_id → grade`.
pub type Qrels = HashMap<String, HashMap<String, u32>>;

/// Reads `qid iter doc_id grade` (TREC) or `qid doc_id grade` lines,
/// whitespace separated.
pub fn read_qrels(input: impl BufRead) -> Result<Qrels> {
    let mut q = Qrels::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        let f: Vec<&str> = line.split_whitespace().collect();
        let (qid, doc, grade) = match f.as_slice() {
            [] => continue,
            [qid, _, doc, grade] | [qid, doc, grade] => (*qid, *doc, *grade),
            _ => return Err(Error::invalid(format!("qrels line {} has {} fields", n + 1, f.len()))),
        };
        let grade: i64 = grade
            .parse()
            .map_err(|_| Error::invalid(format!("qrels line {}: bad grade {grade:?}", n + 1)))?;
        q.entry(qid.to_string())
            .or_default()
            .insert(doc.to_string(), grade.max(0) as u32);
    }
    Ok(q)
}

pub fn write_qrels(rows: &[(String, String, u32)], mut out: impl Write) -> Result<()> {
    for (qid, doc, grade) in rows {
        writeln!(out, "{qid} 0 {doc} {grade}")?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub query_id: String,
    pub doc_id: String,
    pub rank: usize,
    pub score: f32,
    pub tag: String,
}

/// Reads `qid Q0 doc_id rank score tag` lines.
pub fn read_run(input: impl BufRead) -> Result<Vec<RunEntry>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        if f.len() != 6 {
            return Err(Error::invalid(format!("run line {} has {} fields, expected 6", n + 1, f.len())));
        }
        let bad = |what: &str| Error::invalid(format!("run line {}: bad {what}", n + 1));
        out.push(RunEntry {
            query_id: f[0].to_string(),
            doc_id: f[2].to_string(),
            rank: f[3].parse().map_err(|_| bad("rank"))?,
            score: f[4].parse().map_err(|_| bad("score"))?,
            tag: f[5].to_string(),
        });
    }
    Ok(out)
}

/// Formats entries in the six-column layout. Scores use the shortest
/// representation that parses back to the same `f32`.
pub fn format_run(entries: &[RunEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        let _ = writeln!(s, "{} Q0 {} {} {} {}", e.query_id, e.doc_id, e.rank, e.score, e.tag);
    }
    s
}

/// Groups entries by query in order of first appearance, each group sorted
/// by input rank.
pub fn group_run(entries: &[RunEntry]) -> Vec<(String, Vec<&RunEntry>)> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<&str, Vec<&RunEntry>> = HashMap::new();
    for e in entries {
        let g = groups.entry(e.query_id.as_str()).or_default();
        if g.is_empty() {
            order.push(e.query_id.clone());
        }
        g.push(e);
    }
    order
        .into_iter()
        .map(|q| {
            let mut g = groups.remove(q.as_str()).expect("grouped");
            g.sort_by_key(|e| e.rank);
            (q, g)
        })
        .collect()
}

/// Ranks scored documents of one query: descending score, ties by doc id
/// ascending, ranks from 1.
pub fn rank_scored(query_id: &str, mut scored: Vec<(String, f32)>, tag: &str) -> Vec<RunEntry> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored
        .into_iter()
        .enumerate()
        .map(|(i, (doc_id, score))| RunEntry {
            query_id: query_id.to_string(),
            doc_id,
            rank: i + 1,
            score,
            tag: tag.to_string(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_basics() {
        assert!(tokenize("", 4096).is_empty());
        assert!(tokenize(" ,;; ", 4096).is_empty());
        let t = tokenize("The THE the", 4096);
        assert_eq!(t.len(), 3);
        assert!(t.iter().all(|&x| x == t[0]));
        assert!(tokenize("a-b_c d9", 100).iter().all(|&x| (8..100).contains(&(x as usize))));
    }

    #[test]
    fn tokenizer_golden_values() {
        // 64-bit FNV-1a: "hello" = 11831194018420276491, "world" =
        // 5717881983045765875; reduced mod 4088 and offset by 8.
        assert_eq!(tokenize("hello world", 4096), vec![3331, 1491]);
        assert_eq!(tokenize("Hello, WORLD!", 4096), vec![3331, 1491]);
    }

    #[test]
    fn corpus_skips_malformed_lines() {
        let text = "{\"doc_id\":\"a\",\"text\":\"x y\"}\nnot json\n\n{\"doc_id\":\"b\",\"text\":\"\"}\n{\"doc_id\":\"c\",\"text\":\"z\",\"title\":\"t\"}\n";
        let c = read_corpus(text.as_bytes()).unwrap();
        assert_eq!(c.docs.len(), 2);
        assert_eq!(c.skipped, 2);
        assert_eq!(c.docs[1].title.as_deref(), Some("t"));
        let mut buf = Vec::new();
        write_corpus(&c.docs, &mut buf).unwrap();
        assert_eq!(read_corpus(buf.as_slice()).unwrap().docs, c.docs);
    }

    #[test]
    fn queries_and_qrels_parse() {
        let q = read_queries("1\thello world\n2\tfoo\n".as_bytes()).unwrap();
        assert_eq!(q, vec![("1".into(), "hello world".into()), ("2".into(), "foo".into())]);
        assert!(read_queries("no tab here\n".as_bytes()).is_err());
        let r = read_qrels("1 0 d1 2\n1 d2 0\n2 0 d3 -1\n".as_bytes()).unwrap();
        assert_eq!(r["1"]["d1"], 2);
        assert_eq!(r["1"]["d2"], 0);
        assert_eq!(r["2"]["d3"], 0);
    }

    #[test]
    fn runs_roundtrip_and_rank_deterministically() {
        let ranked = rank_scored("q", vec![("b".into(), 1.0), ("a".into(), 1.0), ("c".into(), 2.5)], "t");
        let ids: Vec<_> = ranked.iter().map(|e| e.doc_id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);
        assert_eq!(ranked.iter().map(|e| e.rank).collect::<Vec<_>>(), [1, 2, 3]);
        let text = format_run(&ranked);
        assert_eq!(text.lines().next().unwrap(), "q Q0 c 1 2.5 t");
        assert_eq!(read_run(text.as_bytes()).unwrap(), ranked);
        assert!(read_run("q Q0 d 1 2.0\n".as_bytes()).is_err());
    }

    #[test]
    fn grouping_keeps_first_appearance_order() {
        let e = |q: &str, d: &str, r| RunEntry {
            query_id: q.into(),
            doc_id: d.into(),
            rank: r,
            score: 0.0,
            tag: "t".into(),
        };
        let run = vec![e("2", "x", 2), e("1", "y", 1), e("2", "z", 1)];
        let g = group_run(&run);
        assert_eq!(g[0].0, "2");
        assert_eq!(g[0].1[0].doc_id, "z");
        assert_eq!(g[1].0, "1");
    }
}
