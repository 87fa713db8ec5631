//! Precision and nDCG at a cutoff over run files and graded qrels.

use super::text::{group_run, Qrels, RunEntry};

/// Fraction of the top `k` that is judged relevant (grade > 0). Missing
/// entries below `k` count as non-relevant.
pub fn precision_at_k(ranked: &[&str], judged: Option<&std::collections::HashMap<String, u32>>, k: usize) -> f64 {
    let hits = ranked
        .iter()
        .take(k)
        .filter(|d| judged.and_then(|j| j.get(**d)).is_some_and(|&g| g > 0))
        .count();
    hits as f64 / k as f64
}

/// nDCG with gain `2^grade − 1` and discount `log2(rank + 1)`.
pub fn ndcg_at_k(ranked: &[&str], judged: Option<&std::collections::HashMap<String, u32>>, k: usize) -> f64 {
    let Some(j) = judged else { return 0.0 };
    let gain = |g: u32| 2f64.powi(g as i32) - 1.0;
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| gain(j.get(*d).copied().unwrap_or(0)) / (i as f64 + 2.0).log2())
        .sum();
    let mut ideal: Vec<u32> = j.values().copied().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain(g) / (i as f64 + 2.0).log2())
        .sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

/// Mean metrics over the queries of a run.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct RunMetrics {
    pub queries: usize,
    pub precision: f64,
    pub ndcg: f64,
}

/// Evaluates a run in rank order at cutoff `k`.
pub fn evaluate_run(run: &[RunEntry], qrels: &Qrels, k: usize) -> RunMetrics {
    let groups = group_run(run);
    let (mut p, mut n) = (0.0, 0.0);
    for (qid, entries) in &groups {
        let ranked: Vec<&str> = entries.iter().map(|e| e.doc_id.as_str()).collect();
        p += precision_at_k(&ranked, qrels.get(qid), k);
        n += ndcg_at_k(&ranked, qrels.get(qid), k);
    }
    let q = groups.len().max(1) as f64;
    RunMetrics {
        queries: groups.len(),
        precision: p / q,
        ndcg: n / q,
    }
}
