//! Phase-resolved re-ranking latency.
//!
//! For every query the split path runs three phases: encoding the query
//! through layers `1..=l`, restoring the preloaded document representations
//! (widening and decompression), and combining query and document through
//! layers `l+1..=n`. The base row runs the whole encoder per document.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compression::{quantize_reps, CompressedReps, Precision};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::split::{encode_query, full_forward_score, join_restored, precompute_doc, restore_stored, to_stored};
use crate::store::StoreReader;

/// Median wall-clock milliseconds per phase, summed over the query set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    /// Split layer; `None` for the unsplit base model.
    pub l: Option<usize>,
    pub query_ms: f64,
    pub decompress_ms: f64,
    pub combine_ms: f64,
    /// Sum of the phase medians.
    pub total_ms: f64,
    pub speedup: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub docs_per_query: usize,
    pub repeats: usize,
    pub warmups: usize,
    pub cls_only_last: bool,
    /// Score documents on the rayon pool instead of one at a time.
    pub parallel: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            docs_per_query: 100,
            repeats: 5,
            warmups: 2,
            cls_only_last: true,
            parallel: false,
        }
    }
}

/// A model with its document representations already in memory.
#[derive(Clone, Debug)]
pub struct BenchCase {
    pub model: Model,
    pub docs: Vec<CompressedReps>,
}

impl BenchCase {
    /// Encodes `docs` at index time for `model`.
    pub fn prepare(model: Model, docs: &[Vec<u32>], precision: Precision) -> Result<Self> {
        let reps = docs
            .par_iter()
            .map(|d| {
                let stored = to_stored(&precompute_doc(d, &model)?, &model)?;
                Ok(match precision {
                    Precision::F32 => stored,
                    Precision::F16 => quantize_reps(&stored).0,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { model, docs: reps })
    }

    /// Loads `ids` from a store built by `model`.
    pub fn from_store(model: Model, store: &StoreReader, ids: &[String]) -> Result<Self> {
        store.check_model(&model)?;
        let docs = ids.iter().map(|id| store.read_doc(id)).collect::<Result<_>>()?;
        Ok(Self { model, docs })
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

fn check(bc: &BenchConfig, queries: &[Vec<u32>]) -> Result<()> {
    if bc.repeats < 5 {
        return Err(Error::Config(format!("at least 5 repeats are required, got {}", bc.repeats)));
    }
    if queries.is_empty() || bc.docs_per_query == 0 {
        return Err(Error::invalid("benchmark needs queries and documents"));
    }
    Ok(())
}

fn map_docs<T: Send>(parallel: bool, n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    if parallel {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

/// One repeat over all queries: `[query, decompress, combine]` milliseconds.
fn split_pass(case: &BenchCase, queries: &[Vec<u32>], bc: &BenchConfig) -> Result<[f64; 3]> {
    let n = bc.docs_per_query.min(case.docs.len());
    let mut t = [0.0; 3];
    for q in queries {
        let start = Instant::now();
        let qr = encode_query(q, &case.model)?;
        t[0] += ms(start);
        let start = Instant::now();
        let restored = map_docs(bc.parallel, n, |i| restore_stored(&case.docs[i], &case.model))?;
        t[1] += ms(start);
        let start = Instant::now();
        let scores = map_docs(bc.parallel, n, |i| join_restored(&qr, &restored[i], &case.model, bc.cls_only_last))?;
        t[2] += ms(start);
        std::hint::black_box(scores);
    }
    Ok(t)
}

fn summarize(l: Option<usize>, passes: Vec<[f64; 3]>) -> PhaseTimings {
    let phase = |k: usize| median(passes.iter().map(|p| p[k]).collect());
    let (query_ms, decompress_ms, combine_ms) = (phase(0), phase(1), phase(2));
    PhaseTimings {
        l,
        query_ms,
        decompress_ms,
        combine_ms,
        total_ms: query_ms + decompress_ms + combine_ms,
        speedup: 1.0,
    }
}

/// Times the split path of one case.
pub fn bench_case(case: &BenchCase, queries: &[Vec<u32>], bc: &BenchConfig) -> Result<PhaseTimings> {
    check(bc, queries)?;
    for _ in 0..bc.warmups {
        split_pass(case, queries, bc)?;
    }
    let passes = (0..bc.repeats).map(|_| split_pass(case, queries, bc)).collect::<Result<_>>()?;
    Ok(summarize(Some(case.model.config().split_layer), passes))
}

fn base_pass(model: &Model, queries: &[Vec<u32>], docs: &[Vec<u32>], bc: &BenchConfig) -> Result<[f64; 3]> {
    let n = bc.docs_per_query.min(docs.len());
    let opts = ForwardOptions {
        cls_only_last: bc.cls_only_last,
        compress: false,
    };
    let start = Instant::now();
    for q in queries {
        let scores = map_docs(bc.parallel, n, |i| full_forward_score(q, &docs[i], model, opts))?;
        std::hint::black_box(scores);
    }
    Ok([0.0, 0.0, ms(start)])
}

/// Times the unsplit model: every document runs the whole encoder with the
/// query. All of it is reported as combine time.
pub fn bench_base(model: &Model, queries: &[Vec<u32>], docs: &[Vec<u32>], bc: &BenchConfig) -> Result<PhaseTimings> {
    check(bc, queries)?;
    for _ in 0..bc.warmups {
        base_pass(model, queries, docs, bc)?;
    }
    let passes = (0..bc.repeats).map(|_| base_pass(model, queries, docs, bc)).collect::<Result<_>>()?;
    Ok(summarize(None, passes))
}

/// The base row followed by one row per case, with speedups relative to
/// the base total. Repeats go round-robin over the rows, so a slow spell on
/// the host is shared out instead of landing on one row.
pub fn run_bench(
    base_model: &Model,
    cases: &[BenchCase],
    queries: &[Vec<u32>],
    docs: &[Vec<u32>],
    bc: &BenchConfig,
) -> Result<Vec<PhaseTimings>> {
    check(bc, queries)?;
    let round = || -> Result<Vec<[f64; 3]>> {
        let mut out = vec![base_pass(base_model, queries, docs, bc)?];
        for case in cases {
            out.push(split_pass(case, queries, bc)?);
        }
        Ok(out)
    };
    for _ in 0..bc.warmups {
        round()?;
    }
    let mut passes = vec![Vec::with_capacity(bc.repeats); cases.len() + 1];
    for _ in 0..bc.repeats {
        for (row, t) in passes.iter_mut().zip(round()?) {
            row.push(t);
        }
    }
    let mut passes = passes.into_iter();
    let mut rows = vec![summarize(None, passes.next().unwrap_or_default())];
    for (case, p) in cases.iter().zip(passes) {
        rows.push(summarize(Some(case.model.config().split_layer), p));
    }
    set_speedups(&mut rows);
    Ok(rows)
}

/// Fills `speedup = base_total / total`, taking the base from the row with
/// `l == None` (or the first row).
pub fn set_speedups(rows: &mut [PhaseTimings]) {
    let Some(base) = rows.iter().find(|r| r.l.is_none()).or(rows.first()).map(|r| r.total_ms) else {
        return;
    };
    for r in rows.iter_mut() {
        r.speedup = base / r.total_ms;
    }
}

pub const CSV_HEADER: [&str; 6] = ["l", "query_ms", "decompress_ms", "combine_ms", "total_ms", "speedup"];

/// Renders a fixed-width text table and the CSV form of `rows`.
pub fn report_table(rows: &[PhaseTimings]) -> Result<(String, String)> {
    let mut text = format!(
        "{:>6} {:>12} {:>14} {:>12} {:>12} {:>9}\n",
        "l", "query ms", "decompress ms", "combine ms", "total ms", "speedup"
    );
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in rows {
        let l = r.l.map_or_else(|| "base".to_string(), |l| l.to_string());
        text.push_str(&format!(
            "{:>6} {:>12.3} {:>14.3} {:>12.3} {:>12.3} {:>8.2}x\n",
            l, r.query_ms, r.decompress_ms, r.combine_ms, r.total_ms, r.speedup
        ));
        w.write_record([
            l,
            r.query_ms.to_string(),
            r.decompress_ms.to_string(),
            r.combine_ms.to_string(),
            r.total_ms.to_string(),
            r.speedup.to_string(),
        ])?;
    }
    let csv = String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
        .expect("csv output is UTF-8");
    Ok((text, csv))
}

/// Parses the CSV produced by [`report_table`].
pub fn parse_report_csv(text: &str) -> Result<Vec<PhaseTimings>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    if r.headers()?.iter().ne(CSV_HEADER) {
        return Err(Error::invalid("unexpected benchmark CSV header"));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |k: usize| -> Result<f64> {
            rec[k]
                .parse()
                .map_err(|_| Error::invalid(format!("bad number {:?} in column {}", &rec[k], CSV_HEADER[k])))
        };
        let l = match &rec[0] {
            "base" => None,
            s => Some(s.parse().map_err(|_| Error::invalid(format!("bad split layer {s:?}")))?),
        };
        rows.push(PhaseTimings {
            l,
            query_ms: num(1)?,
            decompress_ms: num(2)?,
            combine_ms: num(3)?,
            total_ms: num(4)?,
            speedup: num(5)?,
        });
    }
    Ok(rows)
}

/// Least-squares line through `(x, y)`: `(slope, intercept, r²)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}
