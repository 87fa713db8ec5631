use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{adam_step, grads, AdamConfig, OptimizerState, TrainPair};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::split::{encode_query, join_and_score, precompute_doc};

/// A query with graded candidate documents (grade 0 = not relevant).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgedQuery {
    pub query: Vec<u32>,
    pub docs: Vec<(Vec<u32>, u32)>,
}

impl JudgedQuery {
    fn split(&self) -> (Vec<&Vec<u32>>, Vec<&Vec<u32>>) {
        let rel = self.docs.iter().filter(|(_, g)| *g > 0).map(|(d, _)| d).collect();
        let non = self.docs.iter().filter(|(_, g)| *g == 0).map(|(d, _)| d).collect();
        (rel, non)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Pairs per optimizer step.
    pub batch_size: usize,
    /// Micro-batches averaged into one step.
    pub accumulation: usize,
    pub max_batches: usize,
    pub validate_every: usize,
    /// Cutoff of the validation precision.
    pub k: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Stop once validation pairwise accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            accumulation: 1,
            max_batches: 2000,
            validate_every: 32,
            k: 10,
            seed: 0,
            adam: AdamConfig::default(),
            target_accuracy: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub precision_at_k: f64,
    /// Fraction of (relevant, non-relevant) pairs ordered correctly; ties
    /// count one half. Averaged over queries.
    pub pairwise_accuracy: f64,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub val_metric: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Model,
    pub best_step: usize,
    pub best_report: ValidationReport,
    pub log: Vec<LogRecord>,
    pub reports: Vec<(usize, ValidationReport)>,
}

/// Scores every candidate of every query through the split path.
pub fn score_queries(model: &Model, queries: &[JudgedQuery]) -> Result<Vec<Vec<f32>>> {
    queries
        .par_iter()
        .map(|q| {
            let qr = encode_query(&q.query, model)?;
            q.docs
                .iter()
                .map(|(d, _)| join_and_score(&qr, &precompute_doc(d, model)?, model, true))
                .collect()
        })
        .collect()
}

/// Validation precision at `k` and pairwise accuracy of `model`.
pub fn evaluate(model: &Model, queries: &[JudgedQuery], k: usize) -> Result<ValidationReport> {
    if queries.is_empty() {
        return Err(Error::invalid("empty validation set"));
    }
    let scores = score_queries(model, queries)?;
    let mut p_sum = 0.0;
    let mut acc_sum = 0.0;
    let mut acc_queries = 0usize;
    for (q, s) in queries.iter().zip(&scores) {
        let mut order: Vec<usize> = (0..s.len()).collect();
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        let hits = order.iter().take(k).filter(|&&i| q.docs[i].1 > 0).count();
        p_sum += hits as f64 / k as f64;

        let mut correct = 0.0;
        let mut total = 0usize;
        for (i, (_, gi)) in q.docs.iter().enumerate() {
            for (j, (_, gj)) in q.docs.iter().enumerate() {
                if *gi > 0 && *gj == 0 {
                    total += 1;
                    correct += match s[i].partial_cmp(&s[j]) {
                        Some(std::cmp::Ordering::Greater) => 1.0,
                        Some(std::cmp::Ordering::Equal) => 0.5,
                        _ => 0.0,
                    };
                }
            }
        }
        if total > 0 {
            acc_sum += correct / total as f64;
            acc_queries += 1;
        }
    }
    Ok(ValidationReport {
        precision_at_k: p_sum / queries.len() as f64,
        pairwise_accuracy: if acc_queries == 0 { 0.0 } else { acc_sum / acc_queries as f64 },
    })
}

fn sample_pair(queries: &[(&JudgedQuery, Vec<&Vec<u32>>, Vec<&Vec<u32>>)], rng: &mut ChaCha8Rng) -> TrainPair {
    let (q, rel, non) = &queries[rng.gen_range(0..queries.len())];
    TrainPair {
        query: q.query.clone(),
        pos: rel[rng.gen_range(0..rel.len())].clone(),
        neg: non[rng.gen_range(0..non.len())].clone(),
    }
}

fn better(a: &ValidationReport, b: &ValidationReport) -> bool {
    (a.precision_at_k, a.pairwise_accuracy) > (b.precision_at_k, b.pairwise_accuracy)
}

/// Pairwise training. Each pair takes a random query, a random relevant and
/// a random non-relevant candidate of that query. Every `validate_every`
/// batches the model is evaluated; the best by precision at `k` (pairwise
/// accuracy breaks ties) is returned. With `log` set, one JSON record is
/// written per batch.
pub fn train(
    model: Model,
    train_queries: &[JudgedQuery],
    validation: &[JudgedQuery],
    tc: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    if tc.batch_size == 0 || tc.accumulation == 0 || tc.validate_every == 0 || tc.k == 0 {
        return Err(Error::Config("batch_size, accumulation, validate_every and k must be positive".into()));
    }
    let usable: Vec<_> = train_queries
        .iter()
        .filter(|q| !q.query.is_empty())
        .map(|q| {
            let (rel, non) = q.split();
            (q, rel, non)
        })
        .filter(|(_, rel, non)| !rel.is_empty() && !non.is_empty())
        .collect();
    if usable.is_empty() {
        return Err(Error::invalid("no training query has both relevant and non-relevant candidates"));
    }
    let (cfg, mut w) = model.into_parts();
    let mut opt = OptimizerState::for_weights(tc.adam, &w);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);

    let start = Model::new(cfg.clone(), w.clone())?;
    let mut best_report = evaluate(&start, validation, tc.k)?;
    let mut best = start;
    let mut best_step = 0;
    let mut reports = vec![(0, best_report)];
    let mut records = Vec::new();

    for step in 1..=tc.max_batches {
        let mut total = w.zeros_like();
        let mut loss = 0.0f64;
        for _ in 0..tc.accumulation {
            let batch: Vec<TrainPair> = (0..tc.batch_size).map(|_| sample_pair(&usable, &mut rng)).collect();
            let (l, g) = grads(&w, &batch, &cfg)?;
            loss += l as f64;
            super::add_weights(&mut total, &g)?;
        }
        let scale = 1.0 / tc.accumulation as f32;
        for t in total.tensors_mut() {
            t.scale(scale);
        }
        loss /= tc.accumulation as f64;
        if !loss.is_finite() {
            return Err(Error::invalid(format!("loss became {loss} at step {step}")));
        }
        adam_step(&mut w, &total, &mut opt)?;

        let mut val_metric = None;
        let mut stop = false;
        if step % tc.validate_every == 0 {
            let current = Model::new(cfg.clone(), w.clone())?;
            let report = evaluate(&current, validation, tc.k)?;
            val_metric = Some(report.precision_at_k);
            reports.push((step, report));
            if better(&report, &best_report) {
                best_report = report;
                best = current;
                best_step = step;
            }
            stop = tc.target_accuracy.is_some_and(|t| report.pairwise_accuracy >= t);
        }
        let record = LogRecord { step, loss, val_metric };
        if let Some(out) = log.as_deref_mut() {
            serde_json::to_writer(&mut *out, &record)?;
            out.write_all(b"\n")?;
        }
        records.push(record);
        if stop {
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        best_step,
        best_report,
        log: records,
        reports,
    })
}
