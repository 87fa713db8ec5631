//! Relevance fine-tuning: pairwise loss, gradients, optimizer and the
//! validation-driven training loop.

mod adam;
pub(crate) mod backward;
mod trainer;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, forward_traced, score, EncodedSequence, ForwardOptions, ModelConfig, Weights};
use crate::split::build_mask_schedule;
use crate::tensor::{Matrix, Real};

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use trainer::{evaluate, score_queries, train, JudgedQuery, LogRecord, TrainConfig, TrainOutcome, ValidationReport};

/// A query with one relevant and one non-relevant document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainPair {
    pub query: Vec<u32>,
    pub pos: Vec<u32>,
    pub neg: Vec<u32>,
}

/// `softplus(x) = ln(1 + eˣ)` without overflow.
fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `−ln(e^{s_pos} / (e^{s_pos} + e^{s_neg}))`.
pub fn pairwise_softmax_loss<T: Real>(s_pos: T, s_neg: T) -> T {
    softplus(s_neg - s_pos)
}

fn pair_sequences(pair: &TrainPair, cfg: &ModelConfig) -> Result<[EncodedSequence; 2]> {
    if pair.query.is_empty() || pair.pos.is_empty() || pair.neg.is_empty() {
        return Err(Error::invalid("training pair with an empty side"));
    }
    Ok([
        EncodedSequence::pair(&pair.query, &pair.pos, cfg)?,
        EncodedSequence::pair(&pair.query, &pair.neg, cfg)?,
    ])
}

fn sequence_score<T: Real>(seq: &EncodedSequence, w: &Weights<T>, cfg: &ModelConfig) -> Result<T> {
    let schedule = build_mask_schedule(&seq.sides, cfg.split_layer, cfg.n_layers)?;
    let out = forward(seq, schedule.layers(), w, cfg, ForwardOptions::default())?;
    score(&out.cls_rep, &w.w_combine)
}

/// Loss of a single pair under the split mask schedule, with the compressor
/// in place when the weights carry one.
pub fn pair_loss<T: Real>(w: &Weights<T>, pair: &TrainPair, cfg: &ModelConfig) -> Result<T> {
    let [pos, neg] = pair_sequences(pair, cfg)?;
    Ok(pairwise_softmax_loss(sequence_score(&pos, w, cfg)?, sequence_score(&neg, w, cfg)?))
}

/// Mean loss over `batch`.
pub fn batch_loss<T: Real>(w: &Weights<T>, batch: &[TrainPair], cfg: &ModelConfig) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let losses: Vec<T> = batch.par_iter().map(|p| pair_loss(w, p, cfg)).collect::<Result<_>>()?;
    Ok(losses.into_iter().sum::<T>() / T::lit(batch.len() as f64))
}

/// Loss of one pair and its gradient with respect to every parameter.
pub fn pair_grads<T: Real>(w: &Weights<T>, pair: &TrainPair, cfg: &ModelConfig) -> Result<(T, Weights<T>)> {
    let seqs = pair_sequences(pair, cfg)?;
    let mut traces = Vec::with_capacity(2);
    let mut scores = Vec::with_capacity(2);
    for seq in &seqs {
        let schedule = build_mask_schedule(&seq.sides, cfg.split_layer, cfg.n_layers)?;
        let trace = forward_traced(seq, schedule.layers(), w, cfg)?;
        scores.push(score(&trace.cls_rep, &w.w_combine)?);
        traces.push(trace);
    }
    let loss = pairwise_softmax_loss(scores[0], scores[1]);
    // dL/ds_neg = σ(s_neg − s_pos) = −dL/ds_pos.
    let p = sigmoid(scores[1] - scores[0]);
    let mut g = w.zeros_like();
    for (k, (seq, trace)) in seqs.iter().zip(&traces).enumerate() {
        let ds = if k == 0 { -p } else { p };
        for (gw, &c) in g.w_combine.data_mut().iter_mut().zip(&trace.cls_rep) {
            *gw += ds * c;
        }
        let d_cls: Vec<T> = w.w_combine.data().iter().map(|&wc| ds * wc).collect();
        backward::sequence_backward(seq, trace, &d_cls, None, w, cfg, &mut g, backward::Scope::All)?;
    }
    Ok((loss, g))
}

pub(crate) fn add_weights<T: Real>(dst: &mut Weights<T>, src: &Weights<T>) -> Result<()> {
    for (d, (_, s)) in dst.tensors_mut().into_iter().zip(src.named_params()) {
        d.add_assign(s)?;
    }
    Ok(())
}

/// Mean batch loss and its exact gradient. Pairs are processed in parallel
/// and summed in batch order, so the result does not depend on the thread
/// count.
pub fn grads<T: Real>(w: &Weights<T>, batch: &[TrainPair], cfg: &ModelConfig) -> Result<(T, Weights<T>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let parts: Vec<(T, Weights<T>)> = batch.par_iter().map(|p| pair_grads(w, p, cfg)).collect::<Result<_>>()?;
    let scale = T::one() / T::lit(batch.len() as f64);
    let mut total = w.zeros_like();
    let mut loss = T::zero();
    for (l, g) in &parts {
        loss += *l;
        add_weights(&mut total, g)?;
    }
    for t in total.tensors_mut() {
        t.scale(scale);
    }
    Ok((loss * scale, total))
}

/// Relative error `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both are zero.
pub fn relative_error<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> f64 {
    let norm = |it: &mut dyn Iterator<Item = f64>| it.map(|v| v * v).sum::<f64>().sqrt();
    let na = norm(&mut a.data().iter().map(|v| v.as_f64()));
    let nb = norm(&mut b.data().iter().map(|v| v.as_f64()));
    let nd = norm(&mut a.data().iter().zip(b.data()).map(|(x, y)| x.as_f64() - y.as_f64()));
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        nd / denom
    }
}
