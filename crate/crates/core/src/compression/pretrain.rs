//! Pre-training the compressor to preserve the attention of the layers that
//! follow it.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::attention_match_loss;
use crate::error::{Error, Result};
use crate::model::{forward, forward_traced, AttentionTensor, CompressorWeights, EncodedSequence, ForwardOptions, Model, ModelConfig, Weights};
use crate::split::build_mask_schedule;
use crate::tensor::{Matrix, Real};
use crate::train::{backward::sequence_backward, backward::Scope, AdamConfig, OptimizerState};

/// A heading and a paragraph, either from the same document (`matched`) or
/// not. The heading takes the query half of the sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPair {
    pub heading: Vec<u32>,
    pub paragraph: Vec<u32>,
    pub matched: bool,
}

/// Half of the pairs keep a heading with its own paragraph, the other half
/// pair it with a paragraph drawn from a different entry. Entries with an
/// empty side are skipped.
pub fn build_text_pairs(entries: &[(Vec<u32>, Vec<u32>)], seed: u64) -> Vec<TextPair> {
    let usable: Vec<&(Vec<u32>, Vec<u32>)> = entries
        .iter()
        .filter(|(h, p)| !h.is_empty() && !p.is_empty())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(usable.len());
    for (i, (heading, paragraph)) in usable.iter().enumerate() {
        let matched = i % 2 == 0 || usable.len() < 2;
        let paragraph = if matched {
            paragraph.clone()
        } else {
            let mut j = rng.gen_range(0..usable.len() - 1);
            if j >= i {
                j += 1;
            }
            usable[j].1.clone()
        };
        out.push(TextPair {
            heading: heading.clone(),
            paragraph,
            matched,
        });
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub batch_size: usize,
    /// Training pairs consumed before stopping.
    pub max_pairs: usize,
    /// Optimizer steps between held-out evaluations.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping early.
    pub patience: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            max_pairs: 20_000,
            eval_every: 32,
            patience: 5,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// The compressor with the lowest held-out loss seen.
    pub compressor: CompressorWeights,
    /// Mean training loss of each optimizer step.
    pub step_losses: Vec<f64>,
    /// `(step, held-out loss)`; step 0 is the initialization.
    pub held_out: Vec<(usize, f64)>,
    pub pairs_seen: usize,
}

impl PretrainOutcome {
    pub fn initial_held_out(&self) -> f64 {
        self.held_out[0].1
    }

    pub fn best_held_out(&self) -> f64 {
        self.held_out.iter().map(|&(_, l)| l).fold(f64::INFINITY, f64::min)
    }
}

fn pair_sequence(pair: &TextPair, cfg: &ModelConfig) -> Result<EncodedSequence> {
    EncodedSequence::pair(&pair.heading, &pair.paragraph, cfg)
}

fn reference_attention<T: Real>(seq: &EncodedSequence, w: &Weights<T>, cfg: &ModelConfig) -> Result<Vec<AttentionTensor<T>>> {
    let schedule = build_mask_schedule(&seq.sides, cfg.split_layer, cfg.n_layers)?;
    let opts = ForwardOptions {
        cls_only_last: false,
        compress: false,
    };
    let out = forward(seq, schedule.layers(), w, cfg, opts)?;
    Ok(out.attentions)
}

/// Attention-match loss of one sequence and its gradient with respect to the
/// compressor. `w` must carry a compressor and `split_layer < n_layers`.
pub fn attention_match_grads<T: Real>(
    seq: &EncodedSequence,
    w: &Weights<T>,
    cfg: &ModelConfig,
) -> Result<(T, CompressorWeights<T>)> {
    let comp = w
        .compressor
        .as_ref()
        .ok_or_else(|| Error::Config("model has no compressor".into()))?;
    let l = cfg.split_layer;
    let n = cfg.n_layers;
    if l >= n {
        return Err(Error::Config("no layers follow the split layer".into()));
    }
    let orig = reference_attention(seq, w, cfg)?;
    let schedule = build_mask_schedule(&seq.sides, l, n)?;
    let trace = forward_traced(seq, schedule.layers(), w, cfg)?;
    let comp_attn: Vec<AttentionTensor<T>> = trace.layers[l..].iter().map(|t| t.probs.clone()).collect();
    let loss = attention_match_loss(&orig[l..], &comp_attn)?;

    let layers_after = T::lit((n - l) as f64);
    let mut d_attn: Vec<Vec<Matrix<T>>> = vec![Vec::new(); n];
    for (i, (a_layer, c_layer)) in orig[l..].iter().zip(&comp_attn).enumerate() {
        let count = T::lit(a_layer.iter().map(|m| m.data().len()).sum::<usize>() as f64);
        let factor = T::lit(2.0) / (count * layers_after);
        d_attn[l + i] = a_layer
            .iter()
            .zip(c_layer)
            .map(|(a, c)| {
                let mut d = c.clone();
                for (dv, &av) in d.data_mut().iter_mut().zip(a.data()) {
                    *dv = (*dv - av) * factor;
                }
                d
            })
            .collect();
    }
    let mut g = w.zeros_like();
    let d_cls = vec![T::zero(); cfg.d_model];
    sequence_backward(seq, &trace, &d_cls, Some(&d_attn), w, cfg, &mut g, Scope::Compressor)?;
    let gc = g.compressor.take().unwrap_or_else(|| comp.zeros_like());
    Ok((loss, gc))
}

fn mean_held_out(pairs: &[TextPair], w: &Weights, cfg: &ModelConfig) -> Result<f64> {
    let losses: Vec<f64> = pairs
        .par_iter()
        .map(|p| {
            let seq = pair_sequence(p, cfg)?;
            let orig = reference_attention(&seq, w, cfg)?;
            let schedule = build_mask_schedule(&seq.sides, cfg.split_layer, cfg.n_layers)?;
            let comp = forward(&seq, schedule.layers(), w, cfg, ForwardOptions::default())?;
            let l = cfg.split_layer;
            Ok(attention_match_loss(&orig[l..], &comp.attentions[l..])? as f64)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Trains only the compressor of `model`, keeping every other weight
/// frozen, on the attention-match loss. Evaluates on `held_out` before
/// training and every `eval_every` steps; stops after `max_pairs` pairs or
/// `patience` evaluations without improvement.
pub fn pretrain_compressor(
    model: &Model,
    train: &[TextPair],
    held_out: &[TextPair],
    pc: &PretrainConfig,
) -> Result<PretrainOutcome> {
    let cfg = model.config();
    if train.is_empty() || held_out.is_empty() {
        return Err(Error::invalid("compressor pre-training needs training and held-out pairs"));
    }
    if pc.batch_size == 0 || pc.eval_every == 0 {
        return Err(Error::Config("batch_size and eval_every must be positive".into()));
    }
    let mut w = model.weights().clone();
    let mut comp = w
        .compressor
        .clone()
        .ok_or_else(|| Error::Config("model has no compressor".into()))?;
    if cfg.split_layer >= cfg.n_layers {
        return Err(Error::Config("no layers follow the split layer".into()));
    }
    let shapes: Vec<(usize, usize)> = comp.named_params().iter().map(|(_, m)| m.shape()).collect();
    let mut opt = OptimizerState::new(pc.adam, &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(pc.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;

    let mut best = comp.clone();
    let mut best_loss = mean_held_out(held_out, &w, cfg)?;
    let mut held = vec![(0, best_loss)];
    let mut step_losses = Vec::new();
    let mut stale = 0;
    let mut seen = 0;
    let mut step = 0;
    while seen < pc.max_pairs {
        let batch: Vec<&TextPair> = (0..pc.batch_size)
            .map(|_| {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                cursor += 1;
                &train[order[cursor - 1]]
            })
            .collect();
        let results: Vec<(f32, CompressorWeights)> = batch
            .par_iter()
            .map(|p| attention_match_grads(&pair_sequence(p, cfg)?, &w, cfg))
            .collect::<Result<_>>()?;
        let scale = 1.0 / results.len() as f32;
        let mut grad = comp.zeros_like();
        let mut loss = 0.0f64;
        for (l, g) in &results {
            loss += *l as f64;
            for (dst, src) in grad.tensors_mut().into_iter().zip(g.named_params()) {
                dst.add_assign(src.1)?;
            }
        }
        for t in grad.tensors_mut() {
            t.scale(scale);
        }
        let grads: Vec<&Matrix> = grad.named_params().into_iter().map(|(_, m)| m).collect();
        opt.step(comp.tensors_mut(), &grads)?;
        w.compressor = Some(comp.clone());
        step_losses.push(loss / results.len() as f64);
        seen += pc.batch_size;
        step += 1;

        if step % pc.eval_every == 0 {
            let h = mean_held_out(held_out, &w, cfg)?;
            held.push((step, h));
            if h < best_loss {
                best_loss = h;
                best = comp.clone();
                stale = 0;
            } else {
                stale += 1;
                if stale >= pc.patience {
                    break;
                }
            }
        }
    }
    if step % pc.eval_every != 0 {
        let h = mean_held_out(held_out, &w, cfg)?;
        held.push((step, h));
        if h < best_loss {
            best = comp.clone();
        }
    }
    Ok(PretrainOutcome {
        compressor: best,
        step_losses,
        held_out: held,
        pairs_seen: seen,
    })
}
