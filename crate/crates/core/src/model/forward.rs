use std::cell::Cell;

use crate::compression::{self, CompressionTrace};
use crate::error::{Error, Result};
use crate::model::{EncodedSequence, LayerWeights, ModelConfig, Weights};
use crate::tensor::{
    gelu_scalar, layer_norm_traced, matmul, softmax_row_masked, BoolMask, Matrix, NormTrace, Real,
    LN_EPS,
};

thread_local! {
    static LAYER_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Encoder layers executed on this thread since the last reset. Counts both
/// full and `[CLS]`-only layers.
pub fn layer_invocations() -> u64 {
    LAYER_CALLS.with(Cell::get)
}

pub fn reset_layer_invocations() {
    LAYER_CALLS.with(|c| c.set(0));
}

fn count_layer() {
    LAYER_CALLS.with(|c| c.set(c.get() + 1));
}

/// Token representations after `layer_index` layers (0 = embeddings).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState<T = f32> {
    pub reps: Matrix<T>,
    pub layer_index: usize,
}

/// Post-softmax attention of one layer: one matrix per head.
pub type AttentionTensor<T = f32> = Vec<Matrix<T>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Compute only the `[CLS]` row in the last layer.
    pub cls_only_last: bool,
    /// Insert the compressor after the split layer when the weights have one.
    pub compress: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            cls_only_last: false,
            compress: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T = f32> {
    pub cls_rep: Vec<T>,
    /// `s_0 ..= s_n`. With `cls_only_last` the final state has a single row.
    pub states: Vec<LayerState<T>>,
    /// One entry per layer; with `cls_only_last` the last entry holds `1 × m`
    /// matrices.
    pub attentions: Vec<AttentionTensor<T>>,
}

/// Everything one layer computed, kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct LayerTrace<T> {
    pub input: Matrix<T>,
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    pub probs: AttentionTensor<T>,
    pub context: Matrix<T>,
    pub ln1: NormTrace<T>,
    pub h1: Matrix<T>,
    pub ff_pre: Matrix<T>,
    pub ff_act: Matrix<T>,
    pub ln2: NormTrace<T>,
    pub output: Matrix<T>,
}

/// A full forward pass with every intermediate retained.
#[derive(Clone, Debug)]
pub(crate) struct SequenceTrace<T> {
    pub emb_norm: NormTrace<T>,
    pub layers: Vec<LayerTrace<T>>,
    pub compression: Option<CompressionTrace<T>>,
    pub cls_rep: Vec<T>,
}

fn eps<T: Real>() -> T {
    T::lit(LN_EPS)
}

fn projection<T: Real>(x: &Matrix<T>, w: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = matmul(x, w)?;
    out.add_row_bias(b.data())?;
    Ok(out)
}

pub(crate) fn embed_traced<T: Real>(
    seq: &EncodedSequence,
    w: &Weights<T>,
    cfg: &ModelConfig,
) -> Result<(Matrix<T>, NormTrace<T>)> {
    let m = seq.len();
    if m > cfg.max_len {
        return Err(Error::invalid(format!(
            "sequence of {m} tokens exceeds max_len {}",
            cfg.max_len
        )));
    }
    let d = cfg.d_model;
    let mut sum = Matrix::zeros(m, d);
    for i in 0..m {
        let tok = seq.token_ids[i] as usize;
        let pos = seq.position_ids[i] as usize;
        if tok >= w.token_emb.rows() {
            return Err(Error::invalid(format!("token id {tok} outside vocabulary")));
        }
        if pos >= w.position_emb.rows() {
            return Err(Error::invalid(format!("position id {pos} outside table")));
        }
        let seg = seq.segment_ids[i].index();
        let row = sum.row_mut(i);
        for (j, r) in row.iter_mut().enumerate() {
            *r = w.token_emb.get(tok, j) + w.segment_emb.get(seg, j) + w.position_emb.get(pos, j);
        }
    }
    layer_norm_traced(&sum, w.emb_ln_gamma.data(), w.emb_ln_beta.data(), eps())
}

/// `s_0 = layer_norm(token + segment + position embeddings)`.
pub fn embed<T: Real>(seq: &EncodedSequence, w: &Weights<T>, cfg: &ModelConfig) -> Result<LayerState<T>> {
    let (reps, _) = embed_traced(seq, w, cfg)?;
    Ok(LayerState {
        reps,
        layer_index: 0,
    })
}

/// Scaled dot-product scores of one head for the given query rows,
/// softmaxed under `mask`.
fn head_probs<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    head: usize,
    dk: usize,
    mask: &BoolMask,
    mask_row_offset: usize,
) -> Result<Matrix<T>> {
    let scale = T::one() / T::lit(dk as f64).sqrt();
    let cols = head * dk..(head + 1) * dk;
    let mut probs = Matrix::zeros(q.rows(), k.rows());
    for i in 0..q.rows() {
        let allowed = mask.row(i + mask_row_offset);
        let qi = &q.row(i)[cols.clone()];
        let row = probs.row_mut(i);
        for (j, out) in row.iter_mut().enumerate() {
            if allowed[j] {
                let kj = &k.row(j)[cols.clone()];
                let mut acc = T::zero();
                for (&a, &b) in qi.iter().zip(kj) {
                    acc += a * b;
                }
                *out = acc * scale;
            }
        }
        softmax_row_masked(row, allowed).map_err(|_| Error::FullyMaskedRow {
            row: i + mask_row_offset,
        })?;
    }
    Ok(probs)
}

/// Writes `probs · V[:, head]` into the head's columns of `context`.
fn head_context<T: Real>(probs: &Matrix<T>, v: &Matrix<T>, head: usize, dk: usize, context: &mut Matrix<T>) {
    let cols = head * dk..(head + 1) * dk;
    for i in 0..probs.rows() {
        for (j, &p) in probs.row(i).iter().enumerate() {
            if p == T::zero() {
                continue;
            }
            let vj = &v.row(j)[cols.clone()];
            let out = &mut context.row_mut(i)[cols.clone()];
            for (o, &x) in out.iter_mut().zip(vj) {
                *o += p * x;
            }
        }
    }
}

fn check_mask(mask: &BoolMask, m: usize) -> Result<()> {
    if mask.rows() != m || mask.cols() != m {
        return Err(Error::shape(
            "layer_forward",
            format!("{}x{} mask for {m} tokens", mask.rows(), mask.cols()),
        ));
    }
    Ok(())
}

/// Attention output through the feed-forward block, for the rows in `x_rows`
/// (which must line up with `context`).
fn attention_output_and_ffn<T: Real>(
    x_rows: &Matrix<T>,
    context: &Matrix<T>,
    lw: &LayerWeights<T>,
) -> Result<(NormTrace<T>, Matrix<T>, Matrix<T>, Matrix<T>, NormTrace<T>, Matrix<T>)> {
    let mut pre1 = projection(context, &lw.w_o, &lw.b_o)?;
    pre1.add_assign(x_rows)?;
    let (h1, ln1) = layer_norm_traced(&pre1, lw.ln1_gamma.data(), lw.ln1_beta.data(), eps())?;
    let ff_pre = projection(&h1, &lw.w_ff1, &lw.b_ff1)?;
    let ff_act = ff_pre.map(gelu_scalar);
    let mut pre2 = projection(&ff_act, &lw.w_ff2, &lw.b_ff2)?;
    pre2.add_assign(&h1)?;
    let (output, ln2) = layer_norm_traced(&pre2, lw.ln2_gamma.data(), lw.ln2_beta.data(), eps())?;
    Ok((ln1, h1, ff_pre, ff_act, ln2, output))
}

pub(crate) fn layer_forward_traced<T: Real>(
    x: &Matrix<T>,
    mask: &BoolMask,
    lw: &LayerWeights<T>,
    cfg: &ModelConfig,
) -> Result<LayerTrace<T>> {
    let m = x.rows();
    check_mask(mask, m)?;
    count_layer();
    let dk = cfg.head_dim();
    let q = projection(x, &lw.w_q, &lw.b_q)?;
    let k = projection(x, &lw.w_k, &lw.b_k)?;
    let v = projection(x, &lw.w_v, &lw.b_v)?;
    let mut context = Matrix::zeros(m, cfg.d_model);
    let mut probs = Vec::with_capacity(cfg.n_heads);
    for head in 0..cfg.n_heads {
        let p = head_probs(&q, &k, head, dk, mask, 0)?;
        head_context(&p, &v, head, dk, &mut context);
        probs.push(p);
    }
    let (ln1, h1, ff_pre, ff_act, ln2, output) = attention_output_and_ffn(x, &context, lw)?;
    Ok(LayerTrace {
        input: x.clone(),
        q,
        k,
        v,
        probs,
        context,
        ln1,
        h1,
        ff_pre,
        ff_act,
        ln2,
        output,
    })
}

/// One encoder layer: masked multi-head self-attention and a GELU
/// feed-forward block, each followed by a residual connection and layer
/// normalization. Returns the new state and the per-head attention weights.
pub fn layer_forward<T: Real>(
    state: &LayerState<T>,
    mask: &BoolMask,
    lw: &LayerWeights<T>,
    cfg: &ModelConfig,
) -> Result<(LayerState<T>, AttentionTensor<T>)> {
    let trace = layer_forward_traced(&state.reps, mask, lw, cfg)?;
    Ok((
        LayerState {
            reps: trace.output,
            layer_index: state.layer_index + 1,
        },
        trace.probs,
    ))
}

/// A layer evaluated for the `[CLS]` row (row 0) only. Keys and values are
/// still projected for every token.
pub(crate) fn cls_layer_forward<T: Real>(
    x: &Matrix<T>,
    mask: &BoolMask,
    lw: &LayerWeights<T>,
    cfg: &ModelConfig,
) -> Result<(Vec<T>, AttentionTensor<T>)> {
    check_mask(mask, x.rows())?;
    count_layer();
    let dk = cfg.head_dim();
    let x0 = x.select_rows(&[0]);
    let q = projection(&x0, &lw.w_q, &lw.b_q)?;
    let k = projection(x, &lw.w_k, &lw.b_k)?;
    let v = projection(x, &lw.w_v, &lw.b_v)?;
    let mut context = Matrix::zeros(1, cfg.d_model);
    let mut probs = Vec::with_capacity(cfg.n_heads);
    for head in 0..cfg.n_heads {
        let p = head_probs(&q, &k, head, dk, mask, 0)?;
        head_context(&p, &v, head, dk, &mut context);
        probs.push(p);
    }
    let (_, _, _, _, _, out) = attention_output_and_ffn(&x0, &context, lw)?;
    Ok((out.into_vec(), probs))
}

fn check_schedule(schedule: &[BoolMask], cfg: &ModelConfig) -> Result<()> {
    if schedule.len() != cfg.n_layers {
        return Err(Error::invalid(format!(
            "mask schedule has {} layers, model has {}",
            schedule.len(),
            cfg.n_layers
        )));
    }
    Ok(())
}

/// Runs the whole encoder over `seq`, one mask per layer.
///
/// When the weights carry a compressor and `opts.compress` is set, the
/// document rows of `s_l` are compressed and restored before layer `l + 1`,
/// exactly as a stored representation would be at query time. `states[l]`
/// keeps the uncompressed `s_l`.
pub fn forward<T: Real>(
    seq: &EncodedSequence,
    schedule: &[BoolMask],
    w: &Weights<T>,
    cfg: &ModelConfig,
    opts: ForwardOptions,
) -> Result<ForwardOutput<T>> {
    check_schedule(schedule, cfg)?;
    let s0 = embed(seq, w, cfg)?;
    let doc_rows = seq.doc_rows();
    let mut x = s0.reps.clone();
    let mut states = vec![s0];
    let mut attentions = Vec::with_capacity(cfg.n_layers);
    for layer in 1..=cfg.n_layers {
        if layer == cfg.split_layer + 1 && opts.compress {
            if let Some(comp) = &w.compressor {
                x = compression::restore_rows(&x, &doc_rows, comp)?;
            }
        }
        let (mask, lw) = (&schedule[layer - 1], &w.layers[layer - 1]);
        if layer == cfg.n_layers && opts.cls_only_last {
            let (cls, probs) = cls_layer_forward(&x, mask, lw, cfg)?;
            x = Matrix::row_vector(cls);
            attentions.push(probs);
        } else {
            let trace = layer_forward_traced(&x, mask, lw, cfg)?;
            x = trace.output;
            attentions.push(trace.probs);
        }
        states.push(LayerState {
            reps: x.clone(),
            layer_index: layer,
        });
    }
    Ok(ForwardOutput {
        cls_rep: x.row(0).to_vec(),
        states,
        attentions,
    })
}

/// Forward pass keeping every intermediate, with the compressor inserted
/// when present.
pub(crate) fn forward_traced<T: Real>(
    seq: &EncodedSequence,
    schedule: &[BoolMask],
    w: &Weights<T>,
    cfg: &ModelConfig,
) -> Result<SequenceTrace<T>> {
    check_schedule(schedule, cfg)?;
    let (mut x, emb_norm) = embed_traced(seq, w, cfg)?;
    let doc_rows = seq.doc_rows();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut comp_trace = None;
    for layer in 1..=cfg.n_layers {
        if layer == cfg.split_layer + 1 {
            if let Some(comp) = &w.compressor {
                let (restored, trace) = compression::restore_rows_traced(&x, &doc_rows, comp)?;
                x = restored;
                comp_trace = Some(trace);
            }
        }
        let trace = layer_forward_traced(&x, &schedule[layer - 1], &w.layers[layer - 1], cfg)?;
        x = trace.output.clone();
        layers.push(trace);
    }
    Ok(SequenceTrace {
        emb_norm,
        layers,
        compression: comp_trace,
        cls_rep: x.row(0).to_vec(),
    })
}

/// Ranking score: the final `[CLS]` representation times `w_combine`.
pub fn score<T: Real>(cls_rep: &[T], w_combine: &Matrix<T>) -> Result<T> {
    if w_combine.shape() != (cls_rep.len(), 1) {
        return Err(Error::shape(
            "score",
            format!("cls of {} vs w_combine {:?}", cls_rep.len(), w_combine.shape()),
        ));
    }
    let mut acc = T::zero();
    for (&c, &w) in cls_rep.iter().zip(w_combine.data()) {
        acc += c * w;
    }
    Ok(acc)
}
