//! Index-time / query-time split execution.
//!
//! Layers `1..=l` never let the query half and the document half attend to
//! each other, so a document's representations at layer `l` can be computed
//! once, without any query, and stored. At query time the query is encoded
//! through the same `l` layers, the two halves are concatenated in the
//! canonical layout and layers `l+1..=n` run over the joint sequence.

use crate::compression::{self, CompressedReps};
use crate::error::{Error, Result};
use crate::model::{
    cls_layer_forward, embed, forward, layer_forward_traced, score, EncodedSequence, Fingerprint,
    ForwardOptions, Group, Model, Side,
};
use crate::tensor::{BoolMask, Matrix};

/// Whether row token `a` may attend to column token `b`.
///
/// Padding attends only to itself and is never attended to. In a masked
/// layer the query half and the document half are isolated from each other.
pub fn attention_allowed(a: Side, b: Side, same_position: bool, cross_masked: bool) -> bool {
    match (a.group(), b.group()) {
        (None, _) => same_position,
        (_, None) => false,
        (Some(ga), Some(gb)) => !cross_masked || ga == gb,
    }
}

/// One attention mask per layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSchedule {
    layers: Vec<BoolMask>,
}

impl MaskSchedule {
    pub fn layers(&self) -> &[BoolMask] {
        &self.layers
    }

    /// Mask of layer `i`, 1-based.
    pub fn layer(&self, i: usize) -> &BoolMask {
        &self.layers[i - 1]
    }
}

fn layer_mask(sides: &[Side], cross_masked: bool) -> BoolMask {
    BoolMask::from_fn(sides.len(), sides.len(), |i, j| {
        attention_allowed(sides[i], sides[j], i == j, cross_masked)
    })
}

/// Masks for layers `1..=n`: cross-half attention is removed in the first
/// `l` layers and permitted afterwards. Padding is inert everywhere.
pub fn build_mask_schedule(sides: &[Side], l: usize, n: usize) -> Result<MaskSchedule> {
    if l > n {
        return Err(Error::invalid(format!("split layer {l} outside [0, {n}]")));
    }
    let masked = layer_mask(sides, true);
    let open = layer_mask(sides, false);
    let layers = (1..=n)
        .map(|i| if i <= l { masked.clone() } else { open.clone() })
        .collect();
    Ok(MaskSchedule { layers })
}

/// One half of the sequence at the split layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialReps {
    pub side: Group,
    /// One row per token of this half, including padding rows of the query.
    pub reps: Matrix,
    pub sides: Vec<Side>,
    pub split_layer: usize,
    pub fingerprint: Fingerprint,
}

impl PartialReps {
    pub fn len(&self) -> usize {
        self.reps.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.reps.rows() == 0
    }
}

/// Runs the embedding and the first `l` layers over a single half.
fn encode_half(seq: &EncodedSequence, side: Group, model: &Model) -> Result<PartialReps> {
    let cfg = model.config();
    let w = model.weights();
    let l = cfg.split_layer;
    let mask = layer_mask(&seq.sides, true);
    let mut x = embed(seq, w, cfg)?.reps;
    for layer in 1..=l {
        x = layer_forward_traced(&x, &mask, &w.layers[layer - 1], cfg)?.output;
    }
    Ok(PartialReps {
        side,
        reps: x,
        sides: seq.sides.clone(),
        split_layer: l,
        fingerprint: *model.fingerprint(),
    })
}

/// Index-time document encoding through layers `1..=l`, without a query.
/// Rows cover the document tokens and the trailing `[SEP]`, on the absolute
/// positions they occupy in a joined sequence.
pub fn precompute_doc(doc_tokens: &[u32], model: &Model) -> Result<PartialReps> {
    let seq = EncodedSequence::doc_block(doc_tokens, model.config())?;
    encode_half(&seq, Group::Doc, model)
}

/// Query-time query encoding through layers `1..=l`: `[CLS]`, the padded
/// query slots and `[SEP]`. Reusable across every candidate document.
pub fn encode_query(query_tokens: &[u32], model: &Model) -> Result<PartialReps> {
    let seq = EncodedSequence::query_block(query_tokens, model.config())?;
    encode_half(&seq, Group::Query, model)
}

fn check_partial(p: &PartialReps, want: Group, model: &Model) -> Result<()> {
    if p.side != want {
        return Err(Error::invalid(format!("expected {want:?} representations, got {:?}", p.side)));
    }
    if &p.fingerprint != model.fingerprint() {
        return Err(Error::StaleRepresentation(format!(
            "{:?} representations were produced by a different model",
            p.side
        )));
    }
    if p.split_layer != model.config().split_layer {
        return Err(Error::StaleRepresentation(format!(
            "representations at layer {}, model splits at {}",
            p.split_layer,
            model.config().split_layer
        )));
    }
    Ok(())
}

/// Runs layers `l+1..=n` over a query half joined with restored document
/// rows, and scores the result.
fn join_rows(q: &PartialReps, doc_rows: &Matrix, model: &Model, cls_only_last: bool) -> Result<f32> {
    let cfg = model.config();
    let w = model.weights();
    let l = cfg.split_layer;
    let n = cfg.n_layers;
    if doc_rows.rows() == 0 {
        return Err(Error::invalid("document representation has no rows"));
    }
    let mut sides = q.sides.clone();
    sides.extend(std::iter::repeat_n(Side::Doc, doc_rows.rows() - 1));
    sides.push(Side::SepD);
    let mut x = q.reps.vstack(doc_rows)?;
    if l == n {
        return score(x.row(0), &w.w_combine);
    }
    let open = layer_mask(&sides, false);
    for layer in l + 1..=n {
        let lw = &w.layers[layer - 1];
        if layer == n && cls_only_last {
            let (cls, _) = cls_layer_forward(&x, &open, lw, cfg)?;
            return score(&cls, &w.w_combine);
        }
        x = layer_forward_traced(&x, &open, lw, cfg)?.output;
    }
    score(x.row(0), &w.w_combine)
}

/// Joins a query encoding with a freshly precomputed document encoding.
///
/// When the model has a compressor the document rows go through
/// compress → decompress first, matching what a stored representation would
/// produce.
pub fn join_and_score(q: &PartialReps, d: &PartialReps, model: &Model, cls_only_last: bool) -> Result<f32> {
    check_partial(q, Group::Query, model)?;
    check_partial(d, Group::Doc, model)?;
    let doc_rows = match &model.weights().compressor {
        Some(comp) => {
            let all: Vec<usize> = (0..d.len()).collect();
            compression::restore_rows(&d.reps, &all, comp)?
        }
        None => d.reps.clone(),
    };
    join_rows(q, &doc_rows, model, cls_only_last)
}

/// What gets written to a store for one document.
pub fn to_stored(d: &PartialReps, model: &Model) -> Result<CompressedReps> {
    check_partial(d, Group::Doc, model)?;
    match &model.weights().compressor {
        Some(comp) => compression::compress(&d.reps, comp),
        None => Ok(CompressedReps::from_matrix(d.reps.clone())),
    }
}

/// Widens and decompresses a stored representation back to `d` columns.
pub fn restore_stored(stored: &CompressedReps, model: &Model) -> Result<Matrix> {
    let cfg = model.config();
    if stored.width() != cfg.stored_width() {
        return Err(Error::StaleRepresentation(format!(
            "stored width {} but the model expects {}",
            stored.width(),
            cfg.stored_width()
        )));
    }
    match &model.weights().compressor {
        Some(comp) => compression::decompress(stored, comp),
        None => Ok(stored.to_matrix()),
    }
}

/// Scores a query encoding against already-restored document rows.
pub fn join_restored(q: &PartialReps, doc_rows: &Matrix, model: &Model, cls_only_last: bool) -> Result<f32> {
    check_partial(q, Group::Query, model)?;
    join_rows(q, doc_rows, model, cls_only_last)
}

/// Decompress and join in one call.
pub fn score_stored(q: &PartialReps, stored: &CompressedReps, model: &Model, cls_only_last: bool) -> Result<f32> {
    let rows = restore_stored(stored, model)?;
    join_restored(q, &rows, model, cls_only_last)
}

/// Reference path: the whole `[CLS] q [SEP] d [SEP]` sequence through the
/// masked encoder in one go.
pub fn full_forward_score(query: &[u32], doc: &[u32], model: &Model, opts: ForwardOptions) -> Result<f32> {
    let cfg = model.config();
    let seq = EncodedSequence::pair(query, doc, cfg)?;
    let schedule = build_mask_schedule(&seq.sides, cfg.split_layer, cfg.n_layers)?;
    let out = forward(&seq, schedule.layers(), model.weights(), cfg, opts)?;
    score(&out.cls_rep, &model.weights().w_combine)
}
