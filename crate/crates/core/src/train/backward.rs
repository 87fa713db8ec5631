//! Reverse pass through the encoder, written out by hand against the traces
//! kept by the forward pass.

use crate::compression::restore_rows_backward;
use crate::error::Result;
use crate::model::{EncodedSequence, LayerTrace, LayerWeights, ModelConfig, SequenceTrace, Weights};
use crate::tensor::{gelu_derivative, layer_norm_backward, matmul_transpose_a, matmul_transpose_b, Matrix, Real};

fn acc<T: Real>(dst: &mut Matrix<T>, src: &Matrix<T>) {
    dst.add_assign(src).expect("gradient mirrors parameter shape");
}

fn acc_vec<T: Real>(dst: &mut Matrix<T>, src: &[T]) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradient of one affine map `y = x W + b`: accumulates into `gw`, `gb`
/// and returns `dy Wᵀ`.
fn affine_backward<T: Real>(
    dy: &Matrix<T>,
    x: &Matrix<T>,
    w: &Matrix<T>,
    gw: &mut Matrix<T>,
    gb: &mut Matrix<T>,
) -> Result<Matrix<T>> {
    acc(gw, &matmul_transpose_a(x, dy)?);
    acc_vec(gb, &dy.column_sums());
    matmul_transpose_b(dy, w)
}

/// Backward through one layer. `dy` is the gradient with respect to the
/// layer output; `d_probs`, when given, is an extra gradient with respect
/// to each head's post-softmax attention. Returns the gradient with respect
/// to the layer input.
pub(crate) fn layer_backward<T: Real>(
    dy: &Matrix<T>,
    d_probs: Option<&[Matrix<T>]>,
    trace: &LayerTrace<T>,
    lw: &LayerWeights<T>,
    cfg: &ModelConfig,
    g: &mut LayerWeights<T>,
) -> Result<Matrix<T>> {
    let (d_pre2, dgamma2, dbeta2) = layer_norm_backward(dy, &trace.ln2, lw.ln2_gamma.data());
    acc_vec(&mut g.ln2_gamma, &dgamma2);
    acc_vec(&mut g.ln2_beta, &dbeta2);

    let mut d_ff_pre = affine_backward(&d_pre2, &trace.ff_act, &lw.w_ff2, &mut g.w_ff2, &mut g.b_ff2)?;
    for (dv, &p) in d_ff_pre.data_mut().iter_mut().zip(trace.ff_pre.data()) {
        *dv *= gelu_derivative(p);
    }
    let mut dh1 = affine_backward(&d_ff_pre, &trace.h1, &lw.w_ff1, &mut g.w_ff1, &mut g.b_ff1)?;
    dh1.add_assign(&d_pre2)?;

    let (d_pre1, dgamma1, dbeta1) = layer_norm_backward(&dh1, &trace.ln1, lw.ln1_gamma.data());
    acc_vec(&mut g.ln1_gamma, &dgamma1);
    acc_vec(&mut g.ln1_beta, &dbeta1);
    let d_context = affine_backward(&d_pre1, &trace.context, &lw.w_o, &mut g.w_o, &mut g.b_o)?;
    let mut dx = d_pre1;

    let m = trace.input.rows();
    let dk = cfg.head_dim();
    let scale = T::one() / T::lit(dk as f64).sqrt();
    let mut dq = Matrix::zeros(m, cfg.d_model);
    let mut dkm = Matrix::zeros(m, cfg.d_model);
    let mut dv = Matrix::zeros(m, cfg.d_model);
    let mut d_scores = vec![T::zero(); m];
    for (head, probs) in trace.probs.iter().enumerate() {
        let cols = head * dk..(head + 1) * dk;
        for i in 0..m {
            let p = probs.row(i);
            let dc = &d_context.row(i)[cols.clone()];
            // dP_ij = dc_i · v_j, plus any direct gradient on the weights.
            let mut weighted = T::zero();
            for j in 0..m {
                if p[j] == T::zero() {
                    d_scores[j] = T::zero();
                    continue;
                }
                let vj = &trace.v.row(j)[cols.clone()];
                let mut dp = T::zero();
                for (&a, &b) in dc.iter().zip(vj) {
                    dp += a * b;
                }
                if let Some(extra) = d_probs {
                    dp += extra[head].get(i, j);
                }
                d_scores[j] = dp;
                weighted += p[j] * dp;
                let dvj = &mut dv.row_mut(j)[cols.clone()];
                for (o, &c) in dvj.iter_mut().zip(dc) {
                    *o += p[j] * c;
                }
            }
            for j in 0..m {
                if p[j] == T::zero() {
                    continue;
                }
                let ds = p[j] * (d_scores[j] - weighted) * scale;
                let kj = &trace.k.row(j)[cols.clone()];
                let dqi = &mut dq.row_mut(i)[cols.clone()];
                for (o, &kv) in dqi.iter_mut().zip(kj) {
                    *o += ds * kv;
                }
                let qi = &trace.q.row(i)[cols.clone()];
                let dkj = &mut dkm.row_mut(j)[cols.clone()];
                for (o, &qv) in dkj.iter_mut().zip(qi) {
                    *o += ds * qv;
                }
            }
        }
    }
    dx.add_assign(&affine_backward(&dq, &trace.input, &lw.w_q, &mut g.w_q, &mut g.b_q)?)?;
    dx.add_assign(&affine_backward(&dkm, &trace.input, &lw.w_k, &mut g.w_k, &mut g.b_k)?)?;
    dx.add_assign(&affine_backward(&dv, &trace.input, &lw.w_v, &mut g.w_v, &mut g.b_v)?)?;
    Ok(dx)
}

/// How far the reverse pass goes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Scope {
    /// Every parameter, down to the embeddings.
    All,
    /// Stop once the compressor gradients are known.
    Compressor,
}

/// Accumulates into `g` the gradient of a scalar whose derivative with
/// respect to the final `[CLS]` row is `d_cls`, plus optional direct
/// gradients on the attention weights of each layer (`d_attn[i]` belongs to
/// layer `i + 1`; empty entries are skipped).
pub(crate) fn sequence_backward<T: Real>(
    seq: &EncodedSequence,
    trace: &SequenceTrace<T>,
    d_cls: &[T],
    d_attn: Option<&[Vec<Matrix<T>>]>,
    w: &Weights<T>,
    cfg: &ModelConfig,
    g: &mut Weights<T>,
    scope: Scope,
) -> Result<()> {
    let m = seq.len();
    let mut dx = Matrix::zeros(m, cfg.d_model);
    dx.row_mut(0).copy_from_slice(d_cls);
    for layer in (1..=cfg.n_layers).rev() {
        let extra = d_attn
            .and_then(|a| a.get(layer - 1))
            .filter(|v| !v.is_empty())
            .map(Vec::as_slice);
        dx = layer_backward(
            &dx,
            extra,
            &trace.layers[layer - 1],
            &w.layers[layer - 1],
            cfg,
            &mut g.layers[layer - 1],
        )?;
        if layer == cfg.split_layer + 1 {
            if let (Some(ct), Some(comp), Some(gc)) = (&trace.compression, &w.compressor, &mut g.compressor) {
                restore_rows_backward(&mut dx, ct, comp, gc)?;
                if scope == Scope::Compressor {
                    return Ok(());
                }
            }
        }
    }
    if scope == Scope::Compressor {
        return Ok(());
    }

    let (d_sum, dgamma, dbeta) = layer_norm_backward(&dx, &trace.emb_norm, w.emb_ln_gamma.data());
    acc_vec(&mut g.emb_ln_gamma, &dgamma);
    acc_vec(&mut g.emb_ln_beta, &dbeta);
    for i in 0..m {
        let row = d_sum.row(i);
        let targets = [
            (&mut g.token_emb, seq.token_ids[i] as usize),
            (&mut g.segment_emb, seq.segment_ids[i].index()),
            (&mut g.position_emb, seq.position_ids[i] as usize),
        ];
        for (table, idx) in targets {
            for (o, &v) in table.row_mut(idx).iter_mut().zip(row) {
                *o += v;
            }
        }
    }
    Ok(())
}
