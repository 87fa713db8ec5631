//! An independent straight-line encoder in plain `f64` loops, checked
//! against the library's full and split paths.

mod common;

use prettr::model::{EncodedSequence, ForwardOptions, Model, Side, Weights};
use prettr::split::{encode_query, full_forward_score, join_and_score, precompute_doc};
use prettr::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{config, noisy_model, query_doc};

type Rows = Vec<Vec<f64>>;

fn rows(m: &Matrix) -> Rows {
    (0..m.rows()).map(|i| m.row(i).iter().map(|&v| v as f64).collect()).collect()
}

fn vector(m: &Matrix) -> Vec<f64> {
    m.data().iter().map(|&v| v as f64).collect()
}

fn affine(x: &Rows, w: &Matrix, b: &Matrix) -> Rows {
    let (w, b) = (rows(w), vector(b));
    x.iter()
        .map(|r| (0..b.len()).map(|j| b[j] + r.iter().enumerate().map(|(k, v)| v * w[k][j]).sum::<f64>()).collect())
        .collect()
}

fn norm(x: &Rows, g: &Matrix, b: &Matrix) -> Rows {
    let (g, b) = (vector(g), vector(b));
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            r.iter().enumerate().map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[j] + b[j]).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn is_query(s: Side) -> bool {
    matches!(s, Side::ClsQ | Side::Query | Side::SepQ)
}

fn allowed(sides: &[Side], i: usize, j: usize, split: bool) -> bool {
    if sides[i] == Side::Pad || sides[j] == Side::Pad {
        return i == j;
    }
    !split || is_query(sides[i]) == is_query(sides[j])
}

fn score(seq: &EncodedSequence, w: &Weights, l: usize, heads: usize) -> f64 {
    let (tok, seg, pos) = (rows(&w.token_emb), rows(&w.segment_emb), rows(&w.position_emb));
    let mut x: Rows = (0..seq.len())
        .map(|i| {
            let (t, s, p) = (
                seq.token_ids[i] as usize,
                seq.segment_ids[i].index(),
                seq.position_ids[i] as usize,
            );
            (0..tok[0].len()).map(|c| tok[t][c] + seg[s][c] + pos[p][c]).collect()
        })
        .collect();
    x = norm(&x, &w.emb_ln_gamma, &w.emb_ln_beta);
    let d = x[0].len();
    let dk = d / heads;
    for (idx, lw) in w.layers.iter().enumerate() {
        let layer = idx + 1;
        if layer == l + 1 {
            if let Some(c) = &w.compressor {
                let doc: Vec<usize> = (0..seq.len()).filter(|&i| matches!(seq.sides[i], Side::Doc | Side::SepD)).collect();
                let picked: Rows = doc.iter().map(|&i| x[i].clone()).collect();
                let r: Rows = affine(&picked, &c.w_comp, &c.b_comp)
                    .into_iter()
                    .map(|row| row.into_iter().map(gelu).collect())
                    .collect();
                let restored = norm(&affine(&r, &c.w_decomp, &c.b_decomp), &c.ln_gamma, &c.ln_beta);
                for (k, &i) in doc.iter().enumerate() {
                    x[i] = restored[k].clone();
                }
            }
        }
        let split = layer <= l;
        let (q, k, v) = (affine(&x, &lw.w_q, &lw.b_q), affine(&x, &lw.w_k, &lw.b_k), affine(&x, &lw.w_v, &lw.b_v));
        let mut ctx = vec![vec![0.0; d]; x.len()];
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            for i in 0..x.len() {
                let logits: Vec<Option<f64>> = (0..x.len())
                    .map(|j| {
                        allowed(&seq.sides, i, j, split).then(|| {
                            cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt()
                        })
                    })
                    .collect();
                let top = logits.iter().flatten().fold(f64::MIN, |a, &b| a.max(b));
                let z: f64 = logits.iter().flatten().map(|s| (s - top).exp()).sum();
                for (j, s) in logits.iter().enumerate() {
                    if let Some(s) = s {
                        let p = (s - top).exp() / z;
                        for c in cols.clone() {
                            ctx[i][c] += p * v[j][c];
                        }
                    }
                }
            }
        }
        let h1 = norm(&add(&x, &affine(&ctx, &lw.w_o, &lw.b_o)), &lw.ln1_gamma, &lw.ln1_beta);
        let inner: Rows = affine(&h1, &lw.w_ff1, &lw.b_ff1)
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        x = norm(&add(&h1, &affine(&inner, &lw.w_ff2, &lw.b_ff2)), &lw.ln2_gamma, &lw.ln2_beta);
    }
    let wc = vector(&w.w_combine);
    x[0].iter().zip(&wc).map(|(a, b)| a * b).sum()
}

#[test]
fn library_matches_the_straight_line_encoder() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in [1, 2, 3] {
        for l in 0..=n {
            for comp in [None, Some(4)] {
                let model: Model = noisy_model(config(n, l, 16, 2, comp), rng.gen(), 0.1);
                let (q, doc) = query_doc(&mut rng, model.config());
                let seq = EncodedSequence::pair(&q, &doc, model.config()).unwrap();
                let want = score(&seq, model.weights(), l, 2);
                let full = full_forward_score(&q, &doc, &model, ForwardOptions::default()).unwrap() as f64;
                let split = join_and_score(
                    &encode_query(&q, &model).unwrap(),
                    &precompute_doc(&doc, &model).unwrap(),
                    &model,
                    true,
                )
                .unwrap() as f64;
                assert!((full - want).abs() <= 1e-5 * (1.0 + want.abs()), "n={n} l={l}: full {full} vs {want}");
                assert!((split - want).abs() <= 1e-5 * (1.0 + want.abs()), "n={n} l={l}: split {split} vs {want}");
            }
        }
    }
}

#[test]
fn padding_never_leaks_into_the_score() {
    let model = noisy_model(config(2, 1, 16, 2, None), 5, 0.1);
    let q = vec![100, 200];
    let doc = vec![300, 301, 302];
    let base = full_forward_score(&q, &doc, &model, ForwardOptions::default()).unwrap();
    let mut w = model.weights().clone();
    let pad = w.token_emb.row_mut(0);
    pad.iter_mut().for_each(|v| *v += 5.0);
    let shifted = Model::new(model.config().clone(), w).unwrap();
    let after = full_forward_score(&q, &doc, &shifted, ForwardOptions::default()).unwrap();
    assert_eq!(base, after);
}
