//! Hand-derived gradients against central finite differences in f64.

mod common;

use prettr::model::{EncodedSequence, ModelConfig, Weights};
use prettr::compression::attention_match_grads;
use prettr::tensor::Matrix;
use prettr::train::{grads, pair_loss, relative_error, TrainPair};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{noisy_model, train_pair};

fn tiny(l: usize, comp: Option<usize>) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab_size: 24,
        max_len: 12,
        q_max: 3,
        split_layer: l,
        comp_dim: comp,
    }
}

/// Central differences of `loss` for every element of tensor `t`.
fn numeric(w: &Weights<f64>, t: usize, loss: &dyn Fn(&Weights<f64>) -> f64) -> Matrix<f64> {
    let step = 1e-3;
    let (r, c) = w.named_params()[t].1.shape();
    let data = (0..r * c)
        .map(|i| {
            let mut plus = w.clone();
            plus.tensors_mut()[t].data_mut()[i] += step;
            let mut minus = w.clone();
            minus.tensors_mut()[t].data_mut()[i] -= step;
            (loss(&plus) - loss(&minus)) / (2.0 * step)
        })
        .collect();
    Matrix::from_vec(r, c, data).unwrap()
}

fn norm(m: &Matrix<f64>) -> f64 {
    m.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn ranking_gradient_matches_finite_differences() {
    for l in 0..=2 {
        for comp in [None, Some(4)] {
            let cfg = tiny(l, comp);
            let w = noisy_model(cfg.clone(), 100 + l as u64, 0.3).weights().cast::<f64>();
            let mut rng = ChaCha8Rng::seed_from_u64(l as u64);
            let batch: Vec<TrainPair> = (0..2).map(|_| train_pair(&mut rng, &cfg)).collect();
            let loss = |w: &Weights<f64>| batch.iter().map(|p| pair_loss(w, p, &cfg).unwrap()).sum::<f64>() / 2.0;
            let (value, g) = grads(&w, &batch, &cfg).unwrap();
            assert!((value - loss(&w)).abs() < 1e-12);
            if l == cfg.n_layers {
                // The document cannot reach the score, so the pair is tied
                // and nothing moves.
                assert!(g.named_params().iter().all(|(_, a)| norm(a) < 1e-12));
                continue;
            }
            for (t, (name, a)) in g.named_params().into_iter().enumerate() {
                let b = numeric(&w, t, &loss);
                if norm(a).max(norm(&b)) < 1e-8 {
                    // Key biases shift every logit of a row equally; the last
                    // norm's beta shifts both scores of a pair equally.
                    let expected = name.ends_with("b_k") || name == "layers.1.ln2_beta";
                    assert!(expected, "{name} has no gradient (l={l})");
                    continue;
                }
                let err = relative_error(a, &b);
                assert!(err <= 1e-3, "l={l} comp={comp:?} {name}: relative error {err:e}");
            }
        }
    }
}

#[test]
fn attention_match_gradient_matches_finite_differences() {
    for l in 0..2 {
        let cfg = tiny(l, Some(4));
        let w = noisy_model(cfg.clone(), 7 + l as u64, 0.3).weights().cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = train_pair(&mut rng, &cfg);
        let seq = EncodedSequence::pair(&p.query, &p.pos, &cfg).unwrap();
        let (_, g) = attention_match_grads(&seq, &w, &cfg).unwrap();
        let offset = w.named_params().len() - g.named_params().len();
        let loss = |w: &Weights<f64>| attention_match_grads(&seq, w, &cfg).unwrap().0;
        for (t, (name, a)) in g.named_params().into_iter().enumerate() {
            let b = numeric(&w, offset + t, &loss);
            assert!(norm(&b) > 1e-8, "{name} should matter");
            let err = relative_error(a, &b);
            assert!(err <= 1e-3, "l={l} {name}: relative error {err:e}");
        }
    }
}
