//! Builders shared by the integration tests and the acceptance run.

#![allow(dead_code)]

use prettr::model::{Model, ModelConfig};
use prettr::tensor::Matrix;
use prettr::train::TrainPair;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn config(n: usize, l: usize, d: usize, h: usize, comp: Option<usize>) -> ModelConfig {
    ModelConfig {
        n_layers: n,
        d_model: d,
        n_heads: h,
        d_ff: 2 * d,
        vocab_size: 512,
        max_len: 40,
        q_max: 6,
        split_layer: l,
        comp_dim: comp,
    }
}

/// A freshly initialized model with every parameter shifted by Gaussian
/// noise, so scores and gradients are far from the near-zero values of the
/// default initialization.
pub fn noisy_model(cfg: ModelConfig, seed: u64, sigma: f64) -> Model {
    let base = Model::init(cfg.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let noise = Normal::new(0.0, sigma).unwrap();
    let w = base.weights().map(|m: &Matrix| {
        let data = m.data().iter().map(|v| v + noise.sample(&mut rng) as f32).collect();
        Matrix::from_vec(m.rows(), m.cols(), data).unwrap()
    });
    Model::new(cfg, w).unwrap()
}

pub fn tokens(rng: &mut impl Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(8..vocab as u32)).collect()
}

/// Query and document of random lengths that fit `cfg`.
pub fn query_doc(rng: &mut impl Rng, cfg: &ModelConfig) -> (Vec<u32>, Vec<u32>) {
    let q = rng.gen_range(1..=cfg.q_max);
    let d = rng.gen_range(1..=cfg.max_doc_tokens());
    (tokens(rng, q, cfg.vocab_size), tokens(rng, d, cfg.vocab_size))
}

pub fn train_pair(rng: &mut impl Rng, cfg: &ModelConfig) -> TrainPair {
    let (query, pos) = query_doc(rng, cfg);
    loop {
        let neg_len = rng.gen_range(1..=cfg.max_doc_tokens());
        let neg = tokens(rng, neg_len, cfg.vocab_size);
        if neg != pos {
            return TrainPair { query, pos, neg };
        }
    }
}

/// Pairs `(i, j)` ordered one way by `a` and the other way by `b`.
pub fn inversions(a: &[f32], b: &[f32]) -> usize {
    let mut n = 0;
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let x = (a[i] - a[j]).signum();
            let y = (b[i] - b[j]).signum();
            if x * y < 0.0 {
                n += 1;
            }
        }
    }
    n
}
