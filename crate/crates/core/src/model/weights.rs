use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::model::ModelConfig;
use crate::tensor::{Matrix, Real};

/// Standard deviation of the truncated normal used for every weight matrix.
pub const INIT_STD: f64 = 0.02;

/// One encoder layer. Biases and norm parameters are stored as `1 × n`
/// matrices so every parameter can be visited uniformly.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T = f32> {
    pub w_q: Matrix<T>,
    pub b_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub b_k: Matrix<T>,
    pub w_v: Matrix<T>,
    pub b_v: Matrix<T>,
    pub w_o: Matrix<T>,
    pub b_o: Matrix<T>,
    pub ln1_gamma: Matrix<T>,
    pub ln1_beta: Matrix<T>,
    pub w_ff1: Matrix<T>,
    pub b_ff1: Matrix<T>,
    pub w_ff2: Matrix<T>,
    pub b_ff2: Matrix<T>,
    pub ln2_gamma: Matrix<T>,
    pub ln2_beta: Matrix<T>,
}

/// Document-representation compressor inserted after the split layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressorWeights<T = f32> {
    pub w_comp: Matrix<T>,
    pub b_comp: Matrix<T>,
    pub w_decomp: Matrix<T>,
    pub b_decomp: Matrix<T>,
    pub ln_gamma: Matrix<T>,
    pub ln_beta: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T = f32> {
    pub token_emb: Matrix<T>,
    pub segment_emb: Matrix<T>,
    pub position_emb: Matrix<T>,
    pub emb_ln_gamma: Matrix<T>,
    pub emb_ln_beta: Matrix<T>,
    pub layers: Vec<LayerWeights<T>>,
    /// `d × 1` projection of the final `[CLS]` representation to a score.
    pub w_combine: Matrix<T>,
    pub compressor: Option<CompressorWeights<T>>,
}

/// Normal sample redrawn until it falls within ±2σ.
fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

fn normal<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix<T> {
    let data = (0..rows * cols)
        .map(|_| T::lit(truncated_normal(rng, INIT_STD)))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

fn zeros<T: Real>(n: usize) -> Matrix<T> {
    Matrix::zeros(1, n)
}

fn ones<T: Real>(n: usize) -> Matrix<T> {
    Matrix::filled(1, n, T::one())
}

impl<T: Real> LayerWeights<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        Self::build(cfg, &mut |r, c| normal(r, c, rng))
    }

    fn build(cfg: &ModelConfig, weight: &mut impl FnMut(usize, usize) -> Matrix<T>) -> Self {
        let d = cfg.d_model;
        Self {
            w_q: weight(d, d),
            b_q: zeros(d),
            w_k: weight(d, d),
            b_k: zeros(d),
            w_v: weight(d, d),
            b_v: zeros(d),
            w_o: weight(d, d),
            b_o: zeros(d),
            ln1_gamma: ones(d),
            ln1_beta: zeros(d),
            w_ff1: weight(d, cfg.d_ff),
            b_ff1: zeros(cfg.d_ff),
            w_ff2: weight(cfg.d_ff, d),
            b_ff2: zeros(d),
            ln2_gamma: ones(d),
            ln2_beta: zeros(d),
        }
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<T>)>) {
        for (name, m) in [
            ("w_q", &self.w_q),
            ("b_q", &self.b_q),
            ("w_k", &self.w_k),
            ("b_k", &self.b_k),
            ("w_v", &self.w_v),
            ("b_v", &self.b_v),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
            ("ln1_gamma", &self.ln1_gamma),
            ("ln1_beta", &self.ln1_beta),
            ("w_ff1", &self.w_ff1),
            ("b_ff1", &self.b_ff1),
            ("w_ff2", &self.w_ff2),
            ("b_ff2", &self.b_ff2),
            ("ln2_gamma", &self.ln2_gamma),
            ("ln2_beta", &self.ln2_beta),
        ] {
            out.push((format!("{prefix}.{name}"), m));
        }
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix<T>>) {
        let Self {
            w_q,
            b_q,
            w_k,
            b_k,
            w_v,
            b_v,
            w_o,
            b_o,
            ln1_gamma,
            ln1_beta,
            w_ff1,
            b_ff1,
            w_ff2,
            b_ff2,
            ln2_gamma,
            ln2_beta,
        } = self;
        out.extend([
            w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o, ln1_gamma, ln1_beta, w_ff1, b_ff1, w_ff2,
            b_ff2, ln2_gamma, ln2_beta,
        ]);
    }

    fn map<U: Real>(&self, f: &mut impl FnMut(&Matrix<T>) -> Matrix<U>) -> LayerWeights<U> {
        LayerWeights {
            w_q: f(&self.w_q),
            b_q: f(&self.b_q),
            w_k: f(&self.w_k),
            b_k: f(&self.b_k),
            w_v: f(&self.w_v),
            b_v: f(&self.b_v),
            w_o: f(&self.w_o),
            b_o: f(&self.b_o),
            ln1_gamma: f(&self.ln1_gamma),
            ln1_beta: f(&self.ln1_beta),
            w_ff1: f(&self.w_ff1),
            b_ff1: f(&self.b_ff1),
            w_ff2: f(&self.w_ff2),
            b_ff2: f(&self.b_ff2),
            ln2_gamma: f(&self.ln2_gamma),
            ln2_beta: f(&self.ln2_beta),
        }
    }
}

impl<T: Real> CompressorWeights<T> {
    pub fn init<R: Rng + ?Sized>(d: usize, e: usize, rng: &mut R) -> Self {
        Self::build(d, e, &mut |r, c| normal(r, c, rng))
    }

    fn build(d: usize, e: usize, weight: &mut impl FnMut(usize, usize) -> Matrix<T>) -> Self {
        Self {
            w_comp: weight(d, e),
            b_comp: zeros(e),
            w_decomp: weight(e, d),
            b_decomp: zeros(d),
            ln_gamma: ones(d),
            ln_beta: zeros(d),
        }
    }

    /// A near-lossless compressor for `e == d`: the input is shifted far into
    /// GELU's linear regime and shifted back after decompression.
    pub fn near_identity(d: usize, shift: f64) -> Self {
        Self {
            w_comp: Matrix::identity(d),
            b_comp: Matrix::filled(1, d, T::lit(shift)),
            w_decomp: Matrix::identity(d),
            b_decomp: Matrix::filled(1, d, T::lit(-shift)),
            ln_gamma: ones(d),
            ln_beta: zeros(d),
        }
    }

    pub fn comp_dim(&self) -> usize {
        self.w_comp.cols()
    }

    pub fn named_params(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = Vec::new();
        self.named("compressor", &mut out);
        out
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<T>)>) {
        for (name, m) in [
            ("w_comp", &self.w_comp),
            ("b_comp", &self.b_comp),
            ("w_decomp", &self.w_decomp),
            ("b_decomp", &self.b_decomp),
            ("ln_gamma", &self.ln_gamma),
            ("ln_beta", &self.ln_beta),
        ] {
            out.push((format!("{prefix}.{name}"), m));
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let Self {
            w_comp,
            b_comp,
            w_decomp,
            b_decomp,
            ln_gamma,
            ln_beta,
        } = self;
        vec![w_comp, b_comp, w_decomp, b_decomp, ln_gamma, ln_beta]
    }

    pub fn map<U: Real>(&self, f: &mut impl FnMut(&Matrix<T>) -> Matrix<U>) -> CompressorWeights<U> {
        CompressorWeights {
            w_comp: f(&self.w_comp),
            b_comp: f(&self.b_comp),
            w_decomp: f(&self.w_decomp),
            b_decomp: f(&self.b_decomp),
            ln_gamma: f(&self.ln_gamma),
            ln_beta: f(&self.ln_beta),
        }
    }

    pub fn zeros_like(&self) -> Self {
        self.map(&mut |m| Matrix::zeros(m.rows(), m.cols()))
    }
}

impl<T: Real> Weights<T> {
    /// Random initialization: truncated normal (σ = 0.02) weights, zero
    /// biases, unit norm gains.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        Self::build(cfg, &mut |r, c| normal(r, c, rng))
    }

    /// All weight matrices zero, norm gains one.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::build(cfg, &mut |r, c| Matrix::zeros(r, c))
    }

    fn build(cfg: &ModelConfig, weight: &mut impl FnMut(usize, usize) -> Matrix<T>) -> Self {
        let d = cfg.d_model;
        Self {
            token_emb: weight(cfg.vocab_size, d),
            segment_emb: weight(2, d),
            position_emb: weight(cfg.max_len, d),
            emb_ln_gamma: ones(d),
            emb_ln_beta: zeros(d),
            layers: (0..cfg.n_layers).map(|_| LayerWeights::build(cfg, weight)).collect(),
            w_combine: weight(d, 1),
            compressor: cfg.comp_dim.map(|e| CompressorWeights::build(d, e, weight)),
        }
    }

    /// Every parameter with a stable dotted name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = vec![
            ("embeddings.token".to_string(), &self.token_emb),
            ("embeddings.segment".to_string(), &self.segment_emb),
            ("embeddings.position".to_string(), &self.position_emb),
            ("embeddings.ln_gamma".to_string(), &self.emb_ln_gamma),
            ("embeddings.ln_beta".to_string(), &self.emb_ln_beta),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            layer.named(&format!("layers.{i}"), &mut out);
        }
        out.push(("w_combine".to_string(), &self.w_combine));
        if let Some(c) = &self.compressor {
            c.named("compressor", &mut out);
        }
        out
    }

    /// Mutable views in the same order as [`Weights::named_params`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let Self {
            token_emb,
            segment_emb,
            position_emb,
            emb_ln_gamma,
            emb_ln_beta,
            layers,
            w_combine,
            compressor,
        } = self;
        let mut out = vec![token_emb, segment_emb, position_emb, emb_ln_gamma, emb_ln_beta];
        for layer in layers.iter_mut() {
            layer.tensors_mut(&mut out);
        }
        out.push(w_combine);
        if let Some(c) = compressor {
            out.extend(c.tensors_mut());
        }
        out
    }

    pub fn map<U: Real>(&self, mut f: impl FnMut(&Matrix<T>) -> Matrix<U>) -> Weights<U> {
        Weights {
            token_emb: f(&self.token_emb),
            segment_emb: f(&self.segment_emb),
            position_emb: f(&self.position_emb),
            emb_ln_gamma: f(&self.emb_ln_gamma),
            emb_ln_beta: f(&self.emb_ln_beta),
            layers: self.layers.iter().map(|l| l.map(&mut f)).collect(),
            w_combine: f(&self.w_combine),
            compressor: self.compressor.as_ref().map(|c| c.map(&mut f)),
        }
    }

    pub fn cast<U: Real>(&self) -> Weights<U> {
        self.map(|m| m.cast())
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|m| Matrix::zeros(m.rows(), m.cols()))
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, m)| m.data().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_params().iter().all(|(_, m)| m.is_finite())
    }

    /// Checks every tensor against the shapes `cfg` implies.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> crate::Result<()> {
        let reference = Weights::<T>::zeros(cfg);
        let want: Vec<_> = reference.named_params().into_iter().map(|(n, m)| (n, m.shape())).collect();
        let got: Vec<_> = self.named_params().into_iter().map(|(n, m)| (n, m.shape())).collect();
        if want != got {
            return Err(crate::Error::shape(
                "Weights::check_shapes",
                "tensor names or shapes do not match the configuration",
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_respects_truncation_and_shapes() {
        let cfg = ModelConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let w = Weights::<f32>::init(&cfg, &mut rng);
        w.check_shapes(&cfg).unwrap();
        assert!(w.token_emb.data().iter().all(|v| v.abs() <= 0.04 + 1e-7));
        assert!(w.layers[0].b_q.data().iter().all(|&v| v == 0.0));
        assert!(w.layers[1].ln2_gamma.data().iter().all(|&v| v == 1.0));
        let sd = {
            let xs = w.token_emb.data();
            let mean = xs.iter().sum::<f32>() / xs.len() as f32;
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f32>() / xs.len() as f32).sqrt()
        };
        // ±2σ truncation shrinks the standard deviation to about 0.88σ.
        assert!((sd - 0.0176).abs() < 0.001, "{sd}");
    }

    #[test]
    fn named_and_mutable_views_line_up() {
        let cfg = ModelConfig::default();
        let mut w = Weights::<f32>::init(&cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        let shapes: Vec<_> = w.named_params().iter().map(|(_, m)| m.shape()).collect();
        let mut_shapes: Vec<_> = w.tensors_mut().iter().map(|m| m.shape()).collect();
        assert_eq!(shapes, mut_shapes);
        let names: std::collections::HashSet<_> = w.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), shapes.len());
    }
}
