//! Document-representation compression between the split layer and the
//! next one.
//!
//! `r = gelu(s_l · W_comp + b_comp)` is what gets stored; at query time
//! `ŝ_l = layer_norm(r · W_decomp + b_decomp)` replaces `s_l`. The pair is
//! pre-trained to keep the attention of the remaining layers unchanged, see
//! [`pretrain_compressor`].

mod pretrain;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionTensor, CompressorWeights};
use crate::tensor::f16::{from_half, to_half, f16};
use crate::tensor::{
    gelu_derivative, gelu_scalar, layer_norm_backward, layer_norm_traced, matmul,
    matmul_transpose_a, matmul_transpose_b, Matrix, NormTrace, Real, LN_EPS,
};

pub use pretrain::{
    attention_match_grads, build_text_pairs, pretrain_compressor, PretrainConfig, PretrainOutcome, TextPair,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F16,
}

impl Precision {
    /// Code used in the store header.
    pub fn code(self) -> u8 {
        match self {
            Precision::F32 => 1,
            Precision::F16 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Precision::F32),
            2 => Some(Precision::F16),
            _ => None,
        }
    }

    pub fn bytes_per_value(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F16 => 2,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f16" => Ok(Precision::F16),
            other => Err(Error::Config(format!("unknown precision {other:?}, expected f32 or f16"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RepValues {
    F32(Vec<f32>),
    F16(Vec<f16>),
}

/// Per-token document representations as stored: `rows × width` values in
/// one of two precisions.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedReps {
    rows: usize,
    width: usize,
    values: RepValues,
}

impl CompressedReps {
    pub fn from_matrix(m: Matrix) -> Self {
        let (rows, width) = m.shape();
        Self {
            rows,
            width,
            values: RepValues::F32(m.into_vec()),
        }
    }

    pub fn new(rows: usize, width: usize, values: RepValues) -> Result<Self> {
        let len = match &values {
            RepValues::F32(v) => v.len(),
            RepValues::F16(v) => v.len(),
        };
        if len != rows * width {
            return Err(Error::shape(
                "CompressedReps::new",
                format!("{len} values for {rows}x{width}"),
            ));
        }
        Ok(Self { rows, width, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &RepValues {
        &self.values
    }

    pub fn precision(&self) -> Precision {
        match self.values {
            RepValues::F32(_) => Precision::F32,
            RepValues::F16(_) => Precision::F16,
        }
    }

    pub fn payload_bytes(&self) -> usize {
        self.rows * self.width * self.precision().bytes_per_value()
    }

    /// Working-precision copy of the values.
    pub fn to_matrix(&self) -> Matrix {
        let data = match &self.values {
            RepValues::F32(v) => v.clone(),
            RepValues::F16(v) => from_half(v),
        };
        Matrix::from_vec(self.rows, self.width, data).expect("validated on construction")
    }
}

/// Half-precision copy of `reps` and the number of values that had to be
/// clamped to the binary16 range.
pub fn quantize_reps(reps: &CompressedReps) -> (CompressedReps, usize) {
    match &reps.values {
        RepValues::F16(_) => (reps.clone(), 0),
        RepValues::F32(v) => {
            let h = to_half(v);
            (
                CompressedReps {
                    rows: reps.rows,
                    width: reps.width,
                    values: RepValues::F16(h.values),
                },
                h.clamped,
            )
        }
    }
}

pub fn widen_reps(reps: &CompressedReps) -> CompressedReps {
    CompressedReps::from_matrix(reps.to_matrix())
}

fn affine<T: Real>(x: &Matrix<T>, w: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = matmul(x, w)?;
    out.add_row_bias(b.data())?;
    Ok(out)
}

pub(crate) fn compress_matrix<T: Real>(s: &Matrix<T>, comp: &CompressorWeights<T>) -> Result<Matrix<T>> {
    Ok(affine(s, &comp.w_comp, &comp.b_comp)?.map(gelu_scalar))
}

pub(crate) fn decompress_matrix<T: Real>(r: &Matrix<T>, comp: &CompressorWeights<T>) -> Result<Matrix<T>> {
    let pre = affine(r, &comp.w_decomp, &comp.b_decomp)?;
    let (out, _) = layer_norm_traced(&pre, comp.ln_gamma.data(), comp.ln_beta.data(), T::lit(LN_EPS))?;
    Ok(out)
}

/// `gelu(s_l · W_comp + b_comp)`, kept in full precision.
pub fn compress(s_l: &Matrix, comp: &CompressorWeights) -> Result<CompressedReps> {
    Ok(CompressedReps::from_matrix(compress_matrix(s_l, comp)?))
}

/// `layer_norm(r · W_decomp + b_decomp)`; half-precision input is widened
/// first.
pub fn decompress(r: &CompressedReps, comp: &CompressorWeights) -> Result<Matrix> {
    if r.width != comp.comp_dim() {
        return Err(Error::shape(
            "decompress",
            format!("width {} vs compressor dimension {}", r.width, comp.comp_dim()),
        ));
    }
    decompress_matrix(&r.to_matrix(), comp)
}

/// Intermediates of compress → decompress over a subset of rows.
#[derive(Clone, Debug)]
pub(crate) struct CompressionTrace<T> {
    pub rows: Vec<usize>,
    pub input: Matrix<T>,
    pub pre_comp: Matrix<T>,
    pub compressed: Matrix<T>,
    pub norm: NormTrace<T>,
}

/// Replaces `rows` of `x` by their compressed-then-restored version.
pub(crate) fn restore_rows<T: Real>(x: &Matrix<T>, rows: &[usize], comp: &CompressorWeights<T>) -> Result<Matrix<T>> {
    restore_rows_traced(x, rows, comp).map(|(m, _)| m)
}

pub(crate) fn restore_rows_traced<T: Real>(
    x: &Matrix<T>,
    rows: &[usize],
    comp: &CompressorWeights<T>,
) -> Result<(Matrix<T>, CompressionTrace<T>)> {
    let input = x.select_rows(rows);
    let pre_comp = affine(&input, &comp.w_comp, &comp.b_comp)?;
    let compressed = pre_comp.map(gelu_scalar);
    let pre = affine(&compressed, &comp.w_decomp, &comp.b_decomp)?;
    let (restored, norm) = layer_norm_traced(&pre, comp.ln_gamma.data(), comp.ln_beta.data(), T::lit(LN_EPS))?;
    let mut out = x.clone();
    for (k, &r) in rows.iter().enumerate() {
        out.row_mut(r).copy_from_slice(restored.row(k));
    }
    Ok((
        out,
        CompressionTrace {
            rows: rows.to_vec(),
            input,
            pre_comp,
            compressed,
            norm,
        },
    ))
}

fn accumulate<T: Real>(dst: &mut Matrix<T>, src: &Matrix<T>) {
    dst.add_assign(src).expect("gradient shapes mirror parameters");
}

fn accumulate_vec<T: Real>(dst: &mut Matrix<T>, src: &[T]) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src) {
        *d += s;
    }
}

/// Backward through [`restore_rows_traced`]. `dx` is the gradient with
/// respect to the restored matrix; on return the traced rows hold the
/// gradient with respect to the original `s_l` rows.
pub(crate) fn restore_rows_backward<T: Real>(
    dx: &mut Matrix<T>,
    trace: &CompressionTrace<T>,
    comp: &CompressorWeights<T>,
    g: &mut CompressorWeights<T>,
) -> Result<()> {
    let d_restored = dx.select_rows(&trace.rows);
    let (d_pre, dgamma, dbeta) = layer_norm_backward(&d_restored, &trace.norm, comp.ln_gamma.data());
    accumulate_vec(&mut g.ln_gamma, &dgamma);
    accumulate_vec(&mut g.ln_beta, &dbeta);
    accumulate(&mut g.w_decomp, &matmul_transpose_a(&trace.compressed, &d_pre)?);
    accumulate_vec(&mut g.b_decomp, &d_pre.column_sums());
    let mut d_comp = matmul_transpose_b(&d_pre, &comp.w_decomp)?;
    for (dv, &p) in d_comp.data_mut().iter_mut().zip(trace.pre_comp.data()) {
        *dv *= gelu_derivative(p);
    }
    accumulate(&mut g.w_comp, &matmul_transpose_a(&trace.input, &d_comp)?);
    accumulate_vec(&mut g.b_comp, &d_comp.column_sums());
    let d_input = matmul_transpose_b(&d_comp, &comp.w_comp)?;
    for (k, &r) in trace.rows.iter().enumerate() {
        dx.row_mut(r).copy_from_slice(d_input.row(k));
    }
    Ok(())
}

fn check_attention_shapes<T: Real>(orig: &[AttentionTensor<T>], comp: &[AttentionTensor<T>]) -> Result<()> {
    let shape = |a: &[AttentionTensor<T>]| -> Vec<Vec<(usize, usize)>> {
        a.iter().map(|layer| layer.iter().map(Matrix::shape).collect()).collect()
    };
    if shape(orig) != shape(comp) {
        return Err(Error::invalid("attention tensors differ in shape"));
    }
    if orig.is_empty() {
        return Err(Error::invalid("no layers after the split to compare"));
    }
    Ok(())
}

/// Mean over layers of the per-layer mean squared difference between two
/// post-softmax attention tensors. Each layer's MSE averages uniformly over
/// all `h × m × m` entries.
pub fn attention_match_loss<T: Real>(orig: &[AttentionTensor<T>], comp: &[AttentionTensor<T>]) -> Result<T> {
    check_attention_shapes(orig, comp)?;
    let mut total = 0.0f64;
    for (a_layer, c_layer) in orig.iter().zip(comp) {
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for (a, c) in a_layer.iter().zip(c_layer) {
            for (&x, &y) in a.data().iter().zip(c.data()) {
                let diff = (y - x).as_f64();
                sum += diff * diff;
            }
            count += a.data().len();
        }
        total += sum / count as f64;
    }
    Ok(T::lit(total / orig.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn comp(d: usize, e: usize, seed: u64) -> CompressorWeights {
        CompressorWeights {
            w_comp: random(d, e, seed),
            b_comp: random(1, e, seed + 1),
            w_decomp: random(e, d, seed + 2),
            b_decomp: random(1, d, seed + 3),
            ln_gamma: random(1, d, seed + 4),
            ln_beta: random(1, d, seed + 5),
        }
    }

    #[test]
    fn zero_compressor_yields_zero_reps() {
        let mut c = comp(6, 3, 1);
        c.w_comp = Matrix::zeros(6, 3);
        c.b_comp = Matrix::zeros(1, 3);
        let r = compress(&random(4, 6, 9), &c).unwrap();
        assert!(r.to_matrix().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_projection_is_elementwise_gelu() {
        let c = CompressorWeights {
            w_comp: Matrix::identity(5),
            b_comp: Matrix::zeros(1, 5),
            ..comp(5, 5, 2)
        };
        let s = random(3, 5, 4).map(f32::abs);
        let r = compress(&s, &c).unwrap().to_matrix();
        for (&x, &y) in s.data().iter().zip(r.data()) {
            let phi = 0.5 * (1.0 + libm::erf(x as f64 / std::f64::consts::SQRT_2));
            assert!((y as f64 - x as f64 * phi).abs() < 1e-6);
        }
    }

    #[test]
    fn compress_matches_composition() {
        let c = comp(6, 3, 5);
        let s = random(4, 6, 6);
        let r = compress(&s, &c).unwrap().to_matrix();
        for i in 0..4 {
            for j in 0..3 {
                let mut z = c.b_comp.get(0, j) as f64;
                for k in 0..6 {
                    z += s.get(i, k) as f64 * c.w_comp.get(k, j) as f64;
                }
                let want = z * 0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2));
                assert!((r.get(i, j) as f64 - want).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn zero_reps_decompress_to_beta() {
        let mut c = comp(6, 3, 7);
        c.b_decomp = Matrix::zeros(1, 6);
        let out = decompress(&CompressedReps::from_matrix(Matrix::zeros(4, 3)), &c).unwrap();
        for i in 0..4 {
            assert_eq!(out.row(i), c.ln_beta.data());
        }
    }

    #[test]
    fn decompress_matches_composition() {
        let c = comp(6, 3, 8);
        let r = random(4, 3, 10);
        let out = decompress(&CompressedReps::from_matrix(r.clone()), &c).unwrap();
        for i in 0..4 {
            let pre: Vec<f64> = (0..6)
                .map(|j| c.b_decomp.get(0, j) as f64 + (0..3).map(|k| r.get(i, k) as f64 * c.w_decomp.get(k, j) as f64).sum::<f64>())
                .collect();
            let mean = pre.iter().sum::<f64>() / 6.0;
            let var = pre.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            for j in 0..6 {
                let want = (pre[j] - mean) / (var + 1e-5).sqrt() * c.ln_gamma.get(0, j) as f64 + c.ln_beta.get(0, j) as f64;
                assert!((out.get(i, j) as f64 - want).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn half_precision_error_before_normalization_is_bounded() {
        let c = comp(8, 4, 12);
        let r = CompressedReps::from_matrix(random(5, 4, 13));
        let (h, clamped) = quantize_reps(&r);
        assert_eq!(clamped, 0);
        let pre = |m: &Matrix| affine(m, &c.w_decomp, &c.b_decomp).unwrap();
        let a = pre(&r.to_matrix());
        let b = pre(&h.to_matrix());
        // Each widened input has relative error ≤ 2⁻¹¹, so the affine output
        // differs by at most 2⁻¹¹ Σ|r_k w_kj|.
        let rm = r.to_matrix();
        for i in 0..5 {
            for j in 0..8 {
                let bound: f64 = (0..4).map(|k| (rm.get(i, k) * c.w_decomp.get(k, j)).abs() as f64).sum::<f64>() * 2f64.powi(-11);
                let diff = (a.get(i, j) - b.get(i, j)).abs() as f64;
                assert!(diff <= bound + 1e-6, "{diff} > {bound}");
                assert!(diff <= 2f64.powi(-10) * a.get(i, j).abs().max(1.0) as f64);
            }
        }
    }

    #[test]
    fn restore_preserves_shape_for_any_width() {
        for e in 1..=6 {
            let c = comp(6, e, e as u64);
            let x = random(7, 6, 3);
            let out = restore_rows(&x, &[2, 3, 6], &c).unwrap();
            assert_eq!(out.shape(), (7, 6));
            assert_eq!(out.row(0), x.row(0));
        }
    }

    #[test]
    fn exact_values_roundtrip_bit_stably() {
        let m = Matrix::from_vec(2, 2, vec![1.0, -0.5, 0.25, 1024.0]).unwrap();
        let r = CompressedReps::from_matrix(m.clone());
        let (h, _) = quantize_reps(&r);
        assert_eq!(h.precision(), Precision::F16);
        assert_eq!(widen_reps(&h), r);
        assert_eq!(h.payload_bytes(), 8);
    }

    #[test]
    fn loss_of_identical_tensors_is_zero_and_offsets_square() {
        let a = vec![vec![Matrix::filled(3, 3, 0.2f64), Matrix::filled(3, 3, 0.3)]];
        assert_eq!(attention_match_loss(&a, &a).unwrap(), 0.0);
        let b: Vec<AttentionTensor<f64>> = a.iter().map(|l| l.iter().map(|m| m.map(|v| v + 0.05)).collect()).collect();
        assert!((attention_match_loss(&a, &b).unwrap() - 0.0025).abs() < 1e-15);
    }

    #[test]
    fn loss_matches_flat_mean_of_squares() {
        let mk = |seed: u64| -> Vec<AttentionTensor<f32>> {
            (0..2u64).map(|l| (0..2u64).map(|h| random(4, 4, seed + l * 2 + h)).collect()).collect()
        };
        let (a, b) = (mk(1), mk(50));
        let per_layer: Vec<f64> = (0..2)
            .map(|l| {
                let flat: Vec<f64> = (0..2)
                    .flat_map(|h| a[l][h].data().iter().zip(b[l][h].data()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).collect::<Vec<_>>())
                    .collect();
                flat.iter().sum::<f64>() / flat.len() as f64
            })
            .collect();
        let want = per_layer.iter().sum::<f64>() / 2.0;
        assert!((attention_match_loss(&a, &b).unwrap() as f64 - want).abs() <= 1e-7);
    }

    #[test]
    fn loss_rejects_mismatched_shapes() {
        let a = vec![vec![Matrix::<f32>::zeros(2, 2)]];
        let b = vec![vec![Matrix::<f32>::zeros(3, 3)]];
        assert!(attention_match_loss(&a, &b).is_err());
    }
}
