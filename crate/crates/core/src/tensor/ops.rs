use super::{BoolMask, Matrix, Real};
use crate::error::{Error, Result};

/// Epsilon used by every layer normalization in the model.
pub const LN_EPS: f64 = 1e-5;

/// Row-wise softmax restricted to the permitted entries of `mask`.
///
/// Masked entries come out as exactly zero. A row without any permitted
/// entry is an error rather than a silent NaN.
pub fn masked_softmax_rows<T: Real>(scores: &Matrix<T>, mask: &BoolMask) -> Result<Matrix<T>> {
    if scores.shape() != (mask.rows(), mask.cols()) {
        return Err(Error::shape(
            "masked_softmax_rows",
            format!(
                "scores {:?} vs mask {:?}",
                scores.shape(),
                (mask.rows(), mask.cols())
            ),
        ));
    }
    let mut out = scores.clone();
    for i in 0..out.rows() {
        softmax_row_masked(out.row_mut(i), mask.row(i)).map_err(|_| Error::FullyMaskedRow { row: i })?;
    }
    Ok(out)
}

/// In-place masked softmax of one row. Errors (with a dummy row index) when
/// nothing is permitted; callers translate the index.
pub(crate) fn softmax_row_masked<T: Real>(row: &mut [T], allowed: &[bool]) -> Result<()> {
    let mut max = T::neg_infinity();
    let mut any = false;
    for (&x, &ok) in row.iter().zip(allowed) {
        if ok {
            any = true;
            if x > max {
                max = x;
            }
        }
    }
    if !any {
        return Err(Error::FullyMaskedRow { row: 0 });
    }
    let mut sum = T::zero();
    for (x, &ok) in row.iter_mut().zip(allowed) {
        if ok {
            *x = (*x - max).exp();
            sum += *x;
        } else {
            *x = T::zero();
        }
    }
    let inv = T::one() / sum;
    for (x, &ok) in row.iter_mut().zip(allowed) {
        if ok {
            *x *= inv;
        }
    }
    Ok(())
}

/// Cached normalized values and inverse standard deviations of one layer
/// normalization, enough to run it backwards.
#[derive(Clone, Debug)]
pub(crate) struct NormTrace<T> {
    pub xhat: Matrix<T>,
    pub inv_std: Vec<T>,
}

/// Per-row layer normalization: `(x - mean) / sqrt(var + eps) * gamma + beta`.
pub fn layer_norm<T: Real>(x: &Matrix<T>, gamma: &[T], beta: &[T], eps: T) -> Result<Matrix<T>> {
    layer_norm_traced(x, gamma, beta, eps).map(|(y, _)| y)
}

pub(crate) fn layer_norm_traced<T: Real>(
    x: &Matrix<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Matrix<T>, NormTrace<T>)> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::shape(
            "layer_norm",
            format!("{d} columns, gamma {}, beta {}", gamma.len(), beta.len()),
        ));
    }
    let mut xhat = Matrix::zeros(x.rows(), d);
    let mut y = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    let n = T::lit(d as f64);
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        let xh = xhat.row_mut(i);
        for (o, &v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
        let yr = y.row_mut(i);
        for j in 0..d {
            yr[j] = xh[j] * gamma[j] + beta[j];
        }
    }
    Ok((y, NormTrace { xhat, inv_std }))
}

/// Returns `(dx, dgamma, dbeta)` for upstream gradient `dy`.
pub(crate) fn layer_norm_backward<T: Real>(
    dy: &Matrix<T>,
    trace: &NormTrace<T>,
    gamma: &[T],
) -> (Matrix<T>, Vec<T>, Vec<T>) {
    let d = dy.cols();
    let n = T::lit(d as f64);
    let mut dx = Matrix::zeros(dy.rows(), d);
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for i in 0..dy.rows() {
        let dyr = dy.row(i);
        let xh = trace.xhat.row(i);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..d {
            dgamma[j] += dyr[j] * xh[j];
            dbeta[j] += dyr[j];
            dxhat[j] = dyr[j] * gamma[j];
            sum_dxhat += dxhat[j];
            sum_dxhat_xhat += dxhat[j] * xh[j];
        }
        let scale = trace.inv_std[i] / n;
        let out = dx.row_mut(i);
        for j in 0..d {
            out[j] = scale * (n * dxhat[j] - sum_dxhat - xh[j] * sum_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

/// `x · Φ(x)` with the exact Gaussian CDF.
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    x * half * (T::one() + (x / T::lit(std::f64::consts::SQRT_2)).erf())
}

/// `Φ(x) + x · φ(x)`.
pub fn gelu_derivative<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x / T::lit(std::f64::consts::SQRT_2)).erf());
    let pdf = (-half * x * x).exp() / T::lit((2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

pub fn gelu<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    x.map(gelu_scalar)
}
