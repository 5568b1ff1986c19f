use crate::error::{Error, Result};
use crate::matrix::{Matrix, Scalar};

fn check_shapes<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, v: Option<&Matrix<T>>) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(Error::shape(format!(
            "query dim {} differs from key dim {}",
            q.cols(),
            k.cols()
        )));
    }
    if k.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    if let Some(v) = v {
        if v.rows() != k.rows() {
            return Err(Error::shape(format!(
                "{} keys but {} values",
                k.rows(),
                v.rows()
            )));
        }
    }
    Ok(())
}

/// Row-wise `softmax(scale · Q·Kᵀ)`, with the row maximum subtracted before
/// exponentiation.
pub fn attention_weights<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, scale: T) -> Result<Matrix<T>> {
    check_shapes(q, k, None)?;
    let mut w = q.matmul_t(k)?;
    for r in 0..w.rows() {
        softmax_in_place(w.row_mut(r), scale);
    }
    Ok(w)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T], scale: T) {
    let mut max = T::neg_infinity();
    for s in row.iter_mut() {
        *s = *s * scale;
        max = max.max(*s);
    }
    let mut sum = T::zero();
    for s in row.iter_mut() {
        *s = (*s - max).exp();
        sum = sum + *s;
    }
    let inv = T::one() / sum;
    for s in row.iter_mut() {
        *s = *s * inv;
    }
}

/// Scaled dot-product attention, `softmax(scale · Q·Kᵀ) · V`.
pub fn attention<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>, scale: T) -> Result<Matrix<T>> {
    check_shapes(q, k, Some(v))?;
    let mut out = Matrix::zeros(q.rows(), v.cols());
    let mut scores = vec![T::zero(); k.rows()];
    for r in 0..q.rows() {
        let qr = q.row(r);
        for (s, kr) in scores.iter_mut().zip(k.row_iter()) {
            *s = qr.iter().zip(kr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        }
        softmax_in_place(&mut scores, scale);
        let dst = out.row_mut(r);
        for (&p, vr) in scores.iter().zip(v.row_iter()) {
            for (d, &x) in dst.iter_mut().zip(vr) {
                *d = *d + p * x;
            }
        }
    }
    Ok(out)
}
