//! Fast Walsh–Hadamard transform, orthonormal convention.
//!
//! The transform equals multiplication by the symmetric Hadamard matrix
//! with entries `±1/√n`, so it is its own inverse. The `1/√n` factor is
//! applied once after the butterfly stages.

use alloc::vec;

use crate::fmath;
use crate::matrix::DenseMatrix;
use crate::{Error, Result};

/// In-place orthonormal FWHT of a power-of-two-length slice.
pub fn fwht_inplace(x: &mut [f64]) -> Result<()> {
    let n = x.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::NotPowerOfTwo { len: n });
    }
    let mut h = 1;
    while h < n {
        let mut i = 0;
        while i < n {
            for j in i..i + h {
                let a = x[j];
                let b = x[j + h];
                x[j] = a + b;
                x[j + h] = a - b;
            }
            i += h * 2;
        }
        h *= 2;
    }
    let norm = 1.0 / fmath::sqrt(n as f64);
    for v in x.iter_mut() {
        *v *= norm;
    }
    Ok(())
}

/// Orthonormal FWHT of a vector; length must be a power of two.
pub fn fwht(x: &[f64]) -> Result<alloc::vec::Vec<f64>> {
    let mut out = x.to_vec();
    fwht_inplace(&mut out)?;
    Ok(out)
}

/// Transforms every row of `m` (row length must be a power of two).
pub fn fwht_rows(m: &DenseMatrix) -> Result<DenseMatrix> {
    let mut out = m.clone();
    let cols = out.cols();
    if cols == 0 || !cols.is_power_of_two() {
        return Err(Error::NotPowerOfTwo { len: cols });
    }
    for r in 0..out.rows() {
        fwht_inplace(out.row_mut(r))?;
    }
    Ok(out)
}

/// Transforms every column of `m` (column length must be a power of two).
///
/// For a weight `W`, this is the product `R·W` with the orthonormal
/// Hadamard `R`; paired with `fwht_rows` on the activations it preserves
/// `X·W` exactly because `R·R = I`.
pub fn fwht_cols(m: &DenseMatrix) -> Result<DenseMatrix> {
    let rows = m.rows();
    if rows == 0 || !rows.is_power_of_two() {
        return Err(Error::NotPowerOfTwo { len: rows });
    }
    let mut out = m.clone();
    let mut scratch = vec![0.0f64; rows];
    for c in 0..m.cols() {
        for (r, v) in scratch.iter_mut().enumerate() {
            *v = out.get(r, c);
        }
        fwht_inplace(&mut scratch)?;
        for (r, &v) in scratch.iter().enumerate() {
            out.set(r, c, v);
        }
    }
    Ok(out)
}
