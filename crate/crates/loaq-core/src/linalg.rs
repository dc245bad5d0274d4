//! SPD factorization and solves.
//!
//! The factorization convention throughout is `H = Lᵀ·L` with `L` lower
//! triangular ("reverse" Cholesky). Under this form the i-th row of
//! `L·(Q − W)` mixes only the first i rows of `Q − W`, which is what makes
//! sequential row-wise quantization well defined. It is computed by
//! reversing the row/column order of `H`, running a standard Cholesky,
//! and mapping the factor back.

use alloc::vec;
use alloc::vec::Vec;

use crate::fmath;
use crate::matrix::DenseMatrix;
use crate::{Error, Result};

/// Lower-triangular `L` with `Lᵀ·L = H`, plus its diagonal.
#[derive(Debug, Clone)]
pub struct ReverseCholeskyFactor {
    l: DenseMatrix,
    diag: Vec<f64>,
}

impl ReverseCholeskyFactor {
    /// The lower-triangular factor.
    pub fn l(&self) -> &DenseMatrix {
        &self.l
    }

    /// Diagonal entries of `L`, all strictly positive.
    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    /// Solves `H·X = B` through the factor: `Lᵀ·w = b` then `L·x = w`.
    pub fn solve_mat(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        let n = self.dim();
        if b.rows() != n {
            return Err(Error::ShapeMismatch {
                context: "ReverseCholeskyFactor::solve_mat",
                detail: alloc::format!("factor dim {n}, rhs rows {}", b.rows()),
            });
        }
        let m = b.cols();
        let mut w = b.clone();
        // Back substitution on Lᵀ (upper triangular): row i uses L[j][i], j >= i.
        for i in (0..n).rev() {
            for j in (i + 1)..n {
                let l_ji = self.l.get(j, i);
                if l_ji == 0.0 {
                    continue;
                }
                let (wi, wj) = row_pair(&mut w, i, j, m);
                for c in 0..m {
                    wi[c] -= l_ji * wj[c];
                }
            }
            let d = self.diag[i];
            for v in w.row_mut(i) {
                *v /= d;
            }
        }
        // Forward substitution on L.
        for i in 0..n {
            for j in 0..i {
                let l_ij = self.l.get(i, j);
                if l_ij == 0.0 {
                    continue;
                }
                let (wj, wi) = row_pair(&mut w, j, i, m);
                for c in 0..m {
                    wi[c] -= l_ij * wj[c];
                }
            }
            let d = self.diag[i];
            for v in w.row_mut(i) {
                *v /= d;
            }
        }
        Ok(w)
    }
}

/// Borrows two distinct rows mutably; `a < b` required.
fn row_pair(m: &mut DenseMatrix, a: usize, b: usize, cols: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a < b);
    let (head, tail) = m.as_mut_slice().split_at_mut(b * cols);
    (&mut head[a * cols..(a + 1) * cols], &mut tail[..cols])
}

/// Factors a symmetric positive-definite `H` as `Lᵀ·L`, `L` lower triangular.
///
/// Fails with the offending pivot index (in the coordinates of `H`) when a
/// pivot is not strictly positive.
pub fn reverse_cholesky(h: &DenseMatrix) -> Result<ReverseCholeskyFactor> {
    let n = h.rows();
    if h.cols() != n {
        return Err(Error::ShapeMismatch {
            context: "reverse_cholesky",
            detail: alloc::format!("{}x{} is not square", h.rows(), h.cols()),
        });
    }
    // Standard Cholesky of the row/column-reversed matrix.
    let mut lp = vec![0.0f64; n * n]; // lower factor of J·H·J
    for i in 0..n {
        for j in 0..=i {
            let mut sum = h.get(n - 1 - i, n - 1 - j);
            for k in 0..j {
                sum -= lp[i * n + k] * lp[j * n + k];
            }
            if j == i {
                if !sum.is_finite() || sum <= 0.0 {
                    return Err(Error::NotPositiveDefinite { pivot: n - 1 - i });
                }
                lp[i * n + i] = fmath::sqrt(sum);
            } else {
                lp[i * n + j] = sum / lp[j * n + j];
            }
        }
    }
    // Map back: L = (J·L'·J)ᵀ, entries L[i][j] = L'[n-1-j][n-1-i].
    let mut l = DenseMatrix::zeros(n, n);
    let mut diag = vec![0.0f64; n];
    for i in 0..n {
        for j in 0..=i {
            l.set(i, j, lp[(n - 1 - j) * n + (n - 1 - i)]);
        }
        diag[i] = l.get(i, i);
    }
    Ok(ReverseCholeskyFactor { l, diag })
}

/// Solves `H·X = B` for SPD `H` without forming an inverse.
///
/// One iterative-refinement step keeps the residual near machine precision
/// even for moderately ill-conditioned dampened Hessians.
pub fn spd_solve(h: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if h.cols() != b.rows() {
        return Err(Error::ShapeMismatch {
            context: "spd_solve",
            detail: alloc::format!("H is {}x{}, B has {} rows", h.rows(), h.cols(), b.rows()),
        });
    }
    let factor = reverse_cholesky(h)?;
    let mut x = factor.solve_mat(b)?;
    let resid = b.sub(&h.matmul(&x)?)?;
    let corr = factor.solve_mat(&resid)?;
    x = x.add(&corr)?;
    Ok(x)
}

/// A dampened, optionally permuted factorization shared between the
/// output-approximation update and the GPTQ solver for one weight.
#[derive(Debug, Clone)]
pub struct PreparedHessian {
    /// `H + λI` in the original coordinates.
    h_damped: DenseMatrix,
    /// Factor of the (possibly permuted) dampened Hessian.
    factor: ReverseCholeskyFactor,
    /// `perm[i]` = original index placed at permuted position `i`.
    perm: Option<Vec<usize>>,
    lambda: f64,
}

impl PreparedHessian {
    /// Dampens `H` with `λ = perc_damp · mean(diag H)`, optionally permutes
    /// by descending diagonal, and factors once.
    pub fn prepare(h: &DenseMatrix, perc_damp: f64, reorder: bool) -> Result<Self> {
        let n = h.rows();
        if h.cols() != n {
            return Err(Error::ShapeMismatch {
                context: "PreparedHessian::prepare",
                detail: alloc::format!("{}x{} is not square", h.rows(), h.cols()),
            });
        }
        if perc_damp.is_nan() || perc_damp <= 0.0 {
            return Err(Error::InvalidConfig {
                reason: "perc_damp must be > 0",
            });
        }
        let mean_diag = h.diag().iter().sum::<f64>() / n as f64;
        let lambda = perc_damp * mean_diag;
        let h_damped = h.add_diag(lambda);
        let perm = if reorder {
            Some(descending_diag_perm(&h_damped))
        } else {
            None
        };
        let target = match &perm {
            Some(p) => permute_sym(&h_damped, p),
            None => h_damped.clone(),
        };
        let factor = reverse_cholesky(&target)?;
        Ok(Self {
            h_damped,
            factor,
            perm,
            lambda,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn h_damped(&self) -> &DenseMatrix {
        &self.h_damped
    }

    pub fn factor(&self) -> &ReverseCholeskyFactor {
        &self.factor
    }

    pub fn perm(&self) -> Option<&[usize]> {
        self.perm.as_deref()
    }

    /// Solves `(H + λI)·X = B` in the original coordinates, routing through
    /// the single stored factorization.
    pub fn solve_mat(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        let solved = match &self.perm {
            Some(p) => {
                let bp = permute_rows(b, p);
                let xp = self.factor.solve_mat(&bp)?;
                unpermute_rows(&xp, p)
            }
            None => self.factor.solve_mat(b)?,
        };
        // One refinement step against the unpermuted dampened Hessian.
        let resid = b.sub(&self.h_damped.matmul(&solved)?)?;
        let corr = match &self.perm {
            Some(p) => {
                let rp = permute_rows(&resid, p);
                let cp = self.factor.solve_mat(&rp)?;
                unpermute_rows(&cp, p)
            }
            None => self.factor.solve_mat(&resid)?,
        };
        solved.add(&corr)
    }
}

/// Stable descending sort of the diagonal; ties keep original order.
pub(crate) fn descending_diag_perm(h: &DenseMatrix) -> Vec<usize> {
    let diag = h.diag();
    let mut idx: Vec<usize> = (0..diag.len()).collect();
    idx.sort_by(|&a, &b| {
        diag[b]
            .partial_cmp(&diag[a])
            .unwrap_or(core::cmp::Ordering::Equal)
    });
    idx
}

/// `out[i][j] = m[p[i]][p[j]]` for a square matrix.
pub(crate) fn permute_sym(m: &DenseMatrix, p: &[usize]) -> DenseMatrix {
    let n = p.len();
    let mut out = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, m.get(p[i], p[j]));
        }
    }
    out
}

/// `out[i] = m[p[i]]` (row gather).
pub(crate) fn permute_rows(m: &DenseMatrix, p: &[usize]) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(p.len(), m.cols());
    for (i, &src) in p.iter().enumerate() {
        out.row_mut(i).copy_from_slice(m.row(src));
    }
    out
}

/// Inverse of [`permute_rows`]: `out[p[i]] = m[i]`.
pub(crate) fn unpermute_rows(m: &DenseMatrix, p: &[usize]) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(p.len(), m.cols());
    for (i, &dst) in p.iter().enumerate() {
        out.row_mut(dst).copy_from_slice(m.row(i));
    }
    out
}
