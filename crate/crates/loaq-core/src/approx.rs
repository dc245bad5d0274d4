//! Output-approximation weight updates.
//!
//! Given pre/post-quantization activations `X`, `X̂` this module builds the
//! statistics `H = X̂ᵀX̂` and `C = X̂ᵀ(X − X̂)` and produces updated weights:
//!
//! * `W̃ = (I + α·H⁻¹C)·W` matches the linear-layer output `X·W`,
//! * `W̃ = (I + α·H⁻¹C)·W + β·H⁻¹X̂ᵀ(h − ĥ)` additionally absorbs the
//!   residual-stream error across the sub-layer connection,
//! * per-token rescaling by the RMS factors of the original and quantized
//!   next residual states turns the same machinery into a normalized
//!   sub-layer approximation.
//!
//! All `H⁻¹` products go through SPD solves; no inverse is ever formed.

use alloc::format;
use alloc::vec::Vec;

use crate::linalg::{spd_solve, PreparedHessian};
use crate::matrix::{rms_scale, DenseMatrix};
use crate::{Error, Result};

/// Accumulated compensation statistics for one linear weight.
#[derive(Debug, Clone)]
pub struct OaState {
    /// `X̂ᵀX̂`, symmetric.
    pub h: DenseMatrix,
    /// `X̂ᵀ(X − X̂)`.
    pub c: DenseMatrix,
    /// `H⁻¹X̂ᵀ(h − ĥ)` (in the rescaled space when NOA is active); `None`
    /// for weights with no residual term.
    pub delta: Option<DenseMatrix>,
    /// Tokens accumulated so far.
    pub token_count: usize,
}

impl OaState {
    pub fn new(n: usize) -> Self {
        Self {
            h: DenseMatrix::zeros(n, n),
            c: DenseMatrix::zeros(n, n),
            delta: None,
            token_count: 0,
        }
    }

    /// Adds one batch of rows. Batching is associative up to float
    /// round-off, so streaming matches the single-shot result to ~1e-12.
    pub fn update(&mut self, x: &DenseMatrix, xhat: &DenseMatrix) -> Result<()> {
        if (x.rows(), x.cols()) != (xhat.rows(), xhat.cols()) {
            return Err(Error::ShapeMismatch {
                context: "OaState::update",
                detail: format!(
                    "X is {}x{}, X̂ is {}x{}",
                    x.rows(),
                    x.cols(),
                    xhat.rows(),
                    xhat.cols()
                ),
            });
        }
        if x.cols() != self.h.rows() {
            return Err(Error::ShapeMismatch {
                context: "OaState::update",
                detail: format!("state dim {}, batch dim {}", self.h.rows(), x.cols()),
            });
        }
        self.h = self.h.add(&xhat.gram())?;
        let err = x.sub(xhat)?;
        self.c = self.c.add(&xhat.t_matmul(&err)?)?;
        self.token_count += x.rows();
        Ok(())
    }
}

/// Single-shot statistics: `H = X̂ᵀX̂`, `C = X̂ᵀ(X − X̂)`.
pub fn accumulate_stats(x: &DenseMatrix, xhat: &DenseMatrix) -> Result<OaState> {
    let mut state = OaState::new(x.cols());
    state.update(x, xhat)?;
    Ok(state)
}

/// Linear-layer output approximation: `W̃ = W + α·H⁻¹(C·W)`.
///
/// `state.h` is used as given; dampen it first if it may be singular.
pub fn lloa_update(w: &DenseMatrix, state: &OaState, alpha: f64) -> Result<DenseMatrix> {
    if alpha == 0.0 {
        return Ok(w.clone());
    }
    let cw = state.c.matmul(w)?;
    let corr = spd_solve(&state.h, &cw)?;
    w.add(&corr.scale(alpha))
}

/// Sub-layer output approximation:
/// `W̃ = W + α·H⁻¹(C·W) + β·Δ` with `Δ = H⁻¹X̂ᵀ(h − ĥ)`.
///
/// A missing `delta` is treated as zero (the `W_in` case).
pub fn soa_update(w: &DenseMatrix, state: &OaState, alpha: f64, beta: f64) -> Result<DenseMatrix> {
    let mut out = lloa_update(w, state, alpha)?;
    if beta != 0.0 {
        if let Some(delta) = &state.delta {
            out = out.add(&delta.scale(beta))?;
        }
    }
    Ok(out)
}

/// Same update routed through a shared dampened factorization, so the
/// weight update and the subsequent GPTQ call see one geometry.
pub fn oa_update(
    w: &DenseMatrix,
    state: &OaState,
    prepared: &PreparedHessian,
    alpha: f64,
    beta: f64,
) -> Result<DenseMatrix> {
    let mut out = if alpha == 0.0 {
        w.clone()
    } else {
        let cw = state.c.matmul(w)?;
        let corr = prepared.solve_mat(&cw)?;
        w.add(&corr.scale(alpha))?
    };
    if beta != 0.0 {
        if let Some(delta) = &state.delta {
            out = out.add(&delta.scale(beta))?;
        }
    }
    Ok(out)
}

/// Per-token rescaling for the normalized sub-layer objective.
#[derive(Debug, Clone)]
pub struct NoaRescale {
    /// `diag(s)·X` — original activations, rescaled.
    pub x_scaled: DenseMatrix,
    /// `diag(ŝ)·X̂` — quantized-branch activations, rescaled.
    pub xhat_scaled: DenseMatrix,
    /// `diag(s)·h − diag(ŝ)·ĥ`, the residual target in the scaled space.
    pub target_resid: DenseMatrix,
    /// `s_t = r(h_t + (X·W)_t)` per token.
    pub s: Vec<f64>,
    /// `ŝ_t = r(ĥ_t + (X̂·W)_t)` per token.
    pub s_hat: Vec<f64>,
}

/// Computes the RMS scalers of both branches' next residual states (using
/// the original `W` on both sides) and rescales activations and residuals.
///
/// Downstream `H`, `C`, `Δ` are then accumulated from the primed
/// quantities.
pub fn noa_rescale(
    h: &DenseMatrix,
    hhat: &DenseMatrix,
    x: &DenseMatrix,
    xhat: &DenseMatrix,
    w: &DenseMatrix,
    eps: f64,
) -> Result<NoaRescale> {
    if (h.rows(), h.cols()) != (hhat.rows(), hhat.cols())
        || x.rows() != h.rows()
        || xhat.rows() != h.rows()
        || x.cols() != xhat.cols()
    {
        return Err(Error::ShapeMismatch {
            context: "noa_rescale",
            detail: format!(
                "h {}x{}, ĥ {}x{}, X {}x{}, X̂ {}x{}",
                h.rows(),
                h.cols(),
                hhat.rows(),
                hhat.cols(),
                x.rows(),
                x.cols(),
                xhat.rows(),
                xhat.cols()
            ),
        });
    }
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::InvalidConfig {
            reason: "noa_rescale eps must be non-negative",
        });
    }
    let orig_next = h.add(&x.matmul(w)?)?;
    let quant_next = hhat.add(&xhat.matmul(w)?)?;
    let s: Vec<f64> = (0..orig_next.rows())
        .map(|t| rms_scale(orig_next.row(t), eps))
        .collect();
    let s_hat: Vec<f64> = (0..quant_next.rows())
        .map(|t| rms_scale(quant_next.row(t), eps))
        .collect();
    let x_scaled = x.scale_rows(&s)?;
    let xhat_scaled = xhat.scale_rows(&s_hat)?;
    let target_resid = h.scale_rows(&s)?.sub(&hhat.scale_rows(&s_hat)?)?;
    Ok(NoaRescale {
        x_scaled,
        xhat_scaled,
        target_resid,
        s,
        s_hat,
    })
}

/// Normal-equations solution `Q* = (X̂ᵀX̂)⁻¹X̂ᵀY`.
///
/// Returns the solution and whether the Gram matrix had to be dampened
/// (rank-deficient input). Used as an independent target in tests and for
/// the constant-difference identity check.
pub fn ls_target(xhat: &DenseMatrix, y: &DenseMatrix) -> Result<(DenseMatrix, bool)> {
    if xhat.rows() != y.rows() {
        return Err(Error::ShapeMismatch {
            context: "ls_target",
            detail: format!("X̂ has {} rows, Y has {}", xhat.rows(), y.rows()),
        });
    }
    let gram = xhat.gram();
    let rhs = xhat.t_matmul(y)?;
    match spd_solve(&gram, &rhs) {
        Ok(q) => Ok((q, false)),
        Err(Error::NotPositiveDefinite { .. }) => {
            let mean_diag = gram.diag().iter().sum::<f64>() / gram.rows() as f64;
            let lambda = if mean_diag > 0.0 {
                1e-6 * mean_diag
            } else {
                1e-12
            };
            let q = spd_solve(&gram.add_diag(lambda), &rhs)?;
            Ok((q, true))
        }
        Err(e) => Err(e),
    }
}
