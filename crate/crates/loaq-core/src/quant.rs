//! Uniform quantization grids and the GPTQ/LDLQ sequential solver.
//!
//! Grids are Min-Max parameterized: per output channel (weight columns)
//! or per token (activation rows), with `dequant(g) = scale·(g − zp)`.
//! Scales are f64 end to end (in memory and on disk), so a saved and
//! reloaded tensor dequantizes to exactly the same values. Rounding ties
//! go away from zero everywhere.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::fmath;
use crate::linalg::{permute_rows, unpermute_rows, PreparedHessian};
use crate::matrix::{CodeMatrix, DenseMatrix};
use crate::{Error, Result};

/// Which slices of a matrix share one (scale, zero-point) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantAxis {
    /// One grid per column: output channels of an `N×M` weight.
    PerOutputChannel,
    /// One grid per row: tokens of a `T×N` activation.
    PerToken,
}

/// A per-channel (or per-token) uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    bits: u32,
    axis: QuantAxis,
    scale: Vec<f64>,
    zero_point: Vec<i32>,
}

impl QuantParams {
    pub fn new(bits: u32, axis: QuantAxis, scale: Vec<f64>, zero_point: Vec<i32>) -> Result<Self> {
        if !(2..=16).contains(&bits) {
            return Err(Error::InvalidBits { bits });
        }
        if scale.len() != zero_point.len() {
            return Err(Error::ShapeMismatch {
                context: "QuantParams::new",
                detail: format!("{} scales vs {} zero points", scale.len(), zero_point.len()),
            });
        }
        let qmax = (1i32 << bits) - 1;
        if !scale.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidConfig {
                reason: "scales must be finite and > 0",
            });
        }
        if !zero_point.iter().all(|&z| (0..=qmax).contains(&z)) {
            return Err(Error::InvalidConfig {
                reason: "zero points must lie in [0, 2^k - 1]",
            });
        }
        Ok(Self {
            bits,
            axis,
            scale,
            zero_point,
        })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn axis(&self) -> QuantAxis {
        self.axis
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn zero_point(&self) -> &[i32] {
        &self.zero_point
    }

    /// Highest grid level, `2^k − 1`.
    pub fn qmax(&self) -> i32 {
        (1i32 << self.bits) - 1
    }

    /// Dequantizes one code in channel/token `idx`.
    #[inline]
    pub fn dequant(&self, idx: usize, code: i32) -> f64 {
        self.scale[idx] * (code - self.zero_point[idx]) as f64
    }

    /// Quantizes one value in channel/token `idx` to its nearest code.
    #[inline]
    pub fn quantize_value(&self, idx: usize, v: f64) -> i32 {
        let code = fmath::round(v / self.scale[idx] + self.zero_point[idx] as f64);
        (code as i32).clamp(0, self.qmax())
    }
}

/// Min-Max grid over `w` along `axis`.
///
/// `scale = (max − min)/(2^k − 1)` and `zero_point = round(−min/scale)`
/// clamped into the level range. The observed range is first extended to
/// include zero so the zero point is always representable and every value
/// rounds to within half a step. A constant slice degenerates to
/// `scale = 1, zero_point = 0`, which maps the whole slice to one level.
pub fn minmax_params(w: &DenseMatrix, bits: u32, axis: QuantAxis) -> Result<QuantParams> {
    if !(2..=16).contains(&bits) {
        return Err(Error::InvalidBits { bits });
    }
    let levels = ((1u32 << bits) - 1) as f64;
    let groups = match axis {
        QuantAxis::PerOutputChannel => w.cols(),
        QuantAxis::PerToken => w.rows(),
    };
    let mut scale = vec![0.0f64; groups];
    let mut zero_point = vec![0i32; groups];
    for g in 0..groups {
        let (mut mn, mut mx) = (f64::INFINITY, f64::NEG_INFINITY);
        let values: &mut dyn Iterator<Item = f64> = match axis {
            QuantAxis::PerOutputChannel => &mut (0..w.rows()).map(|r| w.get(r, g)),
            QuantAxis::PerToken => &mut w.row(g).iter().copied(),
        };
        for v in values {
            mn = mn.min(v);
            mx = mx.max(v);
        }
        if mx > mn {
            mn = mn.min(0.0);
            mx = mx.max(0.0);
            let s = (mx - mn) / levels;
            let zp = fmath::round(-mn / s) as i32;
            scale[g] = s;
            zero_point[g] = zp.clamp(0, (1i32 << bits) - 1);
        } else {
            scale[g] = 1.0;
            zero_point[g] = 0;
        }
    }
    QuantParams::new(bits, axis, scale, zero_point)
}

/// Round-to-nearest quantization of every entry of `w` under `params`.
///
/// Returns the integer codes and the dequantized matrix.
pub fn rtn_quantize(w: &DenseMatrix, params: &QuantParams) -> Result<(CodeMatrix, DenseMatrix)> {
    let groups = match params.axis() {
        QuantAxis::PerOutputChannel => w.cols(),
        QuantAxis::PerToken => w.rows(),
    };
    if groups != params.scale().len() {
        return Err(Error::ShapeMismatch {
            context: "rtn_quantize",
            detail: format!(
                "{} channels in params, {} along the quantization axis",
                params.scale().len(),
                groups
            ),
        });
    }
    let mut codes = CodeMatrix::zeros(w.rows(), w.cols());
    let mut deq = DenseMatrix::zeros(w.rows(), w.cols());
    for r in 0..w.rows() {
        for c in 0..w.cols() {
            let idx = match params.axis() {
                QuantAxis::PerOutputChannel => c,
                QuantAxis::PerToken => r,
            };
            let code = params.quantize_value(idx, w.get(r, c));
            codes.set(r, c, code);
            deq.set(r, c, params.dequant(idx, code));
        }
    }
    Ok((codes, deq))
}

/// Dynamic token-wise activation quantization: per-row Min-Max grids
/// computed on the fly, returning the dequantized activations.
pub fn quantize_activations(x: &DenseMatrix, bits: u32) -> Result<DenseMatrix> {
    let params = minmax_params(x, bits, QuantAxis::PerToken)?;
    Ok(rtn_quantize(x, &params)?.1)
}

/// GPTQ solver configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GptqConfig {
    /// Dampening as a fraction of `mean(diag H)`.
    pub perc_damp: f64,
    /// Process input channels in descending `diag(H)` order.
    pub reorder: bool,
}

impl Default for GptqConfig {
    fn default() -> Self {
        Self {
            perc_damp: 0.01,
            reorder: true,
        }
    }
}

/// Sequential Hessian-aware quantization of `w` (input dim × output dim).
///
/// Dampens `H`, optionally reorders input channels by descending
/// diagonal, factors `H = Lᵀ·L`, and quantizes row by row, each row first
/// compensated by `D⁻¹(L − D)(Q − W)` contributions of the rows already
/// quantized. The output satisfies
/// `Q = Quant(W − D⁻¹(L−D)(Q−W))` exactly (see [`gptq_fixed_point_holds`]).
pub fn gptq_quantize(
    w: &DenseMatrix,
    h: &DenseMatrix,
    params: &QuantParams,
    cfg: &GptqConfig,
) -> Result<DenseMatrix> {
    let prepared = PreparedHessian::prepare(h, cfg.perc_damp, cfg.reorder)?;
    gptq_quantize_prepared(w, &prepared, params)
}

/// GPTQ against an already dampened/permuted/factored Hessian, so a
/// pipeline can share one factorization between the weight update and the
/// quantizer.
pub fn gptq_quantize_prepared(
    w: &DenseMatrix,
    prepared: &PreparedHessian,
    params: &QuantParams,
) -> Result<DenseMatrix> {
    let n = w.rows();
    let m = w.cols();
    if prepared.factor().dim() != n {
        return Err(Error::ShapeMismatch {
            context: "gptq_quantize",
            detail: format!(
                "H is {}x{}, W has {n} rows",
                prepared.factor().dim(),
                prepared.factor().dim()
            ),
        });
    }
    if params.axis() != QuantAxis::PerOutputChannel || params.scale().len() != m {
        return Err(Error::InvalidConfig {
            reason: "gptq_quantize needs per-output-channel params matching W's columns",
        });
    }
    let w_p = match prepared.perm() {
        Some(p) => permute_rows(w, p),
        None => w.clone(),
    };
    let l = prepared.factor().l();
    let diag = prepared.factor().diag();
    let mut q_p = DenseMatrix::zeros(n, m);
    let mut err = DenseMatrix::zeros(n, m); // rows of Q − W, filled as we go
    let mut target = vec![0.0f64; m];
    for (i, &d_i) in diag.iter().enumerate() {
        target.copy_from_slice(w_p.row(i));
        for j in 0..i {
            let l_ij = l.get(i, j);
            if l_ij == 0.0 {
                continue;
            }
            let coef = l_ij / d_i;
            let err_row = err.row(j);
            for (t, e) in target.iter_mut().zip(err_row) {
                *t -= coef * e;
            }
        }
        for (c, &t) in target.iter().enumerate() {
            let code = params.quantize_value(c, t);
            let qv = params.dequant(c, code);
            q_p.set(i, c, qv);
            err.set(i, c, qv - w_p.get(i, c));
        }
    }
    Ok(match prepared.perm() {
        Some(p) => unpermute_rows(&q_p, p),
        None => q_p,
    })
}

/// Re-evaluates `Quant(W − D⁻¹(L−D)(Q−W))` with the final `Q` and checks
/// it reproduces `Q` bit-exactly, replaying the same dampening and
/// reordering as [`gptq_quantize`].
pub fn gptq_fixed_point_holds(
    w: &DenseMatrix,
    h: &DenseMatrix,
    params: &QuantParams,
    cfg: &GptqConfig,
    q: &DenseMatrix,
) -> Result<bool> {
    let prepared = PreparedHessian::prepare(h, cfg.perc_damp, cfg.reorder)?;
    let (w_p, q_p) = match prepared.perm() {
        Some(p) => (permute_rows(w, p), permute_rows(q, p)),
        None => (w.clone(), q.clone()),
    };
    let l = prepared.factor().l();
    let diag = prepared.factor().diag();
    let m = w.cols();
    let mut target = vec![0.0f64; m];
    for (i, &d_i) in diag.iter().enumerate() {
        target.copy_from_slice(w_p.row(i));
        for j in 0..i {
            let coef = l.get(i, j) / d_i;
            if coef == 0.0 {
                continue;
            }
            for (c, t) in target.iter_mut().enumerate() {
                *t -= coef * (q_p.get(j, c) - w_p.get(j, c));
            }
        }
        for (c, &t) in target.iter().enumerate() {
            let code = params.quantize_value(c, t);
            let qv = params.dequant(c, code);
            if qv.to_bits() != q_p.get(i, c).to_bits() {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Surrogate quantization loss `tr((Q−W)ᵀ·H·(Q−W))`.
pub fn surrogate_loss(q: &DenseMatrix, w: &DenseMatrix, h: &DenseMatrix) -> Result<f64> {
    let d = q.sub(w)?;
    let hd = h.matmul(&d)?;
    Ok(d.as_slice()
        .iter()
        .zip(hd.as_slice())
        .map(|(&a, &b)| a * b)
        .sum())
}

/// Recovers the integer codes of a matrix known to lie on the grid,
/// verifying exact membership entry by entry.
pub fn codes_from_grid(q: &DenseMatrix, params: &QuantParams) -> Result<CodeMatrix> {
    let mut codes = CodeMatrix::zeros(q.rows(), q.cols());
    for r in 0..q.rows() {
        for c in 0..q.cols() {
            let idx = match params.axis() {
                QuantAxis::PerOutputChannel => c,
                QuantAxis::PerToken => r,
            };
            let code = params.quantize_value(idx, q.get(r, c));
            if params.dequant(idx, code).to_bits() != q.get(r, c).to_bits() {
                return Err(Error::InvalidConfig {
                    reason: "matrix entry is not exactly on its declared grid",
                });
            }
            codes.set(r, c, code);
        }
    }
    Ok(codes)
}
