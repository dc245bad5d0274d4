//! End-to-end layer-wise quantization pipeline.
//!
//! For every sub-layer, in forward order: collect the activations the
//! next weight actually sees in both branches, build `H`, `C` (and for
//! `W_out` the per-token rescaling and residual term `Δ`), update the
//! weight, quantize it against the shared dampened Hessian, splice it
//! into the quantized model, and advance the quantized branch. Methods
//! differ only in which parts of the update they keep:
//!
//! * `rtn`  — direct rounding, no statistics at all,
//! * `gptq` — α = β = 0 (Hessian-aware rounding only),
//! * `lloa` — α active, β = 0,
//! * `loaq` — α and β active.

use alloc::borrow::ToOwned;
use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use crate::approx::{accumulate_stats, noa_rescale, oa_update};
use crate::hadamard::fwht_cols;
use crate::linalg::PreparedHessian;
use crate::matrix::{rms_scale, DenseMatrix};
use crate::model::{
    run_branch, QuantCursor, QuantizedWeight, SubLayerKind, TokenBatch, ToyModel, Weight,
};
use crate::quant::{
    codes_from_grid, gptq_quantize_prepared, minmax_params, rtn_quantize, surrogate_loss,
    GptqConfig, QuantAxis,
};
use crate::{fmath, Error, Result};

/// Monotonic time source for phase accounting. The pipeline itself is
/// `no_std`; callers with an OS clock inject one.
pub trait Clock {
    /// Seconds from an arbitrary fixed origin.
    fn now(&self) -> f64;
}

/// Clock that always reads zero; all phase timings come out zero.
pub struct NullClock;

impl Clock for NullClock {
    fn now(&self) -> f64 {
        0.0
    }
}

/// Quantization method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Rtn,
    Gptq,
    Lloa,
    Loaq,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Rtn => "rtn",
            Method::Gptq => "gptq",
            Method::Lloa => "lloa",
            Method::Loaq => "loaq",
        }
    }
}

/// Method configuration: adjustment parameters and joint-quantization
/// switches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodConfig {
    pub method: Method,
    /// Strength of the `H⁻¹C` input-error compensation, in `[0, 1]`.
    pub alpha: f64,
    /// Strength of the residual term `Δ`, in `[0, 1]`.
    pub beta: f64,
    /// Rotate weights with the orthonormal Hadamard before quantizing.
    pub use_hadamard: bool,
    /// Quantize activations token-wise in the quantized branch.
    pub w4a4: bool,
    /// Activation bit-width; defaults to 4 when `w4a4` is set.
    pub act_bits: Option<u32>,
    /// Per-token RMS rescaling of the `W_out` statistics. On by default;
    /// turning it off yields the sub-layer-only (no normalization)
    /// variant used in ablations.
    pub noa: bool,
    /// Optional (α, β) override for attention sub-layers.
    pub attn_override: Option<(f64, f64)>,
    /// Optional (α, β) override for MLP sub-layers.
    pub mlp_override: Option<(f64, f64)>,
}

impl MethodConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            alpha: 0.0,
            beta: 0.0,
            use_hadamard: false,
            w4a4: false,
            act_bits: None,
            noa: true,
            attn_override: None,
            mlp_override: None,
        }
    }

    pub fn with_alpha_beta(mut self, alpha: f64, beta: f64) -> Self {
        self.alpha = alpha;
        self.beta = beta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let check = |v: f64, reason: &'static str| -> Result<()> {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(Error::InvalidConfig { reason });
            }
            Ok(())
        };
        check(self.alpha, "alpha must lie in [0, 1]")?;
        check(self.beta, "beta must lie in [0, 1]")?;
        for over in [self.attn_override, self.mlp_override]
            .into_iter()
            .flatten()
        {
            check(over.0, "alpha override must lie in [0, 1]")?;
            check(over.1, "beta override must lie in [0, 1]")?;
        }
        if let Some(bits) = self.act_bits {
            if !(2..=16).contains(&bits) {
                return Err(Error::InvalidBits { bits });
            }
        }
        Ok(())
    }

    /// The (α, β) pair the selected method actually applies.
    pub fn effective_alpha_beta(&self) -> (f64, f64) {
        match self.method {
            Method::Rtn | Method::Gptq => (0.0, 0.0),
            Method::Lloa => (self.alpha, 0.0),
            Method::Loaq => (self.alpha, self.beta),
        }
    }

    /// The (α, β) pair for a specific sub-layer kind; kind overrides
    /// replace the shared values, then the method preset masks them.
    pub fn alpha_beta_for(&self, kind: SubLayerKind) -> (f64, f64) {
        let (alpha, beta) = match kind {
            SubLayerKind::Attn => self.attn_override,
            SubLayerKind::Mlp => self.mlp_override,
        }
        .unwrap_or((self.alpha, self.beta));
        match self.method {
            Method::Rtn | Method::Gptq => (0.0, 0.0),
            Method::Lloa => (alpha, 0.0),
            Method::Loaq => (alpha, beta),
        }
    }

    fn effective_act_bits(&self) -> Option<u32> {
        if self.w4a4 {
            Some(self.act_bits.unwrap_or(4))
        } else {
            None
        }
    }
}

/// Everything one `quantize_model` call needs besides the data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineOptions {
    pub method: MethodConfig,
    pub gptq: GptqConfig,
    /// Weight bit-width.
    pub bits: u32,
    /// Tokens whose original residual norm exceeds `outlier_mult` × median
    /// are excluded from the MSE diagnostics.
    pub outlier_mult: f64,
}

impl PipelineOptions {
    pub fn new(method: MethodConfig, bits: u32) -> Self {
        Self {
            method,
            gptq: GptqConfig::default(),
            bits,
            outlier_mult: 5.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.method.validate()?;
        if !(2..=16).contains(&self.bits) {
            return Err(Error::InvalidBits { bits: self.bits });
        }
        if self.gptq.perc_damp.is_nan() || self.gptq.perc_damp <= 0.0 {
            return Err(Error::InvalidConfig {
                reason: "perc_damp must be > 0",
            });
        }
        if self.outlier_mult.is_nan() || self.outlier_mult <= 0.0 {
            return Err(Error::InvalidConfig {
                reason: "outlier multiplier must be > 0",
            });
        }
        Ok(())
    }
}

/// Surrogate losses recorded for one quantized weight.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerLoss {
    pub sublayer: usize,
    pub kind: String,
    pub weight: String,
    /// Dampening actually applied to this weight's Hessian.
    pub lambda: f64,
    /// `tr((Q−W̃)ᵀ(H+λI)(Q−W̃))` for the method's output.
    pub loss: f64,
    /// Same loss for plain RTN on the same `W̃` and grid.
    pub loss_rtn: f64,
}

/// Per-sub-layer output error versus the original model.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SubLayerMse {
    pub sublayer: usize,
    pub kind: String,
    pub mse_unnorm: f64,
    pub mse_norm: f64,
    pub tokens_excluded: usize,
}

/// Wall-clock spent in one pipeline phase.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PhaseTime {
    pub phase: String,
    pub seconds: f64,
}

/// Held-out evaluation metrics.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalMetrics {
    pub sublayer_mse: Vec<SubLayerMse>,
    pub logits_mse: f64,
    pub mean_kl: f64,
}

/// Full record of one pipeline run.
///
/// Timings are excluded from serialization so that reports from identical
/// runs are byte-identical; callers persist them separately if wanted.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PipelineReport {
    pub method: String,
    pub alpha: f64,
    pub beta: f64,
    pub bits: u32,
    pub act_bits: Option<u32>,
    pub use_hadamard: bool,
    pub w4a4: bool,
    pub noa: bool,
    pub attn_override: Option<(f64, f64)>,
    pub mlp_override: Option<(f64, f64)>,
    pub perc_damp: f64,
    pub reorder: bool,
    pub outlier_mult: f64,
    pub layer_losses: Vec<LayerLoss>,
    pub sublayer_mse: Vec<SubLayerMse>,
    pub logits_mse: f64,
    pub mean_kl: f64,
    #[cfg_attr(feature = "serde", serde(skip))]
    pub timings: Vec<PhaseTime>,
}

struct PhaseAccum<'a> {
    clock: &'a dyn Clock,
    entries: Vec<PhaseTime>,
}

impl<'a> PhaseAccum<'a> {
    fn new(clock: &'a dyn Clock) -> Self {
        Self {
            clock,
            entries: Vec::new(),
        }
    }

    fn start(&self) -> f64 {
        self.clock.now()
    }

    fn add(&mut self, phase: &str, start: f64) {
        let dt = self.clock.now() - start;
        if let Some(e) = self.entries.iter_mut().find(|e| e.phase == phase) {
            e.seconds += dt;
        } else {
            self.entries.push(PhaseTime {
                phase: phase.to_owned(),
                seconds: dt,
            });
        }
    }
}

fn at_weight(sublayer: usize, weight: &'static str) -> impl Fn(Error) -> Error {
    move |source| Error::AtWeight {
        sublayer,
        weight,
        source: Box::new(source),
    }
}

/// Quantizes `orig` layer by layer and reports losses, held-out output
/// MSEs, logits MSE and KL, and per-phase wall clock.
pub fn quantize_model(
    orig: &ToyModel,
    calib: &TokenBatch,
    heldout: &TokenBatch,
    opts: &PipelineOptions,
    clock: &dyn Clock,
) -> Result<(ToyModel, PipelineReport)> {
    opts.validate()?;
    let cfg = &opts.method;
    let mut phases = PhaseAccum::new(clock);

    let t = phases.start();
    let work = if cfg.use_hadamard {
        apply_hadamard(orig)?
    } else {
        orig.clone()
    };
    let mut quant = work.clone();
    quant.act_bits = cfg.effective_act_bits();
    phases.add("setup", t);

    let mut layer_losses = Vec::with_capacity(2 * work.layers.len());
    if cfg.method == Method::Rtn {
        // Direct rounding needs no calibration statistics.
        let t = phases.start();
        for k in 0..quant.layers.len() {
            let kind = quant.layers[k].kind;
            for slot in ["w_in", "w_out"] {
                let w = weight_at(&quant, k, slot).clone();
                let params = minmax_params(&w, opts.bits, QuantAxis::PerOutputChannel)
                    .map_err(at_weight(k, slot))?;
                let (codes, q) = rtn_quantize(&w, &params).map_err(at_weight(k, slot))?;
                let frob = q.sub(&w)?.frobenius_sq();
                layer_losses.push(LayerLoss {
                    sublayer: k,
                    kind: kind.name().to_owned(),
                    weight: slot.to_owned(),
                    lambda: 0.0,
                    loss: frob,
                    loss_rtn: frob,
                });
                *weight_slot(&mut quant, k, slot) =
                    Weight::quantized(QuantizedWeight { codes, params });
            }
        }
        phases.add("quantize", t);
    } else {
        let t = phases.start();
        let orig_trace = run_branch(&work, calib, None)?;
        let mut cursor = QuantCursor::new(&quant, calib)?;
        phases.add("forward", t);

        for k in 0..quant.layers.len() {
            let (alpha, beta) = cfg.alpha_beta_for(quant.layers[k].kind);

            // ---- W_in: plain statistics, Δ = 0 --------------------------
            let t = phases.start();
            let x_in_hat = cursor.x_in(&quant).map_err(at_weight(k, "w_in"))?;
            let state =
                accumulate_stats(&orig_trace.x_in[k], &x_in_hat).map_err(at_weight(k, "w_in"))?;
            phases.add("stats", t);
            let loss = quantize_one(
                &mut quant,
                k,
                "w_in",
                &state,
                alpha,
                beta,
                opts,
                &mut phases,
            )?;
            layer_losses.push(loss);

            // ---- W_out: sub-layer residual term, optionally rescaled ----
            let t = phases.start();
            let x_out_hat = cursor
                .x_out(&quant, &x_in_hat)
                .map_err(at_weight(k, "w_out"))?;
            let x_out_orig = &orig_trace.x_out[k];
            let h = &orig_trace.resid[k];
            let h_hat = cursor.resid();
            let w_out_orig = work.layers[k].w_out.matrix();
            let state = if cfg.noa {
                let resc = noa_rescale(h, h_hat, x_out_orig, &x_out_hat, w_out_orig, work.norm_eps)
                    .map_err(at_weight(k, "w_out"))?;
                let mut st = accumulate_stats(&resc.x_scaled, &resc.xhat_scaled)
                    .map_err(at_weight(k, "w_out"))?;
                st.delta = Some(resc.xhat_scaled.t_matmul(&resc.target_resid)?);
                st
            } else {
                let mut st =
                    accumulate_stats(x_out_orig, &x_out_hat).map_err(at_weight(k, "w_out"))?;
                st.delta = Some(x_out_hat.t_matmul(&h.sub(h_hat)?)?);
                st
            };
            // state.delta currently holds X̂ᵀ(residual target); the shared
            // factorization turns it into H⁻¹X̂ᵀ(...) inside quantize_one.
            phases.add("stats", t);
            let loss = quantize_one(
                &mut quant,
                k,
                "w_out",
                &state,
                alpha,
                beta,
                opts,
                &mut phases,
            )?;
            layer_losses.push(loss);

            // ---- refresh the quantized branch through this sub-layer ----
            // x_out_hat already reflects the final quantized W_in, and the
            // residual step below picks up the just-quantized W_out.
            let t = phases.start();
            cursor
                .advance(&quant, &x_out_hat)
                .map_err(at_weight(k, "w_out"))?;
            phases.add("forward", t);
        }
    }

    let t = phases.start();
    let eval = eval_model(orig, &quant, heldout, opts.outlier_mult)?;
    phases.add("eval", t);

    let report = PipelineReport {
        method: cfg.method.name().to_owned(),
        alpha: cfg.alpha,
        beta: cfg.beta,
        bits: opts.bits,
        act_bits: cfg.effective_act_bits(),
        use_hadamard: cfg.use_hadamard,
        w4a4: cfg.w4a4,
        noa: cfg.noa,
        attn_override: cfg.attn_override,
        mlp_override: cfg.mlp_override,
        perc_damp: opts.gptq.perc_damp,
        reorder: opts.gptq.reorder,
        outlier_mult: opts.outlier_mult,
        layer_losses,
        sublayer_mse: eval.sublayer_mse,
        logits_mse: eval.logits_mse,
        mean_kl: eval.mean_kl,
        timings: phases.entries,
    };
    Ok((quant, report))
}

fn weight_at<'m>(model: &'m ToyModel, k: usize, slot: &str) -> &'m DenseMatrix {
    if slot == "w_in" {
        model.layers[k].w_in.matrix()
    } else {
        model.layers[k].w_out.matrix()
    }
}

fn weight_slot<'m>(model: &'m mut ToyModel, k: usize, slot: &str) -> &'m mut Weight {
    if slot == "w_in" {
        &mut model.layers[k].w_in
    } else {
        &mut model.layers[k].w_out
    }
}

/// Updates, quantizes and replaces one weight; returns its loss record.
///
/// `state.delta`, when present, holds `X̂ᵀ(residual target)` and is turned
/// into `Δ = (H+λI)⁻¹X̂ᵀ(...)` through the same factorization used by the
/// GPTQ solver, so both consumers of `H` see one geometry.
#[allow(clippy::too_many_arguments)]
fn quantize_one(
    quant: &mut ToyModel,
    k: usize,
    slot: &'static str,
    state: &crate::approx::OaState,
    alpha: f64,
    beta: f64,
    opts: &PipelineOptions,
    phases: &mut PhaseAccum<'_>,
) -> Result<LayerLoss> {
    let kind = quant.layers[k].kind;
    let wrap = at_weight(k, slot);

    let t = phases.start();
    let prepared = PreparedHessian::prepare(&state.h, opts.gptq.perc_damp, opts.gptq.reorder)
        .map_err(&wrap)?;
    let mut state_solved = state.clone();
    if let Some(raw) = &state_solved.delta {
        state_solved.delta = Some(prepared.solve_mat(raw).map_err(&wrap)?);
    }
    let w = weight_at(quant, k, slot).clone();
    let w_tilde = oa_update(&w, &state_solved, &prepared, alpha, beta).map_err(&wrap)?;
    phases.add("update", t);

    let t = phases.start();
    let params = minmax_params(&w_tilde, opts.bits, QuantAxis::PerOutputChannel).map_err(&wrap)?;
    let q = gptq_quantize_prepared(&w_tilde, &prepared, &params).map_err(&wrap)?;
    let (_, q_rtn) = rtn_quantize(&w_tilde, &params).map_err(&wrap)?;
    let loss = surrogate_loss(&q, &w_tilde, prepared.h_damped())?;
    let loss_rtn = surrogate_loss(&q_rtn, &w_tilde, prepared.h_damped())?;
    let codes = codes_from_grid(&q, &params).map_err(&wrap)?;
    *weight_slot(quant, k, slot) = Weight::quantized(QuantizedWeight { codes, params });
    phases.add("quantize", t);

    Ok(LayerLoss {
        sublayer: k,
        kind: kind.name().to_owned(),
        weight: slot.to_owned(),
        lambda: prepared.lambda(),
        loss,
        loss_rtn,
    })
}

/// Rotates every sub-layer weight with the orthonormal Hadamard and
/// toggles the model's rotation flag. The forward pass inserts the
/// matching transform on the activation side, so the full-precision
/// function is preserved exactly; applying twice restores the original
/// weights (the transform is an involution).
pub fn apply_hadamard(model: &ToyModel) -> Result<ToyModel> {
    let mut out = model.clone();
    for (k, layer) in out.layers.iter_mut().enumerate() {
        let w_in = match &layer.w_in {
            Weight::Full(m) => m,
            Weight::Quantized { .. } => {
                return Err(Error::AtWeight {
                    sublayer: k,
                    weight: "w_in",
                    source: Box::new(Error::InvalidConfig {
                        reason: "apply_hadamard needs full-precision weights",
                    }),
                })
            }
        };
        let w_out = match &layer.w_out {
            Weight::Full(m) => m,
            Weight::Quantized { .. } => {
                return Err(Error::AtWeight {
                    sublayer: k,
                    weight: "w_out",
                    source: Box::new(Error::InvalidConfig {
                        reason: "apply_hadamard needs full-precision weights",
                    }),
                })
            }
        };
        let rotated_in = fwht_cols(w_in).map_err(at_weight(k, "w_in"))?;
        let rotated_out = fwht_cols(w_out).map_err(at_weight(k, "w_out"))?;
        layer.w_in = Weight::Full(rotated_in);
        layer.w_out = Weight::Full(rotated_out);
    }
    out.hadamard = !model.hadamard;
    Ok(out)
}

/// Compares `quant` against `orig` on held-out tokens: per-sub-layer
/// unnormalized and RMS-normalized output MSE over non-outlier tokens,
/// plus final logits MSE and mean KL divergence.
pub fn eval_model(
    orig: &ToyModel,
    quant: &ToyModel,
    heldout: &TokenBatch,
    outlier_mult: f64,
) -> Result<EvalMetrics> {
    if !orig.structurally_matches(quant) {
        return Err(Error::InvalidConfig {
            reason: "eval_model models are not structurally identical",
        });
    }
    if outlier_mult.is_nan() || outlier_mult <= 0.0 {
        return Err(Error::InvalidConfig {
            reason: "outlier multiplier must be > 0",
        });
    }
    let to = run_branch(orig, heldout, None)?;
    let tq = run_branch(quant, heldout, None)?;
    let n = orig.dims.d_model as f64;
    let mut sublayer_mse = Vec::with_capacity(orig.layers.len());
    for k in 0..orig.layers.len() {
        let ho = &to.resid[k + 1];
        let hq = &tq.resid[k + 1];
        let tokens = ho.rows();
        let norms: Vec<f64> = (0..tokens)
            .map(|t| {
                let row = ho.row(t);
                fmath::sqrt(row.iter().map(|v| v * v).sum::<f64>())
            })
            .collect();
        let threshold = outlier_mult * median(&mut norms.clone());
        let mut count = 0usize;
        let mut sum_unnorm = 0.0;
        let mut sum_norm = 0.0;
        for (t, &norm_t) in norms.iter().enumerate() {
            if norm_t > threshold {
                continue;
            }
            count += 1;
            let ro = ho.row(t);
            let rq = hq.row(t);
            let mut d2 = 0.0;
            for (a, b) in ro.iter().zip(rq) {
                let d = a - b;
                d2 += d * d;
            }
            sum_unnorm += d2;
            let so = rms_scale(ro, orig.norm_eps);
            let sq = rms_scale(rq, orig.norm_eps);
            let mut dn = 0.0;
            for (a, b) in ro.iter().zip(rq) {
                let d = a * so - b * sq;
                dn += d * d;
            }
            sum_norm += dn;
        }
        let denom = (count.max(1) as f64) * n;
        sublayer_mse.push(SubLayerMse {
            sublayer: k,
            kind: orig.layers[k].kind.name().to_owned(),
            mse_unnorm: sum_unnorm / denom,
            mse_norm: sum_norm / denom,
            tokens_excluded: tokens - count,
        });
    }
    let lo = to.logits.as_ref().expect("full run has logits");
    let lq = tq.logits.as_ref().expect("full run has logits");
    let mut mse = 0.0;
    for (a, b) in lo.as_slice().iter().zip(lq.as_slice()) {
        let d = a - b;
        mse += d * d;
    }
    mse /= lo.as_slice().len() as f64;
    let mean_kl = mean_kl_divergence(lo, lq);
    Ok(EvalMetrics {
        sublayer_mse,
        logits_mse: mse,
        mean_kl,
    })
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

/// Mean over tokens of `KL(softmax(orig) ‖ softmax(quant))`.
fn mean_kl_divergence(orig_logits: &DenseMatrix, quant_logits: &DenseMatrix) -> f64 {
    let rows = orig_logits.rows();
    let mut total = 0.0;
    let mut lp = Vec::new();
    let mut lq = Vec::new();
    for t in 0..rows {
        log_softmax(orig_logits.row(t), &mut lp);
        log_softmax(quant_logits.row(t), &mut lq);
        let mut kl = 0.0;
        for (a, b) in lp.iter().zip(&lq) {
            kl += fmath::exp(*a) * (a - b);
        }
        total += kl;
    }
    total / rows as f64
}

fn log_softmax(row: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut denom = 0.0;
    for &v in row {
        denom += fmath::exp(v - max);
    }
    let log_denom = fmath::ln(denom);
    out.extend(row.iter().map(|&v| v - max - log_denom));
}

/// The α sweep grid: `{0, 0.1, …, 1.0}`.
pub fn alpha_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// The β sweep grid: `{0, 0.05, …, 1.0}`.
pub fn beta_grid() -> Vec<f64> {
    (0..=20).map(|j| j as f64 / 20.0).collect()
}

/// Index of the best score; ties broken toward the earliest (smallest
/// parameter) entry.
pub fn select_best(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = i;
        }
    }
    best
}

/// One scored grid point.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GridPoint {
    pub alpha: f64,
    pub beta: f64,
    pub score: f64,
}

/// Result of the two-stage (α, β) coordinate search.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GridSearchResult {
    pub alpha: f64,
    pub beta: f64,
    pub score: f64,
    /// All 11 + 21 scored points in sweep order.
    pub table: Vec<GridPoint>,
}

/// Two-stage coordinate search: sweep α with β = 0, fix the best α, then
/// sweep β. Scores are held-out logits MSE; lower is better.
pub fn grid_search(
    orig: &ToyModel,
    calib: &TokenBatch,
    heldout: &TokenBatch,
    base: &PipelineOptions,
    clock: &dyn Clock,
) -> Result<GridSearchResult> {
    let mut opts = *base;
    opts.method.method = Method::Loaq;
    let mut table = Vec::with_capacity(32);

    let alphas = alpha_grid();
    let mut alpha_scores = Vec::with_capacity(alphas.len());
    for &a in &alphas {
        let mut o = opts;
        o.method = o.method.with_alpha_beta(a, 0.0);
        let (_, report) = quantize_model(orig, calib, heldout, &o, clock)?;
        alpha_scores.push(report.logits_mse);
        table.push(GridPoint {
            alpha: a,
            beta: 0.0,
            score: report.logits_mse,
        });
    }
    let best_alpha = alphas[select_best(&alpha_scores)];

    let betas = beta_grid();
    let mut beta_scores = Vec::with_capacity(betas.len());
    for &b in &betas {
        let mut o = opts;
        o.method = o.method.with_alpha_beta(best_alpha, b);
        let (_, report) = quantize_model(orig, calib, heldout, &o, clock)?;
        beta_scores.push(report.logits_mse);
        table.push(GridPoint {
            alpha: best_alpha,
            beta: b,
            score: report.logits_mse,
        });
    }
    let best_idx = select_best(&beta_scores);
    Ok(GridSearchResult {
        alpha: best_alpha,
        beta: betas[best_idx],
        score: beta_scores[best_idx],
        table,
    })
}
