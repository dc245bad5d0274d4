//! Layer-wise post-training quantization with output approximation.
//!
//! The crate quantizes the linear weights of a small residual-stream
//! transformer one layer at a time, compensating each layer for the
//! activation error introduced upstream. Three nested approximation
//! targets are supported on top of plain RTN/GPTQ rounding:
//!
//! * linear-layer output approximation — match `X̂·Q` to `X·W`,
//! * sub-layer output approximation — match `ĥ + X̂·Q` to `h + X·W`
//!   across the residual connection,
//! * normalized sub-layer output approximation — match the RMS-normalized
//!   residual states, via per-token rescaling of the statistics.
//!
//! Everything here is pure computation over dense `f64` matrices; the
//! crate is `no_std`-compatible (with `alloc`). IO, file formats and the
//! CLI live in the companion `loaq` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod approx;
mod fmath;
pub mod hadamard;
pub mod linalg;
pub mod matrix;
pub mod model;
pub mod pipeline;
pub mod quant;

pub use approx::{accumulate_stats, lloa_update, ls_target, noa_rescale, soa_update, OaState};
pub use hadamard::fwht;
pub use linalg::{reverse_cholesky, spd_solve, PreparedHessian, ReverseCholeskyFactor};
pub use matrix::{CodeMatrix, DenseMatrix};
pub use model::{gen_toy_model, CalibTrace, ModelDims, SubLayerKind, TokenBatch, ToyModel};
pub use pipeline::{
    apply_hadamard, eval_model, grid_search, quantize_model, Clock, Method, MethodConfig,
    NullClock, PipelineReport,
};
pub use quant::{
    gptq_quantize, minmax_params, quantize_activations, rtn_quantize, GptqConfig, QuantAxis,
    QuantParams,
};

use alloc::boxed::Box;
use alloc::string::String;
use core::fmt;

/// Errors surfaced by the quantization kernels and the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    ShapeMismatch {
        context: &'static str,
        detail: String,
    },
    /// A matrix constructor or loader saw a NaN/Inf entry.
    NonFinite { context: &'static str },
    /// Cholesky pivot `index` was not strictly positive.
    NotPositiveDefinite { pivot: usize },
    /// The Hadamard transform needs a power-of-two length.
    NotPowerOfTwo { len: usize },
    /// Bit-width outside the supported `2..=16` range.
    InvalidBits { bits: u32 },
    /// Model dimensions failed validation.
    InvalidDims { reason: &'static str },
    /// A token id is outside the model vocabulary.
    TokenOutOfRange { token: u32, vocab: usize },
    /// A configuration value is outside its legal range.
    InvalidConfig { reason: &'static str },
    /// Error while quantizing a specific weight; wraps the root cause.
    AtWeight {
        sublayer: usize,
        weight: &'static str,
        source: Box<Error>,
    },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { context, detail } => {
                write!(f, "shape mismatch in {context}: {detail}")
            }
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::NotPositiveDefinite { pivot } => {
                write!(f, "matrix is not positive definite: pivot {pivot} <= 0")
            }
            Error::NotPowerOfTwo { len } => {
                write!(f, "length {len} is not a power of two")
            }
            Error::InvalidBits { bits } => write!(f, "bit-width {bits} outside 2..=16"),
            Error::InvalidDims { reason } => write!(f, "invalid model dims: {reason}"),
            Error::TokenOutOfRange { token, vocab } => {
                write!(f, "token id {token} outside vocab of size {vocab}")
            }
            Error::InvalidConfig { reason } => write!(f, "invalid config: {reason}"),
            Error::AtWeight {
                sublayer,
                weight,
                source,
            } => write!(f, "sublayer {sublayer} {weight}: {source}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::AtWeight { source, .. } => Some(source.as_ref()),
            _ => None,
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;
