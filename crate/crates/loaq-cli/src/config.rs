//! Calibration token sources: a seeded synthetic sampler or a token-id
//! file with one whitespace-separated sequence per line.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use loaq_core::model::TokenBatch;

/// Where calibration or held-out tokens come from.
///
/// `synthetic:<seed>:<seqs>x<len>` draws uniformly from the model's
/// vocabulary; anything else is read as a token-id file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CalibSource {
    Synthetic { seed: u64, seqs: usize, len: usize },
    File(PathBuf),
}

impl FromStr for CalibSource {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("synthetic:") {
            let mut parts = rest.splitn(2, ':');
            let seed: u64 = parts
                .next()
                .unwrap_or_default()
                .parse()
                .with_context(|| format!("bad seed in calibration source '{s}'"))?;
            let shape = parts
                .next()
                .with_context(|| format!("missing <seqs>x<len> in calibration source '{s}'"))?;
            let (seqs, len) = shape
                .split_once('x')
                .with_context(|| format!("expected <seqs>x<len> in calibration source '{s}'"))?;
            let seqs: usize = seqs
                .parse()
                .with_context(|| format!("bad sequence count in '{s}'"))?;
            let len: usize = len
                .parse()
                .with_context(|| format!("bad sequence length in '{s}'"))?;
            if seqs == 0 || len == 0 {
                bail!("calibration source '{s}' must have nonzero seqs and len");
            }
            Ok(CalibSource::Synthetic { seed, seqs, len })
        } else {
            Ok(CalibSource::File(PathBuf::from(s)))
        }
    }
}

impl fmt::Display for CalibSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CalibSource::Synthetic { seed, seqs, len } => {
                write!(f, "synthetic:{seed}:{seqs}x{len}")
            }
            CalibSource::File(p) => write!(f, "{}", p.display()),
        }
    }
}

impl CalibSource {
    /// Materializes the token batch for a model with the given vocab.
    pub fn load(&self, vocab: usize) -> Result<TokenBatch> {
        match self {
            CalibSource::Synthetic { seed, seqs, len } => {
                TokenBatch::synthetic(*seed, *seqs, *len, vocab)
                    .map_err(|e| anyhow::anyhow!("synthetic tokens: {e}"))
            }
            CalibSource::File(path) => load_token_file(path),
        }
    }
}

/// Reads one sequence of whitespace-separated token ids per line.
pub fn load_token_file(path: &Path) -> Result<TokenBatch> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading token file {}", path.display()))?;
    let mut seqs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let seq: Vec<u32> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<u32>().with_context(|| {
                    format!(
                        "{}:{}: invalid token id '{tok}'",
                        path.display(),
                        lineno + 1
                    )
                })
            })
            .collect::<Result<_>>()?;
        seqs.push(seq);
    }
    TokenBatch::new(seqs).map_err(|e| anyhow::anyhow!("token file {}: {e}", path.display()))
}

/// Deterministic even/odd split used when a grid search is given no
/// explicit held-out source: even-indexed sequences calibrate, odd ones
/// score.
pub fn split_even_odd(batch: &TokenBatch) -> Result<(TokenBatch, TokenBatch)> {
    let seqs = batch.seqs();
    if seqs.len() < 2 {
        bail!("need at least 2 sequences to derive a held-out split");
    }
    let even: Vec<Vec<u32>> = seqs.iter().step_by(2).cloned().collect();
    let odd: Vec<Vec<u32>> = seqs.iter().skip(1).step_by(2).cloned().collect();
    Ok((
        TokenBatch::new(even).map_err(|e| anyhow::anyhow!("{e}"))?,
        TokenBatch::new(odd).map_err(|e| anyhow::anyhow!("{e}"))?,
    ))
}
