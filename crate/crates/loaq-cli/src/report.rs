//! Report files: pipeline reports as JSON plus per-layer MSE curves as
//! CSV, grid-search tables, and an optional timings sidecar. Timings are
//! never part of the main report so identical runs produce byte-identical
//! artifacts.

use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::Serialize;

use loaq_core::pipeline::{EvalMetrics, GridSearchResult, PhaseTime, PipelineReport, SubLayerMse};

use crate::model_io::atomic_write;

/// A pipeline report annotated with where its data came from.
#[derive(Debug, Serialize)]
pub struct RunReport {
    pub model: String,
    pub calib_source: String,
    pub heldout_source: String,
    #[serde(flatten)]
    pub report: PipelineReport,
}

/// Evaluation-only report.
#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub orig: String,
    pub quant: String,
    pub heldout_source: String,
    pub outlier_mult: f64,
    #[serde(flatten)]
    pub metrics: EvalMetrics,
}

/// Grid-search report; `error` is set when the sweep ended early and the
/// table holds only the points scored so far.
#[derive(Debug, Serialize)]
pub struct GridReport {
    pub model: String,
    pub calib_source: String,
    pub heldout_source: String,
    pub bits: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<GridSearchResult>,
    pub table: Vec<loaq_core::pipeline::GridPoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    atomic_write(path, format!("{json}\n").as_bytes())?;
    Ok(())
}

/// Sibling `.csv` path for a report file.
pub fn csv_path(report_path: &Path) -> PathBuf {
    report_path.with_extension("csv")
}

/// Per-layer MSE curves: `layer,kind,mse_unnorm,mse_norm,tokens_excluded`.
pub fn write_mse_csv(rows: &[SubLayerMse], path: &Path) -> Result<()> {
    let mut out = String::from("layer,kind,mse_unnorm,mse_norm,tokens_excluded\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.sublayer, r.kind, r.mse_unnorm, r.mse_norm, r.tokens_excluded
        ));
    }
    atomic_write(path, out.as_bytes())?;
    Ok(())
}

/// Grid table as CSV: `alpha,beta,score`.
pub fn write_grid_csv(rows: &[loaq_core::pipeline::GridPoint], path: &Path) -> Result<()> {
    let mut out = String::from("alpha,beta,score\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.alpha, r.beta, r.score));
    }
    atomic_write(path, out.as_bytes())?;
    Ok(())
}

/// Timings sidecar; wall-clock readings, deliberately not deterministic.
pub fn write_timings(timings: &[PhaseTime], path: &Path) -> Result<()> {
    write_json(&timings, path)
}

/// One-line phase summary for stderr.
pub fn format_timings(timings: &[PhaseTime]) -> String {
    let total: f64 = timings.iter().map(|t| t.seconds).sum();
    let parts: Vec<String> = timings
        .iter()
        .map(|t| format!("{} {:.2}s", t.phase, t.seconds))
        .collect();
    format!("phases: {} (total {total:.2}s)", parts.join(", "))
}
