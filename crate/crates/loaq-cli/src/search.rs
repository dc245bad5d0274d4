//! Parallel grid search. Grid points are independent given a frozen
//! calibration set, so they are scored on worker threads; the sweep
//! order, tie-breaking and scores are identical to the sequential
//! reference in `loaq_core::pipeline::grid_search`.

use std::thread;

use anyhow::{anyhow, Result};
use loaq_core::model::{TokenBatch, ToyModel};
use loaq_core::pipeline::{
    alpha_grid, beta_grid, quantize_model, select_best, GridPoint, GridSearchResult, Method,
    NullClock, PipelineOptions,
};

fn score_points(
    model: &ToyModel,
    calib: &TokenBatch,
    heldout: &TokenBatch,
    base: &PipelineOptions,
    points: &[(f64, f64)],
    threads: usize,
) -> Vec<Result<f64>> {
    let threads = threads.max(1).min(points.len().max(1));
    let chunk = points.len().div_ceil(threads);
    let mut results: Vec<Result<f64>> = Vec::with_capacity(points.len());
    thread::scope(|s| {
        let mut handles = Vec::new();
        for batch in points.chunks(chunk) {
            handles.push(s.spawn(move || {
                batch
                    .iter()
                    .map(|&(alpha, beta)| {
                        let mut opts = *base;
                        opts.method.method = Method::Loaq;
                        opts.method = opts.method.with_alpha_beta(alpha, beta);
                        quantize_model(model, calib, heldout, &opts, &NullClock)
                            .map(|(_, report)| report.logits_mse)
                            .map_err(|e| anyhow!("grid point (α={alpha}, β={beta}): {e}"))
                    })
                    .collect::<Vec<Result<f64>>>()
            }));
        }
        for h in handles {
            results.extend(h.join().expect("grid worker panicked"));
        }
    });
    results
}

/// Two-stage (α, β) sweep on worker threads.
///
/// Returns the points scored so far alongside the outcome, so a caller
/// can persist a partial table when a point fails.
pub fn par_grid_search(
    model: &ToyModel,
    calib: &TokenBatch,
    heldout: &TokenBatch,
    base: &PipelineOptions,
    threads: usize,
) -> (Vec<GridPoint>, Result<GridSearchResult>) {
    let mut table = Vec::with_capacity(32);

    let alphas = alpha_grid();
    let alpha_points: Vec<(f64, f64)> = alphas.iter().map(|&a| (a, 0.0)).collect();
    let mut alpha_scores = Vec::with_capacity(alphas.len());
    for (i, res) in score_points(model, calib, heldout, base, &alpha_points, threads)
        .into_iter()
        .enumerate()
    {
        match res {
            Ok(score) => {
                table.push(GridPoint {
                    alpha: alphas[i],
                    beta: 0.0,
                    score,
                });
                alpha_scores.push(score);
            }
            Err(e) => return (table, Err(e)),
        }
    }
    let best_alpha = alphas[select_best(&alpha_scores)];

    let betas = beta_grid();
    let beta_points: Vec<(f64, f64)> = betas.iter().map(|&b| (best_alpha, b)).collect();
    let mut beta_scores = Vec::with_capacity(betas.len());
    for (j, res) in score_points(model, calib, heldout, base, &beta_points, threads)
        .into_iter()
        .enumerate()
    {
        match res {
            Ok(score) => {
                table.push(GridPoint {
                    alpha: best_alpha,
                    beta: betas[j],
                    score,
                });
                beta_scores.push(score);
            }
            Err(e) => return (table, Err(e)),
        }
    }
    let best = select_best(&beta_scores);
    let result = GridSearchResult {
        alpha: best_alpha,
        beta: betas[best],
        score: beta_scores[best],
        table: table.clone(),
    };
    (table, Ok(result))
}
