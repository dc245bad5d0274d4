use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use loaq::clock::StdClock;
use loaq::config::{split_even_odd, CalibSource};
use loaq::model_io::{load_model, save_model};
use loaq::report::{
    csv_path, format_timings, write_grid_csv, write_json, write_mse_csv, write_timings, EvalReport,
    GridReport, RunReport,
};
use loaq::search::par_grid_search;
use loaq_core::model::{gen_toy_model, ModelDims};
use loaq_core::pipeline::{eval_model, quantize_model, Method, MethodConfig, PipelineOptions};
use loaq_core::quant::GptqConfig;

/// Layer-wise output-approximation quantization for toy transformers.
#[derive(Parser)]
#[command(name = "loaq", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a seeded toy transformer and save it as a model directory.
    GenToy(GenToyArgs),
    /// Quantize a model layer by layer and write the model + report.
    Quantize(QuantizeArgs),
    /// Compare a quantized model against its original on held-out tokens.
    Eval(EvalArgs),
    /// Two-stage (alpha, beta) coordinate search.
    Gridsearch(GridArgs),
}

#[derive(Args)]
struct GenToyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 128)]
    d_ff: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 8)]
    layers: usize,
    /// RMSNorm epsilon.
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MethodArgs {
    /// rtn | gptq | lloa | loaq
    #[arg(long, default_value = "loaq")]
    method: String,
    /// Input-error compensation strength in [0, 1].
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    /// Residual-term strength in [0, 1].
    #[arg(long, default_value_t = 0.0)]
    beta: f64,
    /// Rotate weights with the orthonormal Hadamard before quantizing.
    #[arg(long)]
    hadamard: bool,
    /// Also quantize activations token-wise in the quantized branch.
    #[arg(long)]
    w4a4: bool,
    /// Activation bit-width (defaults to 4 under --w4a4).
    #[arg(long)]
    act_bits: Option<u32>,
    /// Disable the per-token RMS rescaling of W_out statistics.
    #[arg(long)]
    no_noa: bool,
    /// Override alpha for attention sub-layers only.
    #[arg(long, requires = "beta_attn")]
    alpha_attn: Option<f64>,
    /// Override beta for attention sub-layers only.
    #[arg(long, requires = "alpha_attn")]
    beta_attn: Option<f64>,
    /// Override alpha for MLP sub-layers only.
    #[arg(long, requires = "beta_mlp")]
    alpha_mlp: Option<f64>,
    /// Override beta for MLP sub-layers only.
    #[arg(long, requires = "alpha_mlp")]
    beta_mlp: Option<f64>,
    /// Dampening as a fraction of mean(diag H).
    #[arg(long, default_value_t = 0.01)]
    perc_damp: f64,
    /// Keep the natural input-channel order instead of sorting by diag(H).
    #[arg(long)]
    no_reorder: bool,
    /// Outlier-token exclusion threshold (multiple of the median norm).
    #[arg(long, default_value_t = 5.0)]
    outlier_mult: f64,
}

impl MethodArgs {
    fn build(&self, bits: u32) -> Result<PipelineOptions> {
        let method = match self.method.to_ascii_lowercase().as_str() {
            "rtn" => Method::Rtn,
            "gptq" => Method::Gptq,
            "lloa" => Method::Lloa,
            "loaq" => Method::Loaq,
            other => bail!("unknown method '{other}' (expected rtn|gptq|lloa|loaq)"),
        };
        let mut cfg = MethodConfig::new(method).with_alpha_beta(self.alpha, self.beta);
        cfg.use_hadamard = self.hadamard;
        cfg.w4a4 = self.w4a4;
        cfg.act_bits = self.act_bits;
        cfg.noa = !self.no_noa;
        cfg.attn_override = self.alpha_attn.zip(self.beta_attn);
        cfg.mlp_override = self.alpha_mlp.zip(self.beta_mlp);
        let opts = PipelineOptions {
            method: cfg,
            gptq: GptqConfig {
                perc_damp: self.perc_damp,
                reorder: !self.no_reorder,
            },
            bits,
            outlier_mult: self.outlier_mult,
        };
        opts.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
        Ok(opts)
    }
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    /// `synthetic:<seed>:<seqs>x<len>` or a token-id file.
    #[arg(long)]
    calib: CalibSource,
    /// Held-out tokens for the report metrics; defaults to the calib set.
    #[arg(long)]
    heldout: Option<CalibSource>,
    #[arg(long)]
    bits: u32,
    #[command(flatten)]
    method: MethodArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Where to write wall-clock phase timings (kept out of the report so
    /// identical runs produce byte-identical reports).
    #[arg(long)]
    timings: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    orig: PathBuf,
    #[arg(long)]
    quant: PathBuf,
    #[arg(long)]
    heldout: CalibSource,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 5.0)]
    outlier_mult: f64,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib: CalibSource,
    /// Held-out tokens; defaults to scoring on the odd-indexed calib
    /// sequences while calibrating on the even-indexed ones.
    #[arg(long)]
    heldout: Option<CalibSource>,
    #[arg(long)]
    bits: u32,
    #[command(flatten)]
    method: MethodArgs,
    #[arg(long)]
    report: PathBuf,
    /// Worker threads for scoring grid points.
    #[arg(long)]
    threads: Option<usize>,
}

fn cmd_gen_toy(args: GenToyArgs) -> Result<()> {
    let dims = ModelDims {
        vocab: args.vocab,
        d_model: args.d_model,
        d_ff: args.d_ff,
        heads: args.heads,
        layers: args.layers,
    };
    if args.eps.is_nan() || args.eps <= 0.0 {
        bail!("--eps must be > 0");
    }
    let mut model = gen_toy_model(args.seed, dims).map_err(|e| anyhow::anyhow!("{e}"))?;
    model.norm_eps = args.eps;
    save_model(&model, &args.out)?;
    eprintln!(
        "wrote toy model (vocab {}, d_model {}, d_ff {}, heads {}, layers {}) to {}",
        dims.vocab,
        dims.d_model,
        dims.d_ff,
        dims.heads,
        dims.layers,
        args.out.display()
    );
    Ok(())
}

fn cmd_quantize(args: QuantizeArgs) -> Result<()> {
    let opts = args.method.build(args.bits)?;
    let model = load_model(&args.model)?;
    let calib = args.calib.load(model.dims.vocab)?;
    let heldout_src = args.heldout.clone().unwrap_or_else(|| args.calib.clone());
    let heldout = heldout_src.load(model.dims.vocab)?;
    let clock = StdClock::new();
    let (quant, report) = quantize_model(&model, &calib, &heldout, &opts, &clock)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    save_model(&quant, &args.out)?;
    let run = RunReport {
        model: args.model.display().to_string(),
        calib_source: args.calib.to_string(),
        heldout_source: heldout_src.to_string(),
        report,
    };
    write_json(&run, &args.report)?;
    write_mse_csv(&run.report.sublayer_mse, &csv_path(&args.report))?;
    if let Some(timings_path) = &args.timings {
        write_timings(&run.report.timings, timings_path)?;
    }
    eprintln!("{}", format_timings(&run.report.timings));
    eprintln!(
        "quantized {} at {}-bit ({}): heldout logits mse {:.6e}, kl {:.6e}",
        args.model.display(),
        args.bits,
        run.report.method,
        run.report.logits_mse,
        run.report.mean_kl
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let orig = load_model(&args.orig)?;
    let quant = load_model(&args.quant)?;
    let heldout = args.heldout.load(orig.dims.vocab)?;
    let metrics = eval_model(&orig, &quant, &heldout, args.outlier_mult)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let report = EvalReport {
        orig: args.orig.display().to_string(),
        quant: args.quant.display().to_string(),
        heldout_source: args.heldout.to_string(),
        outlier_mult: args.outlier_mult,
        metrics,
    };
    write_json(&report, &args.report)?;
    write_mse_csv(&report.metrics.sublayer_mse, &csv_path(&args.report))?;
    eprintln!(
        "eval: logits mse {:.6e}, kl {:.6e}",
        report.metrics.logits_mse, report.metrics.mean_kl
    );
    Ok(())
}

fn cmd_gridsearch(args: GridArgs) -> Result<()> {
    let opts = args.method.build(args.bits)?;
    let model = load_model(&args.model)?;
    let full_calib = args.calib.load(model.dims.vocab)?;
    let (calib, heldout, heldout_desc) = match &args.heldout {
        Some(src) => (full_calib, src.load(model.dims.vocab)?, src.to_string()),
        None => {
            let (even, odd) = split_even_odd(&full_calib)
                .context("gridsearch without --heldout splits the calib sequences")?;
            (even, odd, format!("{}#odd-split", args.calib))
        }
    };
    let threads = args
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let (table, outcome) = par_grid_search(&model, &calib, &heldout, &opts, threads);
    match outcome {
        Ok(result) => {
            eprintln!(
                "grid search done: alpha*={} beta*={} score={:.6e} ({} points)",
                result.alpha,
                result.beta,
                result.score,
                result.table.len()
            );
            let report = GridReport {
                model: args.model.display().to_string(),
                calib_source: args.calib.to_string(),
                heldout_source: heldout_desc,
                bits: args.bits,
                table: result.table.clone(),
                result: Some(result),
                error: None,
            };
            write_json(&report, &args.report)?;
            write_grid_csv(&report.table, &csv_path(&args.report))?;
            Ok(())
        }
        Err(e) => {
            // Persist the partial table before failing.
            let report = GridReport {
                model: args.model.display().to_string(),
                calib_source: args.calib.to_string(),
                heldout_source: heldout_desc,
                bits: args.bits,
                result: None,
                table,
                error: Some(format!("{e:#}")),
            };
            write_json(&report, &args.report)?;
            write_grid_csv(&report.table, &csv_path(&args.report))?;
            Err(e)
        }
    }
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenToy(args) => cmd_gen_toy(args),
        Cmd::Quantize(args) => cmd_quantize(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Gridsearch(args) => cmd_gridsearch(args),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
