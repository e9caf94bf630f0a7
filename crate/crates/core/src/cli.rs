//! The `skim` command line.
//!
//! Exit codes: 0 on success, 1 when an input or oracle check fails, 2 on
//! usage or configuration errors.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::allocation::{record_error_matrix, AllocInit, ErrorMatrix};
use crate::calibration::{accumulate_hessian_proxy, accumulate_sensitivity, HessianProxy, Sensitivity};
use crate::error::{Error, Result};
use crate::kmeans1d::KmeansConfig;
use crate::matrix::Matrix;
use crate::oracle::run_oracle_suite;
use crate::packing::{dequantize, pack, unpack, PackedBlob};
use crate::pipeline::{generate_fixture, quantize_layer, Fixture, FixtureSpec, OutlierSpec, PipelineConfig, QuantReport};
use crate::store::Bundle;
use crate::util::with_thread_cap;

#[derive(Parser, Debug)]
#[command(name = "skim", version, about = "Mixed-precision k-means weight quantization")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic layer with calibration samples.
    Fixture(FixtureArgs),
    /// Reduce calibration samples to `W`, `G` and `H`.
    Calibrate(InOut),
    /// Record the per-row error matrix for every bit width.
    RecordErrors(RecordArgs),
    /// Quantize a layer into an SKQ1 file.
    Quantize(QuantizeArgs),
    /// Expand an SKQ1 file back into a dense bundle.
    Dequantize(InOut),
    /// Print a quantization report, or its plot data as CSV.
    Report(ReportArgs),
    /// Cross-check the fast solvers against exact oracles.
    OracleCheck(OracleArgs),
}

#[derive(Args, Debug)]
struct InOut {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FixtureArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    rows: usize,
    #[arg(long, default_value_t = 128)]
    cols: usize,
    #[arg(long, default_value_t = 32)]
    tokens: usize,
    #[arg(long, default_value_t = 8)]
    samples: usize,
    #[arg(long, default_value_t = 0.5)]
    row_sigma: f64,
    #[arg(long, default_value_t = 0)]
    outlier_cols: usize,
    #[arg(long, default_value_t = 100.0)]
    outlier_scale: f64,
}

#[derive(Args, Debug)]
struct RecordArgs {
    #[command(flatten)]
    io: InOut,
    #[arg(long)]
    bmin: Option<u8>,
    #[arg(long)]
    bmax: Option<u8>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    restarts: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InitArg {
    Min,
    Floor,
}

#[derive(Args, Debug)]
struct QuantizeArgs {
    #[command(flatten)]
    io: InOut,
    /// Where to write the JSON report (default: `<out>.json`).
    #[arg(long)]
    report: Option<PathBuf>,
    /// JSON pipeline config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Reuse an error bundle from `record-errors`.
    #[arg(long)]
    errors: Option<PathBuf>,
    #[arg(long)]
    bit: Option<f64>,
    #[arg(long)]
    bmin: Option<u8>,
    #[arg(long)]
    bmax: Option<u8>,
    #[arg(long)]
    no_mixed: bool,
    #[arg(long, value_enum)]
    alloc_init: Option<InitArg>,
    #[arg(long)]
    no_scale: bool,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    restarts: Option<usize>,
    /// Print the scaling loss trace as `step,loss,lr` lines.
    #[arg(long)]
    trace: bool,
    /// Also solve the allocation exactly and report the greedy gap.
    #[arg(long)]
    oracle: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CsvKind {
    /// `row,bits,error`
    Rows,
    /// `bits,rows`
    Hist,
    /// `step,loss,lr`
    Trace,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum)]
    csv: Option<CsvKind>,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    trials: usize,
}

enum Failure {
    Usage(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InfeasibleBudget { .. } | Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            other => Failure::Check(other.to_string()),
        }
    }
}

type CliResult = std::result::Result<(), Failure>;

/// Parses `argv` (program name first), runs the subcommand and returns
/// the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match with_thread_cap(move || dispatch(cli.cmd)) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("skim: {msg}");
            2
        }
        Err(Failure::Check(msg)) => {
            eprintln!("skim: {msg}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::Fixture(a) => fixture(a),
        Command::Calibrate(a) => calibrate(a),
        Command::RecordErrors(a) => record(a),
        Command::Quantize(a) => quantize(a),
        Command::Dequantize(a) => dequant(a),
        Command::Report(a) => report(a),
        Command::OracleCheck(a) => oracle_check(a),
    }
}

fn fixture(a: FixtureArgs) -> CliResult {
    let spec = FixtureSpec {
        seed: a.seed,
        n: a.rows,
        m: a.cols,
        k: a.tokens,
        num_samples: a.samples,
        row_sigma: a.row_sigma,
        outliers: (a.outlier_cols > 0).then_some(OutlierSpec { columns: a.outlier_cols, scale: a.outlier_scale }),
    };
    let f = generate_fixture(&spec)?;
    let mut bundle = f.to_bundle();
    bundle.set_meta("seed", a.seed.to_string());
    bundle.save(&a.out)?;
    println!("wrote {} ({}x{}, {} samples)", a.out.display(), a.rows, a.cols, a.samples);
    Ok(())
}

/// `W`, `G` and `H` from a bundle holding either them directly or raw
/// calibration samples.
fn load_layer(path: &Path) -> Result<(Matrix, Sensitivity, HessianProxy)> {
    let bundle = Bundle::load(path)?;
    if let (Some(g), Some(h)) = (bundle.get("G"), bundle.get("H")) {
        let w = bundle.require("W")?.clone();
        return Ok((w, Sensitivity::new(g.clone())?, HessianProxy::new(h.clone())?));
    }
    let f = Fixture::from_bundle(&bundle)?;
    Ok((f.w.clone(), f.sensitivity()?, f.hessian()?))
}

fn calibrate(a: InOut) -> CliResult {
    let f = Fixture::from_bundle(&Bundle::load(&a.input)?)?;
    let g = accumulate_sensitivity(&f.samples)?;
    let h = accumulate_hessian_proxy(&f.samples)?;
    let mut out = Bundle::new();
    out.push(f.w.with_name("W"));
    out.push(g.g.with_name("G"));
    out.push(h.h.with_name("H"));
    out.save(&a.out)?;
    println!("wrote {} from {} samples", a.out.display(), f.samples.len());
    Ok(())
}

fn record(a: RecordArgs) -> CliResult {
    let defaults = PipelineConfig::default();
    let (b_min, b_max) = (a.bmin.unwrap_or(defaults.b_min), a.bmax.unwrap_or(defaults.b_max));
    crate::allocation::check_bit_range(b_min, b_max).map_err(|e| Failure::Usage(e.to_string()))?;
    let kmeans = KmeansConfig {
        seed: a.seed.unwrap_or(defaults.kmeans.seed),
        restarts: a.restarts.unwrap_or(defaults.kmeans.restarts),
    };
    let (w, g, h) = load_layer(&a.io.input)?;
    let e = record_error_matrix(&w, &g, &h, b_min, b_max, &kmeans)?;
    let mut bundle = e.to_bundle();
    bundle.set_meta("seed", kmeans.seed.to_string());
    bundle.set_meta("restarts", kmeans.restarts.to_string());
    bundle.save(&a.io.out)?;
    println!("wrote {} ({} rows, bits {b_min}..={b_max})", a.io.out.display(), e.n());
    Ok(())
}

fn build_config(a: &QuantizeArgs) -> std::result::Result<PipelineConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(b) = a.bit {
        cfg.target_bit = b;
    }
    if let Some(b) = a.bmin {
        cfg.b_min = b;
    }
    if let Some(b) = a.bmax {
        cfg.b_max = b;
    }
    if a.no_mixed {
        cfg.mixed_precision = false;
    }
    if let Some(init) = a.alloc_init {
        cfg.allocation_init = match init {
            InitArg::Min => AllocInit::Min,
            InitArg::Floor => AllocInit::Floor,
        };
    }
    if a.no_scale {
        cfg.scaling = false;
    }
    if let Some(i) = a.iters {
        cfg.iterations = i;
    }
    if let Some(s) = a.seed {
        cfg.kmeans.seed = s;
    }
    if let Some(r) = a.restarts {
        cfg.kmeans.restarts = r;
    }
    if a.oracle {
        cfg.oracle = true;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn quantize(a: QuantizeArgs) -> CliResult {
    let cfg = build_config(&a)?;
    let (w, g, h) = load_layer(&a.io.input)?;
    let cached = a.errors.as_deref().map(|p| ErrorMatrix::from_bundle(&Bundle::load(p)?)).transpose()?;
    let (layer, report) = quantize_layer(&w, &g, &h, &cfg, cached.as_ref())?;
    let blob = pack(&layer)?;
    fs::write(&a.io.out, blob.as_bytes()).map_err(Error::from)?;
    let report_path = a.report.clone().unwrap_or_else(|| a.io.out.with_extension("json"));
    fs::write(&report_path, serde_json::to_string_pretty(&report).map_err(Error::from)?).map_err(Error::from)?;

    if a.trace {
        for t in &report.trace {
            println!("{},{:e},{:e}", t.step, t.loss, t.lr);
        }
    }
    println!(
        "{}: {}x{} at {:.4} bits/weight (labels {:.4}), loss {:.6e} -> {:.6e}",
        a.io.out.display(),
        report.n,
        report.m,
        report.size.effective_bits_per_weight,
        report.size.label_bits_per_weight,
        report.loss_alpha_one,
        report.loss_final
    );
    Ok(())
}

fn dequant(a: InOut) -> CliResult {
    let bytes = fs::read(&a.input).map_err(Error::from)?;
    let layer = unpack(&PackedBlob(bytes))?;
    let mut out = Bundle::new();
    out.push(dequantize(&layer)?.with_name("W"));
    out.set_meta("average_bits", layer.average_bits().to_string());
    out.save(&a.out)?;
    println!("wrote {} ({}x{})", a.out.display(), layer.n, layer.m);
    Ok(())
}

fn report(a: ReportArgs) -> CliResult {
    let text = fs::read_to_string(&a.input).map_err(Error::from)?;
    let r: QuantReport = serde_json::from_str(&text).map_err(Error::from)?;
    print!("{}", render_report(&r, a.csv));
    Ok(())
}

fn render_report(r: &QuantReport, csv: Option<CsvKind>) -> String {
    let mut s = String::new();
    match csv {
        Some(CsvKind::Rows) => {
            s.push_str("row,bits,error\n");
            for (i, (b, e)) in r.row_bits.iter().zip(&r.row_errors).enumerate() {
                let _ = writeln!(s, "{i},{b},{e:e}");
            }
        }
        Some(CsvKind::Hist) => {
            s.push_str("bits,rows\n");
            for h in &r.bit_histogram {
                let _ = writeln!(s, "{},{}", h.bits, h.rows);
            }
        }
        Some(CsvKind::Trace) => {
            s.push_str("step,loss,lr\n");
            for t in &r.trace {
                let _ = writeln!(s, "{},{:e},{:e}", t.step, t.loss, t.lr);
            }
        }
        None => {
            if let Some(name) = r.meta.get("layer") {
                let _ = writeln!(s, "layer            {name}");
            }
            let _ = writeln!(s, "shape            {} x {}", r.n, r.m);
            let _ = writeln!(s, "target bits      {} (range {}..={})", r.target_bit, r.b_min, r.b_max);
            let _ = writeln!(s, "average bits     {:.4}{}", r.average_bits, if r.saturated { " (saturated)" } else { "" });
            let _ = writeln!(s, "effective bits   {:.4}", r.size.effective_bits_per_weight);
            let _ = writeln!(s, "blob bytes       {}", r.size.total_bytes);
            for h in &r.bit_histogram {
                let _ = writeln!(s, "  {}-bit rows     {}", h.bits, h.rows);
            }
            let _ = writeln!(s, "loss (alpha=1)   {:.6e}", r.loss_alpha_one);
            let _ = writeln!(s, "loss (final)     {:.6e}", r.loss_final);
            let _ = writeln!(s, "loss (packed)    {:.6e}", r.loss_packed);
            if let Some(o) = &r.oracle {
                let _ = writeln!(s, "greedy vs exact  {:.6e} vs {:.6e} (gap {:.3e})", o.greedy_error, o.dp_error, o.gap);
            }
            let _ = writeln!(s, "wall time        {:.1} ms", r.wall_time_ms);
        }
    }
    s
}

fn oracle_check(a: OracleArgs) -> CliResult {
    if a.trials == 0 {
        return Err(Failure::Usage("--trials must be at least 1".into()));
    }
    let s = run_oracle_suite(a.seed, a.trials)?;
    println!("trials                 {}", s.trials);
    println!("kmeans exact matches   {}/{} (worst gap {:.3e})", s.kmeans_exact, s.trials, s.kmeans_worst_gap);
    println!("kmeans violations      {}", s.kmeans_violations);
    println!("convex mismatches      {}", s.convex_mismatches);
    println!("allocation violations  {}", s.alloc_violations);
    println!(
        "greedy gap             median {:.3e}  p90 {:.3e}  max {:.3e}",
        s.gap_quantile(0.5),
        s.gap_quantile(0.9),
        s.gap_quantile(1.0)
    );
    println!("gradient max rel err   {:.3e}", s.grad_max_rel_err);
    if s.passed() {
        println!("ok");
        Ok(())
    } else {
        Err(Failure::Check("oracle check failed".into()))
    }
}
