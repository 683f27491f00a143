//! Command-line front end.
//!
//! Every subcommand validates its whole run specification before doing any
//! work, prints an aligned table (or JSON with `--json`) to stdout, and with
//! `--out` writes one JSON report that echoes the specification, the seed,
//! the tolerances and the library version.
//!
//! Exit codes: 0 success, 1 property failure or no convergence, 2 invalid
//! input (including the dense-materialization cap), 3 diverged training.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use serde_json::Value;

use crate::bundle::{layer_to_bundle, Bundle};
use crate::error::{Error, Result};
use crate::fusion::{param_count, FusionConfig, FusionLayer, Rank, Variant};
use crate::harness::{self, RunStatus, SyntheticTask, TaskOptions, TrainOptions};
use crate::memprobe::{self, AllocStats};
use crate::verify::{self, SuiteOptions, DEFAULT_CAP};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "polyfuse", version, about = "Polynomial fusion layers: accounting, verification, benchmarks and toy training")]
pub struct Cli {
    /// Print the JSON report to stdout instead of a table.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Parameter counts and compression ratios against Dense.
    Params(ParamsArgs),
    /// Factorized forward vs dense joint-tensor evaluation.
    Equiv(EquivArgs),
    /// Analytic gradients vs central finite differences.
    Checkgrad(CheckgradArgs),
    /// Forward-pass timing and allocation profile.
    Bench(BenchArgs),
    /// Teacher-student regression with Adam.
    Traintoy(TraintoyArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Common {
    /// JSON config file: one object or an array of objects.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ParamsArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SuiteArgs {
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    /// Worker threads for trials (0 or 1: serial).
    #[arg(long, default_value_t = 0)]
    pub parallel: usize,
    /// Refuse configs whose dense joint tensor exceeds this many entries.
    #[arg(long, default_value_t = DEFAULT_CAP)]
    pub cap: usize,
    /// Draw random small shapes per trial instead of fixed dims.
    #[arg(long, conflicts_with = "config")]
    pub random: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EquivArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub suite: SuiteArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CheckgradArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub suite: SuiteArgs,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BenchArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 200)]
    pub iterations: usize,
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TraintoyArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 2000)]
    pub epochs: usize,
    /// Mini-batch size; full batch when omitted.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.0)]
    pub lambda2: f64,
    /// Training MSE at or below this counts as converged.
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    #[arg(long, default_value_t = harness::TEACHER_STD)]
    pub teacher_std: f64,
    /// Replay a saved task snapshot instead of generating one.
    #[arg(long, conflicts_with = "config")]
    pub task: Option<PathBuf>,
    /// Save the generated task as `<stem>.json` + `<stem>.bin`.
    #[arg(long)]
    pub save_task: Option<PathBuf>,
    /// Save the trained student the same way.
    #[arg(long)]
    pub save_student: Option<PathBuf>,
}

/// What a finished command hands back to the entry point.
pub struct Outcome {
    pub exit_code: i32,
    pub report: Value,
    pub table: String,
}

/// Parses `args` and runs, writing human output to `stdout` and
/// diagnostics to `stderr`. Returns the process exit code.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(stderr, "{text}")
            } else {
                write!(stdout, "{text}")
            };
            return code;
        }
    };
    match run(&cli) {
        Ok(outcome) => {
            let shown = if cli.json {
                serde_json::to_string_pretty(&outcome.report).expect("report serializes") + "\n"
            } else {
                outcome.table
            };
            let _ = stdout.write_all(shown.as_bytes());
            outcome.exit_code
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_INVALID
        }
    }
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let (common, outcome) = match &cli.command {
        Command::Params(a) => (&a.common, cmd_params(a)?),
        Command::Equiv(a) => (&a.common, cmd_equiv(a)?),
        Command::Checkgrad(a) => (&a.common, cmd_checkgrad(a)?),
        Command::Bench(a) => (&a.common, cmd_bench(a)?),
        Command::Traintoy(a) => (&a.common, cmd_traintoy(a)?),
    };
    if let Some(path) = &common.out {
        let mut text = serde_json::to_string_pretty(&outcome.report)?;
        text.push('\n');
        fs::write(path, text)?;
    }
    Ok(outcome)
}

/// Reads a config file holding one object or an array of objects.
pub fn load_configs(path: &Path) -> Result<Vec<FusionConfig>> {
    let text = fs::read_to_string(path)?;
    let value: Value = serde_json::from_str(&text)?;
    match value {
        Value::Array(items) => items
            .into_iter()
            .map(|v| serde_json::from_value(v).map_err(Error::from))
            .collect(),
        other => Ok(vec![serde_json::from_value(other)?]),
    }
}

fn configs_or(common: &Common, default: impl FnOnce() -> Vec<FusionConfig>) -> Result<Vec<FusionConfig>> {
    match &common.config {
        Some(path) => load_configs(path),
        None => Ok(default()),
    }
}

fn envelope(command: &str, spec: &impl Serialize, configs: &[FusionConfig], results: Value, passed: bool) -> Value {
    serde_json::json!({
        "command": command,
        "version": crate::VERSION,
        "spec": spec,
        "configs": configs,
        "passed": passed,
        "results": results,
    })
}

/// The first `left` columns are left-aligned, the rest right-aligned.
pub fn render_table(headers: &[&str], left: usize, rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i < left { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(headers.to_vec());
    out += &line(widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().iter().map(|s| s.as_str()).collect());
    for row in rows {
        out += &line(row.iter().map(|s| s.as_str()).collect());
    }
    out
}

fn group_digits(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn describe(config: &FusionConfig) -> String {
    let rank = match config.rank {
        Rank::None => String::new(),
        Rank::Cp(k) => format!(" k={k}"),
        Rank::Tucker([k1, k2, k3]) => format!(" k=({k1},{k2},{k3})"),
    };
    format!("m={} a={} d={}{}", config.output_dim(), config.a, config.d, rank)
}

// ---- params ----

#[derive(Debug, Clone, Serialize)]
pub struct ParamsRow {
    pub variant: Variant,
    pub config: FusionConfig,
    pub params: usize,
    pub dense_params: usize,
    /// `dense_params / params`; null when the variant has no parameters.
    pub ratio: Option<f64>,
}

pub fn params_rows(configs: &[FusionConfig]) -> Result<Vec<ParamsRow>> {
    configs
        .iter()
        .map(|c| {
            c.validate()?;
            let dense = FusionConfig {
                variant: Variant::Dense,
                m: c.output_dim(),
                rank: Rank::None,
                ..*c
            };
            let params = param_count(c);
            let dense_params = param_count(&dense);
            Ok(ParamsRow {
                variant: c.variant,
                config: *c,
                params,
                dense_params,
                ratio: (params > 0).then(|| dense_params as f64 / params as f64),
            })
        })
        .collect()
}

fn cmd_params(args: &ParamsArgs) -> Result<Outcome> {
    let configs = configs_or(&args.common, || Variant::ALL.iter().map(|&v| FusionConfig::full_scale(v)).collect())?;
    let rows = params_rows(&configs)?;
    let table = render_table(
        &["variant", "dims", "params", "ratio"],
        2,
        &rows
            .iter()
            .map(|r| {
                vec![
                    r.variant.name().to_string(),
                    describe(&r.config),
                    group_digits(r.params),
                    r.ratio.map_or("-".into(), |x| format!("{x:.1}")),
                ]
            })
            .collect::<Vec<_>>(),
    );
    Ok(Outcome {
        exit_code: EXIT_OK,
        report: envelope("params", args, &configs, serde_json::to_value(&rows)?, true),
        table,
    })
}

// ---- equiv / checkgrad ----

fn small_defaults(variants: &[Variant]) -> Vec<FusionConfig> {
    variants
        .iter()
        .map(|&v| FusionConfig::with_uniform_rank(v, 8, 8, 8, 0, 4).expect("valid default"))
        .collect()
}

fn suite_options(common: &Common, suite: &SuiteArgs, default_trials: usize, default_tol: f64, h: f64) -> Result<SuiteOptions> {
    let tol = suite.tol.unwrap_or(default_tol);
    if tol.is_nan() || tol < 0.0 {
        return Err(Error::InvalidArgument(format!("--tol must be non-negative, got {tol}")));
    }
    Ok(SuiteOptions {
        trials: suite.trials.unwrap_or(default_trials),
        seed: common.seed,
        tol,
        parallel: suite.parallel,
        cap: suite.cap,
        h,
        ..SuiteOptions::default()
    })
}

fn fmt_err(x: f64) -> String {
    format!("{x:.3e}")
}

fn verdict(ok: bool) -> String {
    if ok { "ok" } else { "FAIL" }.to_string()
}

fn cmd_equiv(args: &EquivArgs) -> Result<Outcome> {
    let opts = suite_options(&args.common, &args.suite, 1000, 1e-10, 1e-5)?;
    let configs = configs_or(&args.common, || small_defaults(&Variant::FACTORIZED))?;
    for c in &configs {
        c.validate()?;
        if c.variant == Variant::Concat {
            return Err(Error::InvalidConfig("equiv does not apply to Concat".into()));
        }
        if !args.suite.random {
            verify::check_cap(c, opts.cap)?;
        }
    }
    let mut results = Vec::new();
    for c in &configs {
        let fixed = (!args.suite.random).then_some(c);
        results.push(verify::equivalence_suite(c.variant, fixed, &opts)?);
    }
    let passed = results.iter().all(|r| r.passed);
    let table = render_table(
        &["variant", "dims", "trials", "max rel err", "tol", "status"],
        2,
        &results
            .iter()
            .zip(&configs)
            .map(|(r, c)| {
                vec![
                    r.variant.name().into(),
                    if args.suite.random { "random".into() } else { describe(c) },
                    r.trials.to_string(),
                    fmt_err(r.max_rel_error),
                    fmt_err(opts.tol),
                    verdict(r.passed),
                ]
            })
            .collect::<Vec<_>>(),
    );
    let mut report = envelope("equiv", args, &configs, serde_json::to_value(&results)?, passed);
    report["tol"] = opts.tol.into();
    Ok(Outcome {
        exit_code: if passed { EXIT_OK } else { EXIT_FAILED },
        report,
        table,
    })
}

fn cmd_checkgrad(args: &CheckgradArgs) -> Result<Outcome> {
    if !(args.h > 0.0 && args.h.is_finite()) {
        return Err(Error::InvalidArgument(format!("--h must be positive, got {}", args.h)));
    }
    let opts = suite_options(&args.common, &args.suite, 100, 1e-6, args.h)?;
    let configs = configs_or(&args.common, || small_defaults(&Variant::ALL))?;
    for c in &configs {
        c.validate()?;
        if !args.suite.random {
            verify::check_cap(c, opts.cap)?;
        }
    }
    let mut results = Vec::new();
    for c in &configs {
        let fixed = (!args.suite.random).then_some(c);
        results.push(verify::gradient_suite(c.variant, fixed, &opts)?);
    }
    let passed = results.iter().all(|r| r.passed);
    let mut rows = Vec::new();
    for r in &results {
        for a in &r.arrays {
            rows.push(vec![
                r.variant.name().into(),
                a.array.clone(),
                r.trials.to_string(),
                fmt_err(a.max_rel_error),
                verdict(a.max_rel_error <= opts.tol),
            ]);
        }
    }
    let table = render_table(&["variant", "array", "trials", "max rel err", "status"], 2, &rows);
    let mut report = envelope("checkgrad", args, &configs, serde_json::to_value(&results)?, passed);
    report["tol"] = opts.tol.into();
    report["h"] = args.h.into();
    Ok(Outcome {
        exit_code: if passed { EXIT_OK } else { EXIT_FAILED },
        report,
        table,
    })
}

// ---- bench ----

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub variant: Variant,
    pub config: FusionConfig,
    pub iterations: usize,
    pub median_ns: Option<f64>,
    pub p95_ns: Option<f64>,
    /// Allocation profile of one forward call.
    pub alloc: AllocStats,
    /// Bytes the dense joint tensor would need.
    pub joint_bytes: usize,
    /// True when no single forward allocation reached `joint_bytes`.
    /// Only meaningful when `alloc.tracked`.
    pub dense_free: bool,
}

/// Nearest-rank percentile of a sorted slice.
pub fn percentile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1])
}

pub fn bench_config(config: &FusionConfig, iterations: usize, warmup: usize, seed: u64) -> Result<BenchRow> {
    config.validate()?;
    let mut rng = harness::stream_rng(seed, 0);
    let layer = FusionLayer::random(*config, harness::INIT_STD, &mut rng)?;
    let z_a: Vec<f64> = (0..config.a).map(|_| rng.sample(StandardNormal)).collect();
    let z_d: Vec<f64> = (0..config.d).map(|_| rng.sample(StandardNormal)).collect();
    let (first, alloc) = memprobe::measure(|| layer.forward(&z_a, &z_d));
    first?;
    for _ in 0..warmup.min(iterations) {
        std::hint::black_box(layer.forward(&z_a, &z_d)?);
    }
    let mut times = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let start = Instant::now();
        std::hint::black_box(layer.forward(std::hint::black_box(&z_a), &z_d)?);
        times.push(start.elapsed().as_nanos() as f64);
    }
    times.sort_by(f64::total_cmp);
    let joint_bytes = config.joint_numel() * std::mem::size_of::<f64>();
    Ok(BenchRow {
        variant: config.variant,
        config: *config,
        iterations,
        median_ns: percentile(&times, 0.5),
        p95_ns: percentile(&times, 0.95),
        dense_free: alloc.largest_bytes < joint_bytes,
        alloc,
        joint_bytes,
    })
}

fn cmd_bench(args: &BenchArgs) -> Result<Outcome> {
    let configs = configs_or(&args.common, || {
        Variant::FACTORIZED.iter().map(|&v| FusionConfig::full_scale(v)).collect()
    })?;
    for c in &configs {
        c.validate()?;
    }
    let rows: Vec<BenchRow> = configs
        .iter()
        .map(|c| bench_config(c, args.iterations, args.warmup, args.common.seed))
        .collect::<Result<_>>()?;
    let passed = rows.iter().all(|r| !r.alloc.tracked || r.dense_free);
    let ns = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.0}"));
    let table = render_table(
        &["variant", "dims", "iters", "median ns", "p95 ns", "peak bytes", "largest alloc"],
        2,
        &rows
            .iter()
            .map(|r| {
                vec![
                    r.variant.name().into(),
                    describe(&r.config),
                    r.iterations.to_string(),
                    ns(r.median_ns),
                    ns(r.p95_ns),
                    if r.alloc.tracked { group_digits(r.alloc.peak_bytes) } else { "-".into() },
                    if r.alloc.tracked { group_digits(r.alloc.largest_bytes) } else { "-".into() },
                ]
            })
            .collect::<Vec<_>>(),
    );
    Ok(Outcome {
        exit_code: if passed { EXIT_OK } else { EXIT_FAILED },
        report: envelope("bench", args, &configs, serde_json::to_value(&rows)?, passed),
        table,
    })
}

// ---- traintoy ----

fn cmd_traintoy(args: &TraintoyArgs) -> Result<Outcome> {
    if args.tol.is_nan() || args.tol < 0.0 || !(args.teacher_std.is_finite() && args.teacher_std >= 0.0) {
        return Err(Error::InvalidArgument("--tol and --teacher-std must be non-negative".into()));
    }
    let task = match &args.task {
        Some(stem) => SyntheticTask::from_bundle(&Bundle::read(stem)?)?,
        None => {
            let configs = configs_or(&args.common, || {
                vec![FusionConfig::with_uniform_rank(Variant::Cp, 8, 8, 8, 0, 2).expect("valid default")]
            })?;
            let [config] = configs[..] else {
                return Err(Error::InvalidConfig(format!(
                    "traintoy takes exactly one config, got {}",
                    configs.len()
                )));
            };
            let opts = TaskOptions {
                teacher_std: args.teacher_std,
                ..TaskOptions::new(args.samples, args.noise_sigma, args.common.seed)
            };
            harness::generate_task_with(config, opts)?
        }
    };
    if let Some(stem) = &args.save_task {
        task.to_bundle().write(stem)?;
    }
    let mut student = task.fresh_student()?;
    let opts = TrainOptions {
        epochs: args.epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        lambda2: args.lambda2,
        converge_tol: args.tol,
        seed: args.common.seed,
    };
    let report = harness::train(&mut student, &task, &opts)?;
    if let Some(stem) = &args.save_student {
        layer_to_bundle(&student).write(stem)?;
    }
    let exit_code = match report.status {
        RunStatus::Converged => EXIT_OK,
        RunStatus::NotConverged => EXIT_FAILED,
        RunStatus::Diverged => EXIT_DIVERGED,
    };
    let status = match report.status {
        RunStatus::Converged => "converged",
        RunStatus::NotConverged => "not converged",
        RunStatus::Diverged => "diverged",
    };
    let initial = report.train_mse.first().copied();
    let table = render_table(
        &["variant", "dims", "epochs", "initial mse", "final mse", "val mse", "penalty", "status"],
        2,
        &[vec![
            task.teacher.variant().name().into(),
            describe(task.teacher.config()),
            report.epochs.to_string(),
            initial.map_or("-".into(), fmt_err),
            fmt_err(report.final_train_mse),
            fmt_err(report.final_val_mse),
            fmt_err(report.final_penalty),
            status.into(),
        ]],
    );
    let configs = [*task.teacher.config()];
    let mut json = envelope("traintoy", args, &configs, serde_json::to_value(&report)?, report.converged);
    json["teacher_std"] = if args.task.is_some() { Value::Null } else { args.teacher_std.into() };
    json["tol"] = args.tol.into();
    Ok(Outcome {
        exit_code,
        report: json,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = main_with_args(std::iter::once("polyfuse").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn params_default_table() {
        let (code, out, _) = run_args(&["params"]);
        assert_eq!(code, 0);
        for needle in ["12,730,752", "98,560", "1,687,744", "147,840", "98,688", "129.2"] {
            assert!(out.contains(needle), "{needle} missing from\n{out}");
        }
    }

    #[test]
    fn params_empty_config_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, "[]").unwrap();
        let (code, out, _) = run_args(&["--json", "params", "--config", path.to_str().unwrap()]);
        assert_eq!(code, 0);
        let v: Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["results"], serde_json::json!([]));
    }

    #[test]
    fn bad_config_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"variant":"PF-CP","m":4,"a":0,"d":2,"rank":1}"#).unwrap();
        let (code, _, err) = run_args(&["params", "--config", path.to_str().unwrap()]);
        assert_eq!(code, 2);
        assert!(err.contains("positive"));
        let (code, _, _) = run_args(&["equiv", "--trials", "nope"]);
        assert_eq!(code, 2);
    }

    #[test]
    fn table_alignment() {
        let t = render_table(&["a", "bb"], 1, &[vec!["xyz".into(), "1".into()]]);
        assert_eq!(t, "a    bb\n---  --\nxyz   1\n");
    }

    #[test]
    fn percentile_examples() {
        assert_eq!(percentile(&[], 0.5), None);
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&xs, 0.5), Some(2.0));
        assert_eq!(percentile(&xs, 0.95), Some(4.0));
    }

    #[test]
    fn digit_grouping() {
        assert_eq!(group_digits(0), "0");
        assert_eq!(group_digits(98560), "98,560");
        assert_eq!(group_digits(12730752), "12,730,752");
    }
}
