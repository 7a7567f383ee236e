//! Command-line entry point: train / eval / reference / check. Exit
//! status 0 on success, 1 on validation errors, 2 on numerical failures.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ndarray::Array1;

use nho::checks::run_checks;
use nho::config::{apply_overrides, RunConfig};
use nho::error::{NhoError, Result};
use nho::eval::{estimate_value, expected_path, value_slice, write_path, write_slice, SliceRequest};
use nho::model::Networks;
use nho::network::{NetworkDump, NetworkParams};
use nho::problems::{p1_reference_control, p1_reference_value};
use nho::simulator::TimeGrid;
use nho::trainer::train;

#[derive(Parser)]
#[command(name = "nho", about = "Deep-FBSDE stochastic optimal control solver", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a TOML run configuration.
    Train {
        /// Path to the run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Dotted-path overrides, e.g. --set train.batch=64.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Evaluate a trained checkpoint: value estimate, value/control slice
    /// and expected state path, written as delimited text.
    Eval {
        /// Run directory containing control.json, field.json and
        /// config-echo.toml.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Slice spec, e.g. axis=1,lo=-3,hi=3,n=101 (axis is 1-based).
        #[arg(long)]
        slice: Option<String>,
        /// Output directory for the tables (defaults to the checkpoint
        /// directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print Monte-Carlo oracle tables for a benchmark with standard
    /// errors (available for p1-terminal-log).
    Reference {
        #[arg(long)]
        benchmark: String,
        #[arg(long, default_value_t = 1)]
        d: usize,
        /// Sample count; scientific notation accepted (e.g. 1e6).
        #[arg(long, default_value = "1e6")]
        samples: String,
        #[arg(long, default_value_t = 0.0)]
        t: f64,
        #[arg(long, default_value_t = 0xEF5EED)]
        seed: u64,
    },
    /// Run the named numerical self-checks.
    Check {
        /// Only run checks whose name contains this substring.
        #[arg(long)]
        filter: Option<String>,
    },
}

fn error_kind(e: &NhoError) -> &'static str {
    match e {
        NhoError::NonScalarObjective(..) => "non-scalar-objective",
        NhoError::ShapeMismatch { .. } => "shape-mismatch",
        NhoError::UnsupportedPrimitive(_) => "unsupported-primitive",
        NhoError::NonFinite { .. } => "non-finite-state",
        NhoError::NonFiniteGradient(_) => "non-finite-gradient",
        NhoError::NotSymmetric { .. } => "not-symmetric",
        NhoError::UnknownBenchmark(_) => "unknown-benchmark",
        NhoError::Config(_) => "config",
        NhoError::NoCheckpoint(_) => "no-checkpoint",
        NhoError::Checkpoint(_) => "checkpoint",
        NhoError::Io(_) => "io",
    }
}

fn exit_code(e: &NhoError) -> i32 {
    match e {
        NhoError::NonFinite { .. }
        | NhoError::NonFiniteGradient(_)
        | NhoError::NotSymmetric { .. }
        | NhoError::NonScalarObjective(..) => 2,
        _ => 1,
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            // machine-readable failure summary: status, kind, message
            eprintln!("error\t{}\t{}", error_kind(&e), e);
            exit_code(&e)
        }
    };
    std::process::exit(code);
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Train { config, set } => cmd_train(&config, &set),
        Cmd::Eval { checkpoint, slice, out } => cmd_eval(&checkpoint, slice.as_deref(), out),
        Cmd::Reference { benchmark, d, samples, t, seed } => {
            cmd_reference(&benchmark, d, &samples, t, seed)
        }
        Cmd::Check { filter } => cmd_check(filter.as_deref()),
    }
}

fn cmd_train(config_path: &Path, set: &[String]) -> Result<i32> {
    let text = fs::read_to_string(config_path)?;
    let text = apply_overrides(&text, set)?;
    let mut cfg = RunConfig::parse(&text)?;
    if cfg.out_dir.is_none() {
        cfg.out_dir = Some(PathBuf::from(format!("runs/{}", cfg.benchmark_id()?.name())));
    }
    let out = cfg.out_dir.clone().expect("out_dir set above");
    cfg.echo(&out)?;

    let spec = cfg.problem()?;
    let (control, field) = cfg.init_networks()?;
    let tc = cfg.train_config()?;
    let result = train(&tc, &spec, control, field)?;

    if let Some(last) = result.history.last() {
        println!(
            "final\titeration={}\ttotal={:.6e}\tterminal={:.6e}\tergodic={:.6e}",
            result.history.len() - 1,
            last.total,
            last.terminal,
            last.ergodic
        );
    }
    let psi = Networks {
        control: result.control,
        field: result.field,
    };
    let s0 = Array1::from(cfg.s0_vector()?);
    let steps = cfg
        .eval
        .steps
        .unwrap_or_else(|| TimeGrid::default_steps(spec.horizon()));
    let (v, se) = estimate_value(&psi, &spec, &s0, steps, cfg.eval.batch, cfg.eval.seed)?;
    println!("value\t{v:.6}\tse\t{se:.3e}");
    println!("artifacts\t{}", out.display());
    Ok(0)
}

fn parse_slice(text: &str, base: SliceRequest) -> Result<SliceRequest> {
    let mut req = base;
    for part in text.split(',') {
        let (key, val) = part
            .split_once('=')
            .ok_or_else(|| NhoError::Config(format!("slice entry '{part}' is not key=value")))?;
        let bad = || NhoError::Config(format!("slice entry '{part}' has a malformed value"));
        match key.trim() {
            "axis" => {
                let one_based: usize = val.parse().map_err(|_| bad())?;
                if one_based == 0 {
                    return Err(NhoError::Config("slice axis is 1-based".into()));
                }
                req.axis = one_based - 1;
            }
            "lo" => req.lo = val.parse().map_err(|_| bad())?,
            "hi" => req.hi = val.parse().map_err(|_| bad())?,
            "n" => req.points = val.parse().map_err(|_| bad())?,
            "t" => req.t = val.parse().map_err(|_| bad())?,
            other => {
                return Err(NhoError::Config(format!("unknown slice key '{other}'")));
            }
        }
    }
    Ok(req)
}

fn load_network(path: &Path) -> Result<NetworkParams> {
    let text = fs::read_to_string(path)?;
    let dump: NetworkDump =
        serde_json::from_str(&text).map_err(|e| NhoError::Checkpoint(e.to_string()))?;
    dump.to_params()
}

fn cmd_eval(checkpoint: &Path, slice: Option<&str>, out: Option<PathBuf>) -> Result<i32> {
    let control_path = checkpoint.join("control.json");
    let field_path = checkpoint.join("field.json");
    if !control_path.is_file() || !field_path.is_file() {
        return Err(NhoError::NoCheckpoint(format!(
            "{} has no control.json/field.json",
            checkpoint.display()
        )));
    }
    let echo_path = checkpoint.join("config-echo.toml");
    if !echo_path.is_file() {
        return Err(NhoError::Config(format!(
            "{} has no config-echo.toml",
            checkpoint.display()
        )));
    }
    let cfg = RunConfig::load(&echo_path)?;
    let spec = cfg.problem()?;
    let psi = Networks {
        control: load_network(&control_path)?,
        field: load_network(&field_path)?,
    };

    let mut req = SliceRequest::default_for(&spec);
    req.axis = cfg.eval.slice_axis - 1;
    req.lo = cfg.eval.slice_lo;
    req.hi = cfg.eval.slice_hi;
    req.points = cfg.eval.slice_points;
    if let Some(text) = slice {
        req = parse_slice(text, req)?;
    }
    req.validate(spec.d())?;

    let steps = cfg
        .eval
        .steps
        .unwrap_or_else(|| TimeGrid::default_steps(spec.horizon()));
    let is_p1 = cfg.benchmark.starts_with("p1");
    let oracle_samples = 100_000;
    let oracle_seed = cfg.eval.seed ^ 0x0AC1E;
    let value_oracle = |t: f64, s: &Array1<f64>| p1_reference_value(t, s, oracle_samples, oracle_seed).0;
    let control_oracle =
        |t: f64, s: &Array1<f64>| p1_reference_control(t, s, oracle_samples, oracle_seed).0[req.axis];
    let rows = value_slice(
        &psi,
        &spec,
        &req,
        steps,
        cfg.eval.batch,
        cfg.eval.seed,
        if is_p1 { Some(&value_oracle) } else { None },
        if is_p1 { Some(&control_oracle) } else { None },
    )?;

    let out_dir = out.unwrap_or_else(|| checkpoint.to_path_buf());
    fs::create_dir_all(&out_dir)?;
    let mut slice_file = fs::File::create(out_dir.join("slice.tsv"))?;
    write_slice(&mut slice_file, &rows)?;

    let s0 = Array1::from(cfg.s0_vector()?);
    let coord = cfg.eval.path_coordinate - 1;
    if coord >= spec.d() {
        return Err(NhoError::Config(format!(
            "path coordinate {} out of range",
            cfg.eval.path_coordinate
        )));
    }
    let path_rows = expected_path(&psi, &spec, &s0, coord, steps, cfg.eval.batch, cfg.eval.seed)?;
    let mut path_file = fs::File::create(out_dir.join("path.tsv"))?;
    write_path(&mut path_file, &path_rows)?;

    let (v, se) = estimate_value(&psi, &spec, &s0, steps, cfg.eval.batch, cfg.eval.seed)?;
    println!("value\t{v:.6}\tse\t{se:.3e}");
    println!("artifacts\t{}", out_dir.display());
    Ok(0)
}

fn cmd_reference(benchmark: &str, d: usize, samples: &str, t: f64, seed: u64) -> Result<i32> {
    if !(benchmark == "p1" || benchmark == "p1-terminal-log") {
        return Err(NhoError::Config(format!(
            "reference oracle is available for p1-terminal-log only, got '{benchmark}'"
        )));
    }
    let n = samples
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite() && *v >= 1.0)
        .ok_or_else(|| NhoError::Config(format!("bad sample count '{samples}'")))? as usize;
    let s = Array1::zeros(d);
    let (v, se) = p1_reference_value(t, &s, n, seed);
    println!("# p1-terminal-log d={d} t={t} s=0 samples={n}");
    println!("quantity\tvalue\tstandard_error");
    println!("value\t{v:.6}\t{se:.3e}");
    let (alpha, alpha_se) = p1_reference_control(t, &s, n, seed ^ 0xA1FA);
    for i in 0..d.min(3) {
        println!("alpha_{}\t{:.6}\t{:.3e}", i + 1, alpha[i], alpha_se[i]);
    }
    Ok(0)
}

fn cmd_check(filter: Option<&str>) -> Result<i32> {
    let outcomes = run_checks(filter);
    if outcomes.is_empty() {
        return Err(NhoError::Config(format!(
            "no check matches filter '{}'",
            filter.unwrap_or("")
        )));
    }
    let mut failed = 0usize;
    for o in &outcomes {
        match &o.result {
            Ok(detail) => println!("PASS\t{}\t{detail}", o.name),
            Err(detail) => {
                failed += 1;
                println!("FAIL\t{}\t{detail}", o.name);
            }
        }
    }
    println!("summary\t{} passed\t{} failed", outcomes.len() - failed, failed);
    Ok(if failed == 0 { 0 } else { 2 })
}
