//! `filterstab` command-line front end.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime/numerical error.
//! The last line printed is always `RESULT <code> <report path or ->`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use filterstab::kalman::{
    find_linear_preset, fmt_complex, hautus_detectable, kalman_pair_experiment,
    linear_preset_names, KalmanError, LinearModel, LinearModelSpec,
};
use filterstab::numlin::DEFAULT_HURWITZ_MARGIN;
use filterstab::observability::brute_force_o;
use filterstab::verdict::{analyze, Verdict};
use filterstab::wonham::{default_dt, kappa_sweep, run_pair, PairSummary, SimConfig, WonhamError};
use filterstab::{
    builtin_presets, find_preset, FiniteHmm, InitialPair, ModelSpec, ObsKind, StabilityReport,
};

const PRESET_PREFIX: &str = "presets:";
const ORACLE_DELTAS: [f64; 3] = [0.3, 0.7, 1.1];
const ORACLE_TOL: f64 = 1e-8;
/// Recorded CSV rows per path when no stride is given.
const DEFAULT_CSV_ROWS: usize = 1000;

#[derive(Parser, Debug)]
#[command(
    name = "filterstab",
    version,
    about = "Filter stability workbench for finite-state hidden Markov models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Observability, detectability and stability verdicts for a model.
    Analyze(AnalyzeArgs),
    /// Monte-Carlo run of two Wonham filters from different priors.
    Simulate(SimulateArgs),
    /// Riccati flow and paired Kalman filters for a linear model.
    Kalman(KalmanArgs),
    /// List the built-in models.
    Presets,
}

#[derive(Args, Debug)]
struct Common {
    /// Directory for report files (created if missing).
    #[arg(long, default_value = "filterstab-out")]
    out_dir: PathBuf,
    /// Worker threads; never changes results.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Model file, or `presets:<name>`.
    model: String,
    /// Also span words of length up to k and compare with the observable space.
    #[arg(long)]
    oracle_depth: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Model file, or `presets:<name>`.
    model: String,
    /// Prior of the first filter and of the signal, e.g. `0.9,0.1`.
    #[arg(long)]
    mu: Option<String>,
    /// Prior of the second filter.
    #[arg(long)]
    nu: Option<String>,
    #[arg(long, default_value_t = 10.0)]
    t_max: f64,
    /// Time step; defaults to a rate- and noise-scaled value.
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long, default_value_t = 200)]
    paths: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated noise levels; runs one simulation per level.
    #[arg(long)]
    kappa_sweep: Option<String>,
    /// Number of paths written as CSV.
    #[arg(long, default_value_t = 5)]
    record_paths: usize,
    /// Write every n-th grid point to CSV (default: about 1000 rows).
    #[arg(long)]
    record_stride: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct KalmanArgs {
    /// Linear model file, or `presets:scalar` / `presets:nondetectable`.
    model: String,
    #[arg(long, default_value_t = 20.0)]
    t_max: f64,
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    #[arg(long, default_value_t = 200)]
    paths: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write every n-th grid point to the trace (default: about 1000 rows).
    #[arg(long)]
    record_stride: Option<usize>,
    #[command(flatten)]
    common: Common,
}

/// A failure with its exit code.
#[derive(Debug)]
enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(m) => write!(f, "validation error: {m}"),
            Failure::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("cannot write {}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| io_failure(path, e))
}

fn prepare_out_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))
}

fn parse_vector(name: &str, s: &str) -> Result<Vec<f64>, Failure> {
    s.split(',')
        .map(|x| {
            x.trim().parse::<f64>().map_err(|_| {
                Failure::Validation(format!("--{name}: cannot parse '{x}' as a number"))
            })
        })
        .collect()
}

struct LoadedModel {
    model: FiniteHmm,
    default_init: Option<InitialPair>,
}

fn load_model(source: &str) -> Result<LoadedModel, Failure> {
    if let Some(name) = source.strip_prefix(PRESET_PREFIX) {
        let p = find_preset(name).ok_or_else(|| {
            let names: Vec<_> = builtin_presets().iter().map(|p| p.name).collect();
            Failure::Validation(format!(
                "unknown preset '{name}' (available: {})",
                names.join(", ")
            ))
        })?;
        return Ok(LoadedModel {
            model: p.model,
            default_init: Some(p.init),
        });
    }
    let model = ModelSpec::load(source)
        .and_then(|s| s.validate())
        .map_err(|e| Failure::Validation(e.to_string()))?;
    Ok(LoadedModel {
        model,
        default_init: None,
    })
}

fn load_linear_model(source: &str) -> Result<LinearModel, Failure> {
    if let Some(name) = source.strip_prefix(PRESET_PREFIX) {
        return find_linear_preset(name).ok_or_else(|| {
            Failure::Validation(format!(
                "unknown linear preset '{name}' (available: {})",
                linear_preset_names().join(", ")
            ))
        });
    }
    LinearModelSpec::load(source)
        .and_then(|s| s.validate())
        .map_err(|e| Failure::Validation(e.to_string()))
}

fn auto_stride(t_max: f64, dt: f64) -> usize {
    let steps = (t_max / dt).round().max(1.0) as usize;
    steps.div_ceil(DEFAULT_CSV_ROWS).max(1)
}

fn verdict_str(v: Verdict) -> &'static str {
    match v {
        Verdict::Yes => "true",
        Verdict::No => "false",
        Verdict::NotApplicable => "n/a",
    }
}

#[derive(Serialize)]
struct OracleCheck {
    depth: usize,
    deltas: Vec<f64>,
    dim_observable: usize,
    dim_oracle: usize,
    /// Largest distance of an oracle basis vector from the observable space.
    oracle_in_observable_residual: f64,
    observable_in_oracle_residual: f64,
    agrees: bool,
}

#[derive(Serialize)]
struct AnalyzeOutput<'a> {
    #[serde(flatten)]
    report: &'a StabilityReport,
    z_dims: &'a [usize],
    ergodic_classes: &'a [Vec<usize>],
    transient: &'a [usize],
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle: Option<OracleCheck>,
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<PathBuf, Failure> {
    let loaded = load_model(&args.model)?;
    let m = &loaded.model;
    let analysis = analyze(m).map_err(|e| Failure::Runtime(e.to_string()))?;
    let r = &analysis.report;

    let oracle = match args.oracle_depth {
        None => None,
        Some(depth) => {
            let o = brute_force_o(m, depth, &ORACLE_DELTAS)
                .map_err(|e| Failure::Runtime(e.to_string()))?;
            let obs = &analysis.observability.observable;
            let fwd = o
                .basis()
                .column_iter()
                .map(|v| obs.residual(&v.into_owned()))
                .fold(0.0, f64::max);
            let back = obs
                .basis()
                .column_iter()
                .map(|v| o.residual(&v.into_owned()))
                .fold(0.0, f64::max);
            Some(OracleCheck {
                depth,
                deltas: ORACLE_DELTAS.to_vec(),
                dim_observable: obs.dim(),
                dim_oracle: o.dim(),
                oracle_in_observable_residual: fwd,
                observable_in_oracle_residual: back,
                agrees: o.dim() == obs.dim() && fwd < ORACLE_TOL && back < ORACLE_TOL,
            })
        }
    };

    println!("model            {} (d = {})", args.model, m.d());
    println!("observable       {}", r.observable);
    println!("detectable       {}", r.detectable);
    println!("stable           {}", verdict_str(r.stable.value));
    println!("strong_stable    {}", verdict_str(r.strong_stable.value));
    println!("dim N            {}", r.detect_evidence.dim_n);
    println!("ergodic classes  {}", r.num_ergodic_classes);
    println!("transient states {}", r.has_transient);
    if let Some(o) = &oracle {
        println!(
            "oracle depth {}: dim {} vs {}, residuals {:.1e}/{:.1e} -> {}",
            o.depth,
            o.dim_oracle,
            o.dim_observable,
            o.oracle_in_observable_residual,
            o.observable_in_oracle_residual,
            if o.agrees { "agree" } else { "DISAGREE" }
        );
    }

    prepare_out_dir(&args.common.out_dir)?;
    let path = args.common.out_dir.join("report.json");
    let out = AnalyzeOutput {
        report: r,
        z_dims: &analysis.observability.z_dims,
        ergodic_classes: &analysis.chain.ergodic_classes,
        transient: &analysis.chain.transient,
        oracle,
    };
    write_file(
        &path,
        &(serde_json::to_string_pretty(&out).expect("serializable") + "\n"),
    )?;
    Ok(path)
}

#[derive(Serialize)]
struct SimulateOutput<'a> {
    model: &'a str,
    mu: &'a [f64],
    nu: &'a [f64],
    kappa: f64,
    t_max: f64,
    dt: f64,
    paths: usize,
    seed: u64,
    #[serde(flatten)]
    summary: &'a PairSummary,
}

#[derive(Serialize)]
struct SweepEntry<'a> {
    kappa: f64,
    mean_terminal_tv: f64,
    summary: &'a PairSummary,
}

#[derive(Serialize)]
struct SweepOutput<'a> {
    model: &'a str,
    mu: &'a [f64],
    nu: &'a [f64],
    t_max: f64,
    dt: f64,
    paths: usize,
    seed: u64,
    sweep: Vec<SweepEntry<'a>>,
}

fn wonham_failure(e: WonhamError) -> Failure {
    match e {
        WonhamError::InvalidConfig(_) | WonhamError::InvalidPrior(_) | WonhamError::KappaZero => {
            Failure::Validation(e.to_string())
        }
        WonhamError::DegenerateWeight { .. } | WonhamError::Numerical(_) => {
            Failure::Runtime(e.to_string())
        }
    }
}

fn print_tv_table(summary: &PairSummary) {
    println!(
        "{:>12} {:>12} {:>12} {:>12}",
        "t", "mean_tv", "median_tv", "q90_tv"
    );
    for i in 0..summary.checkpoints.len() {
        println!(
            "{:>12.4} {:>12.6} {:>12.6} {:>12.6}",
            summary.checkpoints[i], summary.mean_tv[i], summary.median_tv[i], summary.q90_tv[i]
        );
    }
}

fn cmd_simulate(args: &SimulateArgs) -> Result<PathBuf, Failure> {
    let loaded = load_model(&args.model)?;
    let m = &loaded.model;
    let d = m.d();
    let pick = |flag: &Option<String>,
                name: &str,
                fallback: Option<&Vec<f64>>|
     -> Result<Vec<f64>, Failure> {
        match (flag, fallback) {
            (Some(s), _) => parse_vector(name, s),
            (None, Some(v)) => Ok(v.clone()),
            (None, None) => Err(Failure::Validation(format!(
                "--{name} is required for model files"
            ))),
        }
    };
    let mu = pick(&args.mu, "mu", loaded.default_init.as_ref().map(|p| &p.mu))?;
    let nu = pick(&args.nu, "nu", loaded.default_init.as_ref().map(|p| &p.nu))?;
    for (name, v) in [("mu", &mu), ("nu", &nu)] {
        if v.len() != d {
            return Err(Failure::Validation(format!(
                "--{name} has {} entries, model has {d} states",
                v.len()
            )));
        }
    }
    let init = InitialPair::new(mu, nu).map_err(|e| Failure::Validation(e.to_string()))?;
    let kappas = args
        .kappa_sweep
        .as_deref()
        .map(|s| parse_vector("kappa-sweep", s))
        .transpose()?;
    if let Some(ks) = &kappas {
        if ks.iter().any(|k| !(k.is_finite() && *k > 0.0)) {
            return Err(Failure::Validation(
                "--kappa-sweep values must be > 0".into(),
            ));
        }
    } else if m.obs_kind() == ObsKind::WhiteNoise && m.kappa() <= 0.0 {
        return Err(Failure::Validation(
            "white-noise model has kappa = 0; supply --kappa-sweep with positive values".into(),
        ));
    }
    let dt = match args.dt {
        Some(dt) => dt,
        None => match &kappas {
            Some(ks) => ks
                .iter()
                .map(|&k| m.with_kappa(k).map(|mk| default_dt(&mk)))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Failure::Validation(e.to_string()))?
                .into_iter()
                .fold(f64::INFINITY, f64::min),
            None => default_dt(m),
        },
    };
    let cfg = SimConfig {
        t_max: args.t_max,
        dt,
        n_paths: args.paths,
        seed: args.seed,
        record_stride: args
            .record_stride
            .unwrap_or_else(|| auto_stride(args.t_max, dt)),
        record_paths: args.record_paths,
    };
    cfg.validate().map_err(wonham_failure)?;
    prepare_out_dir(&args.common.out_dir)?;

    if let Some(ks) = kappas {
        let rows = kappa_sweep(m, &init, &ks, &cfg).map_err(wonham_failure)?;
        println!("{:>10} {:>16}", "kappa", "mean_terminal_tv");
        for r in &rows {
            println!("{:>10} {:>16.6}", r.kappa, r.mean_terminal_tv);
        }
        let out = SweepOutput {
            model: &args.model,
            mu: &init.mu,
            nu: &init.nu,
            t_max: cfg.t_max,
            dt: cfg.effective_dt(),
            paths: cfg.n_paths,
            seed: cfg.seed,
            sweep: rows
                .iter()
                .map(|r| SweepEntry {
                    kappa: r.kappa,
                    mean_terminal_tv: r.mean_terminal_tv,
                    summary: &r.summary,
                })
                .collect(),
        };
        let path = args.common.out_dir.join("sweep.json");
        write_file(
            &path,
            &(serde_json::to_string_pretty(&out).expect("serializable") + "\n"),
        )?;
        return Ok(path);
    }

    let run = run_pair(m, &init, &cfg).map_err(wonham_failure)?;
    print_tv_table(&run.summary);
    for (i, tr) in run.trajectories.iter().enumerate() {
        write_file(
            &args.common.out_dir.join(format!("path_{i:04}.csv")),
            &tr.to_csv(),
        )?;
    }
    let out = SimulateOutput {
        model: &args.model,
        mu: &init.mu,
        nu: &init.nu,
        kappa: m.kappa(),
        t_max: cfg.t_max,
        dt: cfg.effective_dt(),
        paths: cfg.n_paths,
        seed: cfg.seed,
        summary: &run.summary,
    };
    let path = args.common.out_dir.join("summary.json");
    write_file(
        &path,
        &(serde_json::to_string_pretty(&out).expect("serializable") + "\n"),
    )?;
    Ok(path)
}

fn cmd_kalman(args: &KalmanArgs) -> Result<PathBuf, Failure> {
    let lm = load_linear_model(&args.model)?;
    let hautus = hautus_detectable(&lm.a, &lm.c, DEFAULT_HURWITZ_MARGIN)
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    if let Some(w) = hautus.witness {
        return Err(Failure::Validation(format!(
            "(A, C) is not detectable; witness eigenvalue lambda = {}",
            fmt_complex(&w)
        )));
    }
    let cfg = SimConfig {
        t_max: args.t_max,
        dt: args.dt,
        n_paths: args.paths,
        seed: args.seed,
        record_stride: args
            .record_stride
            .unwrap_or_else(|| auto_stride(args.t_max, args.dt)),
        record_paths: 0,
    };
    cfg.validate().map_err(wonham_failure)?;
    let summary = kalman_pair_experiment(&lm, &cfg).map_err(|e| match e {
        KalmanError::NotDetectable(_) | KalmanError::Invalid(_) | KalmanError::InvalidConfig(_) => {
            Failure::Validation(e.to_string())
        }
        _ => Failure::Runtime(e.to_string()),
    })?;
    let last = summary.times.len() - 1;
    println!("t_max            {}", summary.times[last]);
    println!("gap(t_max)       {:.6e}", summary.gap[last]);
    println!("mean |dx|(0)     {:.6}", summary.mean_xdiff[0]);
    println!("mean |dx|(t_max) {:.6}", summary.mean_xdiff[last]);
    println!("tail decreasing  {}", summary.tail_decreasing);

    prepare_out_dir(&args.common.out_dir)?;
    write_file(
        &args.common.out_dir.join("kalman_trace.csv"),
        &summary.to_csv(),
    )?;
    let path = args.common.out_dir.join("kalman_summary.json");
    write_file(&path, &(summary.to_json_pretty() + "\n"))?;
    Ok(path)
}

fn cmd_presets() {
    for p in builtin_presets() {
        println!("{PRESET_PREFIX}{p}");
    }
    for name in linear_preset_names() {
        println!("{PRESET_PREFIX}{name} (linear, for `kalman`)");
    }
}

fn threads_of(cmd: &Command) -> Option<usize> {
    match cmd {
        Command::Analyze(a) => a.common.threads,
        Command::Simulate(a) => a.common.threads,
        Command::Kalman(a) => a.common.threads,
        Command::Presets => None,
    }
}

fn run(cli: Cli) -> Result<Option<PathBuf>, Failure> {
    let body = || match &cli.command {
        Command::Analyze(a) => cmd_analyze(a).map(Some),
        Command::Simulate(a) => cmd_simulate(a).map(Some),
        Command::Kalman(a) => cmd_kalman(a).map(Some),
        Command::Presets => {
            cmd_presets();
            Ok(None)
        }
    };
    match threads_of(&cli.command) {
        Some(0) => Err(Failure::Validation("--threads must be >= 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Failure::Runtime(e.to_string()))?
            .install(body),
        None => body(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            println!("RESULT {code} -");
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(path) => {
            let shown = path.map_or("-".to_string(), |p| p.display().to_string());
            println!("RESULT 0 {shown}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{f}");
            println!("RESULT {} -", f.code());
            ExitCode::from(f.code())
        }
    }
}
