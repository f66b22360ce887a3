//! `corfd` command-line front end: replicated derivative estimates, the
//! L-BFGS optimizer, config-driven benchmarks and design diagnostics, all
//! written as CSV.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use corfd::bench::{emit_csv, fmt_f64, run_cell, run_experiment, summary_rows, ExperimentConfig, SUMMARY_HEADER};
use corfd::dfo::{corcfd_lbfgs, DfoConfig};
use corfd::estimators::{Method, TraPerturbation};
use corfd::oracle::ProblemSpec;
use corfd::regression::{projection_and_lambda, theory_constants};
use corfd::sampling::RngStream;

#[derive(Parser)]
#[command(
    name = "corfd",
    version,
    about = "Finite-difference gradient estimation with recycled pilot samples"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replicate one estimator at one budget; writes one row per replication.
    Estimate(EstimateArgs),
    /// Run the L-BFGS optimizer; writes one row per iteration.
    Dfo(DfoArgs),
    /// Run a key = value experiment file; writes the summary table.
    Bench(BenchArgs),
    /// Design constants of a coefficient vector.
    Diag(DiagArgs),
}

#[derive(Args)]
struct EstimateArgs {
    /// Problem id: sin1, sin2, poly@<x>, rosenbrock, zakharov@<d>, queue@<lam>,<mu>,<N>,<param>
    #[arg(long)]
    problem: String,
    #[arg(long, default_value = "cor")]
    method: Method,
    #[arg(long)]
    pairs: usize,
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    /// Pilot fraction of the budget.
    #[arg(long)]
    r: Option<f64>,
    #[arg(long = "K")]
    k: Option<usize>,
    /// Bootstrap resamples, or `exact`.
    #[arg(long = "I")]
    i: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fixed perturbation for the tra method.
    #[arg(long)]
    h: Option<f64>,
    /// Further settings, as in an experiment file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Per-replication CSV; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Summary CSV; stderr when omitted.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct DfoArgs {
    #[arg(long)]
    problem: String,
    /// Budget in sample pairs; the run stops after 2T evaluations.
    #[arg(long)]
    budget: usize,
    #[arg(long = "K", default_value_t = 5)]
    k: usize,
    #[arg(long = "T0", default_value_t = 20)]
    t0: usize,
    #[arg(long = "I", default_value_t = 100)]
    i: usize,
    #[arg(long, default_value_t = 1e-4)]
    l1: f64,
    #[arg(long, default_value_t = 0.5)]
    l2: f64,
    #[arg(long, default_value_t = 1.0)]
    a0: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 10)]
    memory: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Starting point; the problem's default when omitted.
    #[arg(long, value_delimiter = ',')]
    theta0: Option<Vec<f64>>,
    /// Use `+ l1 a g'Hg` in the sufficient-decrease test.
    #[arg(long)]
    armijo_plus_sign: bool,
    /// One pair per coordinate at a fixed perturbation instead of Cor-CFD.
    #[arg(long)]
    tra: bool,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    config: PathBuf,
    /// Overrides applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Summary CSV; the config's `output`, else stdout.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Per-replication CSV for every cell.
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Args)]
struct DiagArgs {
    /// Coefficients c_1..c_K.
    #[arg(long, value_delimiter = ',', required = true)]
    c: Vec<f64>,
    /// Fifth-order constant D.
    #[arg(long, default_value_t = 1.0)]
    d: f64,
    /// Derivative of the noise standard deviation.
    #[arg(long, default_value_t = 1.0)]
    sigma_prime: f64,
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Distinguishes a run whose cells partly failed from a setup error.
struct PartialFailure(usize);

fn sink(path: Option<&Path>, fallback: Box<dyn Write>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => fallback,
    })
}

fn apply_overrides(cfg: &mut ExperimentConfig, pairs: &[String]) -> Result<()> {
    for kv in pairs {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("override `{kv}` is not KEY=VALUE");
        };
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(())
}

fn estimate(args: EstimateArgs) -> Result<Option<PartialFailure>> {
    let mut cfg = ExperimentConfig {
        problem: args.problem.parse()?,
        methods: vec![args.method],
        pairs: vec![args.pairs],
        reps: args.reps,
        seed: args.seed,
        ..ExperimentConfig::default()
    };
    if let Some(r) = args.r {
        cfg.set("r", &r.to_string())?;
    }
    if let Some(k) = args.k {
        cfg.set("K", &k.to_string())?;
    }
    if let Some(i) = &args.i {
        cfg.set("I", i)?;
    }
    if let Some(h) = args.h {
        cfg.tra = TraPerturbation::Fixed(h);
    }
    apply_overrides(&mut cfg, &args.set)?;
    cfg.validate()?;
    let truth = match cfg.resolve_truth() {
        Ok(t) => Some(t),
        Err(e) => {
            warn!("no reference derivative ({e}); skipping the summary");
            None
        }
    };
    let cell = run_cell(&cfg, args.method, 0, truth.unwrap_or(f64::NAN))?;
    let rows: Vec<Vec<String>> = cell
        .records
        .iter()
        .map(|r| {
            vec![
                r.rep.to_string(),
                fmt_f64(r.estimate),
                r.pairs_used.to_string(),
                fmt_f64(r.perturbation),
            ]
        })
        .collect();
    let out = sink(args.output.as_deref(), Box::new(io::stdout().lock()))?;
    emit_csv(&["rep", "estimate", "pairs_used", "perturbation"], &rows, out)?;
    if truth.is_some() {
        let out = sink(args.summary.as_deref(), Box::new(io::stderr()))?;
        emit_csv(&SUMMARY_HEADER, &summary_rows(&cfg.problem, &[cell]), out)?;
    }
    Ok(None)
}

fn dfo(args: DfoArgs) -> Result<Option<PartialFailure>> {
    let problem: ProblemSpec = args.problem.parse()?;
    let oracle = problem.build()?;
    let theta0 = args.theta0.clone().unwrap_or_else(|| problem.point());
    let mut cfg = if args.tra {
        DfoConfig::tra_baseline(args.budget)
    } else {
        DfoConfig::standard(args.budget)
    };
    cfg.initial_batch = args.t0;
    cfg.estimator.k = args.k;
    cfg.estimator.bootstrap = corfd::bootstrap::BootstrapMode::MonteCarlo { replicates: args.i };
    cfg.l1 = args.l1;
    cfg.l2 = args.l2;
    cfg.a0 = args.a0;
    cfg.sigma = args.sigma;
    cfg.memory = args.memory;
    cfg.armijo_plus_sign = args.armijo_plus_sign;
    let trace = corcfd_lbfgs(&oracle, &theta0, &cfg, RngStream::from_seed(args.seed))?;

    let d = theta0.len();
    let mut header = vec![
        "k".to_string(),
        "t".into(),
        "a_k".into(),
        "T_k".into(),
        "f_noisy".into(),
        "f_true".into(),
    ];
    header.extend((0..d).map(|i| format!("theta_{i}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = trace
        .iterations
        .iter()
        .map(|it| {
            let mut row = vec![
                it.k.to_string(),
                it.evaluations.to_string(),
                fmt_f64(it.step),
                it.batch.to_string(),
                fmt_f64(it.f_noisy),
                it.f_true.map(fmt_f64).unwrap_or_default(),
            ];
            row.extend(it.theta.iter().map(|v| fmt_f64(*v)));
            row
        })
        .collect();
    emit_csv(
        &header,
        &rows,
        sink(args.output.as_deref(), Box::new(io::stdout().lock()))?,
    )?;

    let (sg, og) = match trace.gaps(&oracle) {
        Some((sg, og)) => (fmt_f64(sg), fmt_f64(og)),
        None => (String::new(), String::new()),
    };
    let summary = vec![vec![
        problem.to_string(),
        trace.iterations.len().to_string(),
        trace.evaluations.to_string(),
        trace.converged.to_string(),
        sg,
        og,
    ]];
    emit_csv(
        &["problem", "iterations", "evaluations", "converged", "sg", "og"],
        &summary,
        sink(args.summary.as_deref(), Box::new(io::stderr()))?,
    )?;
    Ok(None)
}

fn bench(args: BenchArgs) -> Result<Option<PartialFailure>> {
    let mut cfg =
        ExperimentConfig::from_file(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    apply_overrides(&mut cfg, &args.set)?;
    let result = run_experiment(&cfg)?;
    let path = args.output.or_else(|| cfg.output.clone());
    let out = sink(path.as_deref(), Box::new(io::stdout().lock()))?;
    emit_csv(&SUMMARY_HEADER, &summary_rows(&cfg.problem, &result.cells), out)?;
    if let Some(p) = &args.records {
        let rows: Vec<Vec<String>> = result
            .cells
            .iter()
            .flat_map(|c| {
                c.records.iter().map(|r| {
                    vec![
                        cfg.problem.to_string(),
                        c.method.to_string(),
                        c.pairs.to_string(),
                        r.rep.to_string(),
                        fmt_f64(r.estimate),
                        r.pairs_used.to_string(),
                        fmt_f64(r.perturbation),
                    ]
                })
            })
            .collect();
        let header = [
            "problem",
            "method",
            "pairs",
            "rep",
            "estimate",
            "pairs_used",
            "perturbation",
        ];
        emit_csv(&header, &rows, sink(Some(p), Box::new(io::sink()))?)?;
    }
    for f in &result.failures {
        eprintln!("cell {} n={} failed: {}", f.method, f.pairs, f.message);
    }
    info!("{} cells ran, {} failed", result.cells.len(), result.failures.len());
    Ok((!result.failures.is_empty()).then_some(PartialFailure(result.failures.len())))
}

fn diag(args: DiagArgs) -> Result<Option<PartialFailure>> {
    let p = projection_and_lambda(&args.c)?;
    let t = theory_constants(&args.c, args.d, args.sigma_prime)?;
    let proj = &p.projection;
    let idempotence = (proj * proj - proj).abs().max();
    let symmetry = (proj - proj.transpose()).abs().max();
    let header = [
        "k",
        "p_idempotence",
        "p_symmetry",
        "lambda",
        "q",
        "h_k",
        "v_k",
        "h_tilde",
        "v_tilde",
        "h_hat",
        "v_hat",
    ];
    let row = vec![
        args.c.len().to_string(),
        fmt_f64(idempotence),
        fmt_f64(symmetry),
        fmt_f64(p.lambda),
        fmt_f64(p.q),
        fmt_f64(t.h_k),
        fmt_f64(t.v_k),
        fmt_f64(t.h_tilde),
        fmt_f64(t.v_tilde),
        fmt_f64(t.h_hat),
        fmt_f64(t.v_hat),
    ];
    emit_csv(
        &header,
        &[row],
        sink(args.output.as_deref(), Box::new(io::stdout().lock()))?,
    )?;
    Ok(None)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match cli.command {
        Command::Estimate(a) => estimate(a),
        Command::Dfo(a) => dfo(a),
        Command::Bench(a) => bench(a),
        Command::Diag(a) => diag(a),
    };
    match outcome {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(PartialFailure(n))) => {
            eprintln!("error: {n} cell(s) failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
