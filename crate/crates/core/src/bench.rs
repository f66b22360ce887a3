//! Replicated experiments: seeded replication runner, error summaries, a flat
//! key-value experiment config and CSV output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use log::{info, warn};
use rayon::prelude::*;

use crate::bootstrap::BootstrapMode;
use crate::error::{invalid, Error, Result};
use crate::estimators::{
    estimate_derivative, ClampRule, EstimatorConfig, Method, MethodSpec, PilotAllocation, RegressionKind,
    TraPerturbation,
};
use crate::oracle::{lr_derivative_oracle, ProblemSpec};
use crate::sampling::{PerturbationGenerator, RngStream};

/// Error summary over `R` replications (population variance, denominator `R`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SummaryStats {
    pub mean: f64,
    pub bias: f64,
    pub variance: f64,
    /// `bias^2 + variance` up to rounding.
    pub mse: f64,
    pub reps: usize,
    pub truth: f64,
}

pub fn summarize(estimates: &[f64], truth: f64) -> SummaryStats {
    assert!(!estimates.is_empty(), "summarize needs at least one estimate");
    let r = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / r;
    let variance = estimates.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / r;
    let mse = estimates.iter().map(|e| (e - truth) * (e - truth)).sum::<f64>() / r;
    SummaryStats {
        mean,
        bias: mean - truth,
        variance,
        mse,
        reps: estimates.len(),
        truth,
    }
}

/// Thread pool sized by `CORFD_THREADS` when set, otherwise rayon's default.
fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = std::env::var("CORFD_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
        {
            builder = builder.num_threads(n.max(1));
        }
        builder.build().expect("failed to build thread pool")
    })
}

/// Runs `f` on `reps` substreams of `stream`, in parallel, returning results
/// in replication order.
pub fn run_replications<T, F>(reps: usize, stream: RngStream, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(RngStream) -> Result<T> + Sync,
{
    if reps == 0 {
        return Err(invalid("need at least one replication"));
    }
    pool().install(|| {
        (0..reps)
            .into_par_iter()
            .map(|i| f(stream.substream(i as u64)))
            .collect()
    })
}

/// How the reference derivative for a bench is obtained.
#[derive(Clone, Debug, PartialEq)]
pub enum TruthSource {
    /// From the problem's known constants.
    Known,
    Value(f64),
    /// Likelihood-ratio estimate with this many paths (queue problems).
    LikelihoodRatio {
        reps: usize,
    },
}

/// A replicated estimation experiment over a grid of methods and budgets.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub methods: Vec<Method>,
    pub pairs: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    pub estimator: EstimatorConfig,
    /// Overrides the problem's default point.
    pub point: Option<Vec<f64>>,
    pub coord: usize,
    pub tra: TraPerturbation,
    pub truth: TruthSource,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: ProblemSpec::Sin {
                noise: crate::oracle::NoiseModel::Homoscedastic,
                kappa: crate::oracle::DEFAULT_KAPPA,
            },
            methods: vec![Method::Cor],
            pairs: vec![1000],
            reps: 1000,
            seed: 0,
            estimator: EstimatorConfig::default(),
            point: None,
            coord: 0,
            tra: TraPerturbation::Assumed { bias: 5.0, sigma2: 1.0 },
            truth: TruthSource::Known,
            output: None,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for key `{key}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

impl ExperimentConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies one setting; shared by config files and command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let est = &mut self.estimator;
        match key {
            "problem" => self.problem = value.parse()?,
            "methods" | "method" => self.methods = parse_list(key, value)?,
            "pairs" | "budgets" => self.pairs = parse_list(key, value)?,
            "reps" => self.reps = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "theta0" | "point" => self.point = Some(parse_list(key, value)?),
            "coord" => self.coord = parse_value(key, value)?,
            "output" => self.output = Some(PathBuf::from(value)),
            "K" | "k" => est.k = parse_value(key, value)?,
            "r" => est.allocation = PilotAllocation::Ratio(parse_value(key, value)?),
            "n_b" => est.allocation = PilotAllocation::PilotSize(parse_value(key, value)?),
            "I" => {
                est.bootstrap = match value {
                    "exact" => BootstrapMode::Exact,
                    _ => BootstrapMode::MonteCarlo {
                        replicates: parse_value(key, value)?,
                    },
                }
            }
            "gamma" => est.gamma = parse_value(key, value)?,
            "mu0" | "sigma0" | "L" | "U" => {
                let g = est.generator;
                let x: f64 = parse_value(key, value)?;
                let (mu0, sigma0, lower, upper) = match key {
                    "mu0" => (x, g.sigma0, g.lower, g.upper),
                    "sigma0" => (g.mu0, x, g.lower, g.upper),
                    "L" => (g.mu0, g.sigma0, x, g.upper),
                    _ => (g.mu0, g.sigma0, g.lower, x),
                };
                // bounds are checked together once all keys are in
                est.generator = PerturbationGenerator {
                    mu0,
                    sigma0,
                    lower,
                    upper,
                };
            }
            "eps" => est.clamp = ClampRule::Absolute(parse_value(key, value)?),
            "eps_scale" => {
                est.clamp = ClampRule::Relative {
                    scale: parse_value(key, value)?,
                }
            }
            "regression" => {
                est.regression = match value {
                    "wls" => RegressionKind::Weighted,
                    "ols" => RegressionKind::Ordinary,
                    _ => return Err(Error::Config(format!("regression must be wls or ols (got `{value}`)"))),
                }
            }
            "sigma2_floor" => est.sigma2_floor = parse_value(key, value)?,
            "c" | "coefficients" => est.coefficients = Some(parse_list(key, value)?),
            "h" => self.tra = TraPerturbation::Fixed(parse_value(key, value)?),
            "tra_B" | "tra_sigma2" => {
                let (mut bias, mut sigma2) = match self.tra {
                    TraPerturbation::Assumed { bias, sigma2 } => (bias, sigma2),
                    TraPerturbation::Fixed(_) => (5.0, 1.0),
                };
                if key == "tra_B" {
                    bias = parse_value(key, value)?;
                } else {
                    sigma2 = parse_value(key, value)?;
                }
                self.tra = TraPerturbation::Assumed { bias, sigma2 };
            }
            "truth" => {
                self.truth = match value {
                    "known" => TruthSource::Known,
                    "lr" => TruthSource::LikelihoodRatio { reps: 1_000_000 },
                    _ => TruthSource::Value(parse_value(key, value)?),
                }
            }
            "lr_reps" => {
                self.truth = TruthSource::LikelihoodRatio {
                    reps: parse_value(key, value)?,
                }
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Checks cross-field constraints.
    pub fn validate(&self) -> Result<()> {
        let g = self.estimator.generator;
        PerturbationGenerator::new(g.mu0, g.sigma0, g.lower, g.upper).map_err(|e| Error::Config(e.to_string()))?;
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if self.methods.is_empty() || self.pairs.is_empty() {
            return Err(Error::Config("need at least one method and one budget".into()));
        }
        let oracle = self.problem.build()?;
        let point = self.point();
        if point.len() != oracle.dim() {
            return Err(Error::Config(format!(
                "point has dimension {} but problem `{}` expects {}",
                point.len(),
                self.problem,
                oracle.dim()
            )));
        }
        if self.coord >= point.len() {
            return Err(Error::Config(format!("coord {} out of range", self.coord)));
        }
        Ok(())
    }

    pub fn point(&self) -> Vec<f64> {
        match (&self.point, &self.problem) {
            (Some(p), _) => p.clone(),
            // the polynomial problem carries its point in the id
            (None, p) => p.point(),
        }
    }

    /// Reference derivative for the error summaries.
    pub fn resolve_truth(&self) -> Result<f64> {
        match &self.truth {
            TruthSource::Value(v) => Ok(*v),
            TruthSource::Known => self.problem.build()?.ground_truth(&self.point(), self.coord).deriv(),
            TruthSource::LikelihoodRatio { reps } => match &self.problem {
                ProblemSpec::Queue {
                    spec,
                    parameter,
                    metric,
                } => {
                    let stream = RngStream::new(self.seed, u64::MAX);
                    Ok(lr_derivative_oracle(*spec, *parameter, *metric, *reps, stream)?.value)
                }
                _ => Err(Error::Config(
                    "likelihood-ratio truth is only available for queue problems".into(),
                )),
            },
        }
    }

    /// Method plus the parameters it needs.
    pub fn method_spec(&self, method: Method) -> Result<MethodSpec> {
        Ok(match method {
            Method::Tra => MethodSpec::Tra(self.tra),
            Method::Opt => {
                let truth = self.problem.build()?.ground_truth(&self.point(), self.coord);
                MethodSpec::Opt(truth)
            }
            Method::Boot => MethodSpec::Boot(self.estimator.clone()),
            Method::Cor => MethodSpec::Cor(self.estimator.clone()),
        })
    }
}

fn method_code(m: Method) -> u64 {
    match m {
        Method::Tra => 0,
        Method::Opt => 1,
        Method::Boot => 2,
        Method::Cor => 3,
    }
}

/// Root stream of one (method, budget) cell.
pub fn cell_stream(seed: u64, method: Method, pairs_index: usize) -> RngStream {
    RngStream::from_seed(seed).substream(((pairs_index as u64) << 8) | method_code(method))
}

/// One replication's outcome.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReplicationRecord {
    pub rep: usize,
    pub estimate: f64,
    pub pairs_used: usize,
    pub perturbation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub method: Method,
    pub pairs: usize,
    pub records: Vec<ReplicationRecord>,
    pub summary: SummaryStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellFailure {
    pub method: Method,
    pub pairs: usize,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentResult {
    pub cells: Vec<CellResult>,
    pub failures: Vec<CellFailure>,
}

/// Replicates one method at one budget.
pub fn run_cell(cfg: &ExperimentConfig, method: Method, pairs_index: usize, truth: f64) -> Result<CellResult> {
    let pairs = cfg.pairs[pairs_index];
    let oracle = cfg.problem.build()?;
    let point = cfg.point();
    let spec = cfg.method_spec(method)?;
    let stream = cell_stream(cfg.seed, method, pairs_index);
    let records = run_replications(cfg.reps, stream, |s| {
        estimate_derivative(&spec, &oracle, &point, cfg.coord, pairs, s)
    })?
    .into_iter()
    .enumerate()
    .map(|(rep, e)| ReplicationRecord {
        rep,
        estimate: e.value,
        pairs_used: e.pairs_used,
        perturbation: e.perturbation,
    })
    .collect::<Vec<_>>();
    let values: Vec<f64> = records.iter().map(|r| r.estimate).collect();
    Ok(CellResult {
        method,
        pairs,
        summary: summarize(&values, truth),
        records,
    })
}

/// Runs every (method, budget) cell; a failing cell is recorded and the rest
/// still run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let truth = cfg.resolve_truth()?;
    let mut out = ExperimentResult::default();
    for (pi, &pairs) in cfg.pairs.iter().enumerate() {
        for &method in &cfg.methods {
            match run_cell(cfg, method, pi, truth) {
                Ok(cell) => {
                    info!(
                        "{} {} n={}: bias {:.4e} var {:.4e} mse {:.4e}",
                        cfg.problem, method, pairs, cell.summary.bias, cell.summary.variance, cell.summary.mse
                    );
                    out.cells.push(cell);
                }
                Err(e) => {
                    warn!("{} {} n={} failed: {e}", cfg.problem, method, pairs);
                    out.failures.push(CellFailure {
                        method,
                        pairs,
                        message: e.to_string(),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Round-trip float formatting (17 significant digits).
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub const SUMMARY_HEADER: [&str; 7] = ["problem", "method", "pairs", "reps", "bias", "variance", "mse"];

pub fn summary_rows(problem: &ProblemSpec, cells: &[CellResult]) -> Vec<Vec<String>> {
    cells
        .iter()
        .map(|c| {
            vec![
                problem.to_string(),
                c.method.to_string(),
                c.pairs.to_string(),
                c.summary.reps.to_string(),
                fmt_f64(c.summary.bias),
                fmt_f64(c.summary.variance),
                fmt_f64(c.summary.mse),
            ]
        })
        .collect()
}

/// Writes a header and rows as CSV; every row must match the header width.
pub fn emit_csv<W: Write>(header: &[&str], rows: &[Vec<String>], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header)?;
    for (i, row) in rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(invalid(format!(
                "row {i} has {} fields but the header has {}",
                row.len(),
                header.len()
            )));
        }
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    emit_csv(header, rows, BufWriter::new(File::create(path)?))
}
