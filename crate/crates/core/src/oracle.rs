//! Noisy black-box functions `Y(theta)` with `E[Y(theta)] = alpha(theta)`,
//! together with the built-in test problems and their known constants.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::sampling::{RngStream, StreamRng};

/// A simulation whose output is an unbiased, noisy estimate of `alpha(theta)`.
///
/// Implementations must be pure given the generator: the same point and the
/// same stream position produce the same draw. Separate calls never share
/// randomness (no common random numbers).
pub trait SimulationOracle: Send + Sync {
    fn dim(&self) -> usize;

    fn label(&self) -> String;

    /// One draw of `Y(theta)`.
    fn sample(&self, theta: &[f64], rng: &mut StreamRng) -> f64;

    /// `alpha(theta)` when it is known in closed form.
    fn mean(&self, _theta: &[f64]) -> Option<f64> {
        None
    }

    /// Known constants for the derivative along `coord` at `theta0`.
    fn ground_truth(&self, _theta0: &[f64], _coord: usize) -> GroundTruth {
        GroundTruth::default()
    }

    /// Global minimizer, for optimality and solution gaps.
    fn minimizer(&self) -> Option<Vec<f64>> {
        None
    }
}

impl<T: SimulationOracle + ?Sized> SimulationOracle for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn label(&self) -> String {
        (**self).label()
    }
    fn sample(&self, theta: &[f64], rng: &mut StreamRng) -> f64 {
        (**self).sample(theta, rng)
    }
    fn mean(&self, theta: &[f64]) -> Option<f64> {
        (**self).mean(theta)
    }
    fn ground_truth(&self, theta0: &[f64], coord: usize) -> GroundTruth {
        (**self).ground_truth(theta0, coord)
    }
    fn minimizer(&self) -> Option<Vec<f64>> {
        (**self).minimizer()
    }
}

/// Known constants at a point. A `None` field is unknown for the problem, and
/// methods that need it refuse to run instead of substituting a default.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GroundTruth {
    /// `alpha'(theta0)`
    pub deriv: Option<f64>,
    /// `B = alpha'''(theta0) / 6`
    pub bias_const: Option<f64>,
    /// `D = alpha^(5)(theta0) / 120`
    pub fifth_const: Option<f64>,
    /// `sigma^2(theta0)`, positive when known
    pub noise_var: Option<f64>,
}

impl GroundTruth {
    pub fn deriv(&self) -> Result<f64> {
        self.deriv.ok_or(Error::MissingTruth("derivative"))
    }

    pub fn bias_const(&self) -> Result<f64> {
        self.bias_const.ok_or(Error::MissingTruth("bias constant B"))
    }

    pub fn fifth_const(&self) -> Result<f64> {
        self.fifth_const.ok_or(Error::MissingTruth("fifth-order constant D"))
    }

    pub fn noise_var(&self) -> Result<f64> {
        self.noise_var.ok_or(Error::MissingTruth("noise variance"))
    }
}

fn check_point(theta: &[f64], dim: usize) {
    debug_assert_eq!(theta.len(), dim, "point dimension mismatch");
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseModel {
    /// `Var[Y(theta)] = 1`
    Homoscedastic,
    /// `Var[Y(theta)] = exp(-3 theta)`
    Heteroscedastic,
}

/// `alpha(theta) = kappa * sin(theta)` with Gaussian noise.
#[derive(Clone, Debug)]
pub struct SinOracle {
    kappa: f64,
    noise: NoiseModel,
}

pub fn sin_oracle(kappa: f64, noise: NoiseModel) -> Result<SinOracle> {
    if kappa == 0.0 || !kappa.is_finite() {
        return Err(invalid(format!("kappa must be finite and nonzero (got {kappa})")));
    }
    Ok(SinOracle { kappa, noise })
}

impl SinOracle {
    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    fn variance(&self, theta: f64) -> f64 {
        match self.noise {
            NoiseModel::Homoscedastic => 1.0,
            NoiseModel::Heteroscedastic => (-3.0 * theta).exp(),
        }
    }
}

impl SimulationOracle for SinOracle {
    fn dim(&self) -> usize {
        1
    }

    fn label(&self) -> String {
        match self.noise {
            NoiseModel::Homoscedastic => format!("sin1@{}", self.kappa),
            NoiseModel::Heteroscedastic => format!("sin2@{}", self.kappa),
        }
    }

    fn sample(&self, theta: &[f64], rng: &mut StreamRng) -> f64 {
        check_point(theta, 1);
        let z: f64 = rng.sample(StandardNormal);
        self.kappa * theta[0].sin() + self.variance(theta[0]).sqrt() * z
    }

    fn mean(&self, theta: &[f64]) -> Option<f64> {
        Some(self.kappa * theta[0].sin())
    }

    fn ground_truth(&self, theta0: &[f64], _coord: usize) -> GroundTruth {
        let kc = self.kappa * theta0[0].cos();
        GroundTruth {
            deriv: Some(kc),
            bias_const: Some(-kc / 6.0),
            fifth_const: Some(kc / 120.0),
            noise_var: Some(self.variance(theta0[0])),
        }
    }
}

/// `alpha(theta) = 1 - 6 theta + 6 theta^2 - 2.5 theta^3 + 0.1 theta^5` with
/// unit Gaussian noise.
#[derive(Clone, Copy, Debug, Default)]
pub struct PolyOracle;

pub fn poly_oracle() -> PolyOracle {
    PolyOracle
}

impl PolyOracle {
    pub fn value(theta: f64) -> f64 {
        let t2 = theta * theta;
        1.0 - 6.0 * theta + 6.0 * t2 - 2.5 * t2 * theta + 0.1 * t2 * t2 * theta
    }

    pub fn derivative(theta: f64) -> f64 {
        let t2 = theta * theta;
        -6.0 + 12.0 * theta - 7.5 * t2 + 0.5 * t2 * t2
    }
}

impl SimulationOracle for PolyOracle {
    fn dim(&self) -> usize {
        1
    }

    fn label(&self) -> String {
        "poly".to_string()
    }

    fn sample(&self, theta: &[f64], rng: &mut StreamRng) -> f64 {
        check_point(theta, 1);
        let z: f64 = rng.sample(StandardNormal);
        Self::value(theta[0]) + z
    }

    fn mean(&self, theta: &[f64]) -> Option<f64> {
        Some(Self::value(theta[0]))
    }

    fn ground_truth(&self, theta0: &[f64], _coord: usize) -> GroundTruth {
        let t = theta0[0];
        GroundTruth {
            deriv: Some(Self::derivative(t)),
            bias_const: Some(-2.5 + t * t),
            fifth_const: Some(0.1),
            noise_var: Some(1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchFunction {
    /// `100 (x2 - x1^2)^2 + (x1 - 1)^2`, two-dimensional only.
    Rosenbrock,
    /// `sum x_i^2 + s^2 + s^4` with `s = sum 0.5 i x_i`.
    Zakharov,
}

/// A deterministic test function observed through additive `N(0, sd^2)` noise.
#[derive(Clone, Debug)]
pub struct NoisyBenchOracle {
    function: BenchFunction,
    dim: usize,
    noise_sd: f64,
}

pub fn noisy_bench_oracle(function: BenchFunction, dim: usize) -> Result<NoisyBenchOracle> {
    match function {
        BenchFunction::Rosenbrock if dim != 2 => Err(invalid(format!(
            "the Rosenbrock problem is two-dimensional (got d = {dim})"
        ))),
        _ if dim == 0 => Err(invalid("dimension must be at least 1")),
        _ => Ok(NoisyBenchOracle {
            function,
            dim,
            noise_sd: 1.0,
        }),
    }
}

impl NoisyBenchOracle {
    /// Replaces the unit noise level; `0` gives a deterministic oracle.
    pub fn with_noise_sd(mut self, sd: f64) -> Self {
        assert!(sd >= 0.0 && sd.is_finite(), "noise sd must be finite and >= 0");
        self.noise_sd = sd;
        self
    }

    pub fn function(&self) -> BenchFunction {
        self.function
    }

    fn zakharov_sum(x: &[f64]) -> f64 {
        x.iter().enumerate().map(|(i, xi)| 0.5 * (i + 1) as f64 * xi).sum()
    }

    /// The noise-free objective `f(x)`.
    pub fn objective(&self, x: &[f64]) -> f64 {
        match self.function {
            BenchFunction::Rosenbrock => {
                let a = x[1] - x[0] * x[0];
                100.0 * a * a + (x[0] - 1.0).powi(2)
            }
            BenchFunction::Zakharov => {
                let s = Self::zakharov_sum(x);
                let s2 = s * s;
                x.iter().map(|v| v * v).sum::<f64>() + s2 + s2 * s2
            }
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        match self.function {
            BenchFunction::Rosenbrock => {
                let a = x[1] - x[0] * x[0];
                vec![-400.0 * x[0] * a + 2.0 * (x[0] - 1.0), 200.0 * a]
            }
            BenchFunction::Zakharov => {
                let s = Self::zakharov_sum(x);
                let common = 2.0 * s + 4.0 * s * s * s;
                x.iter()
                    .enumerate()
                    .map(|(i, xi)| 2.0 * xi + 0.5 * (i + 1) as f64 * common)
                    .collect()
            }
        }
    }

    /// `d^3 f / dx_coord^3` at `x`.
    fn third_partial(&self, x: &[f64], coord: usize) -> f64 {
        match self.function {
            BenchFunction::Rosenbrock if coord == 0 => 2400.0 * x[0],
            BenchFunction::Rosenbrock => 0.0,
            BenchFunction::Zakharov => {
                let a = 0.5 * (coord + 1) as f64;
                24.0 * Self::zakharov_sum(x) * a * a * a
            }
        }
    }
}

impl SimulationOracle for NoisyBenchOracle {
    fn dim(&self) -> usize {
        self.dim
    }

    fn label(&self) -> String {
        match self.function {
            BenchFunction::Rosenbrock => "rosenbrock".to_string(),
            BenchFunction::Zakharov => format!("zakharov@{}", self.dim),
        }
    }

    fn sample(&self, theta: &[f64], rng: &mut StreamRng) -> f64 {
        check_point(theta, self.dim);
        let z: f64 = rng.sample(StandardNormal);
        self.objective(theta) + self.noise_sd * z
    }

    fn mean(&self, theta: &[f64]) -> Option<f64> {
        Some(self.objective(theta))
    }

    fn ground_truth(&self, theta0: &[f64], coord: usize) -> GroundTruth {
        GroundTruth {
            deriv: Some(self.gradient(theta0)[coord]),
            bias_const: Some(self.third_partial(theta0, coord) / 6.0),
            // both functions are polynomials of degree four
            fifth_const: Some(0.0),
            noise_var: Some(self.noise_sd * self.noise_sd),
        }
    }

    fn minimizer(&self) -> Option<Vec<f64>> {
        Some(match self.function {
            BenchFunction::Rosenbrock => vec![1.0, 1.0],
            BenchFunction::Zakharov => vec![0.0; self.dim],
        })
    }
}

/// M/M/1 queue observed over a finite horizon of customers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueueSpec {
    pub arrival_rate: f64,
    pub service_rate: f64,
    pub horizon: usize,
}

impl QueueSpec {
    pub fn new(arrival_rate: f64, service_rate: f64, horizon: usize) -> Result<Self> {
        for (name, rate) in [("arrival", arrival_rate), ("service", service_rate)] {
            if !(rate > 0.0 && rate.is_finite()) {
                return Err(invalid(format!("{name} rate must be finite and positive (got {rate})")));
            }
        }
        if horizon == 0 {
            return Err(invalid("queue horizon N must be at least 1"));
        }
        Ok(Self {
            arrival_rate,
            service_rate,
            horizon,
        })
    }
}

/// Which rate plays the role of `theta`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueueParameter {
    Arrival,
    Service,
}

/// Per-customer quantity averaged over the horizon.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueueMetric {
    /// Time spent waiting before service, `W_i`.
    Waiting,
    /// Waiting plus service time, `W_i + S_i`.
    Sojourn,
}

impl fmt::Display for QueueParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueueParameter::Arrival => "arrival",
            QueueParameter::Service => "service",
        })
    }
}

impl FromStr for QueueParameter {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "arrival" | "lambda" => Ok(QueueParameter::Arrival),
            "service" | "mu" => Ok(QueueParameter::Service),
            _ => Err(Error::Config(format!("unknown queue parameter `{s}`"))),
        }
    }
}

impl fmt::Display for QueueMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueueMetric::Waiting => "wait",
            QueueMetric::Sojourn => "sojourn",
        })
    }
}

impl FromStr for QueueMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wait" | "waiting" => Ok(QueueMetric::Waiting),
            "sojourn" | "system" => Ok(QueueMetric::Sojourn),
            _ => Err(Error::Config(format!("unknown queue metric `{s}`"))),
        }
    }
}

/// Exponential draw by inversion so that a fixed stream reproduces paths.
#[inline]
fn exponential(rate: f64, rng: &mut StreamRng) -> f64 {
    let u: f64 = rng.random();
    -(1.0 - u).ln() / rate
}

/// One sample path: returns the horizon average of the metric together with
/// the score of the chosen parameter when `with_score` is set.
fn simulate_queue(
    arrival: f64,
    service: f64,
    horizon: usize,
    metric: QueueMetric,
    score_of: Option<QueueParameter>,
    rng: &mut StreamRng,
) -> (f64, f64) {
    let mut wait = 0.0;
    let mut total = 0.0;
    let mut score = 0.0;
    for i in 0..horizon {
        let s = exponential(service, rng);
        total += match metric {
            QueueMetric::Waiting => wait,
            QueueMetric::Sojourn => wait + s,
        };
        let last = i + 1 == horizon;
        // S_N only enters the sojourn metric
        if score_of == Some(QueueParameter::Service) && (!last || metric == QueueMetric::Sojourn) {
            score += 1.0 / service - s;
        }
        if !last {
            let a = exponential(arrival, rng);
            if score_of == Some(QueueParameter::Arrival) {
                score += 1.0 / arrival - a;
            }
            wait = (wait + s - a).max(0.0);
        }
    }
    (total / horizon as f64, score)
}

/// Queue simulation with `theta` set to one of the two rates.
#[derive(Clone, Debug)]
pub struct QueueOracle {
    spec: QueueSpec,
    parameter: QueueParameter,
    metric: QueueMetric,
}

pub fn queue_oracle(spec: QueueSpec, parameter: QueueParameter, metric: QueueMetric) -> Result<QueueOracle> {
    let spec = QueueSpec::new(spec.arrival_rate, spec.service_rate, spec.horizon)?;
    Ok(QueueOracle {
        spec,
        parameter,
        metric,
    })
}

impl QueueOracle {
    pub fn spec(&self) -> QueueSpec {
        self.spec
    }

    /// The rate that `theta` stands for at the nominal point.
    pub fn nominal_point(&self) -> Vec<f64> {
        vec![match self.parameter {
            QueueParameter::Arrival => self.spec.arrival_rate,
            QueueParameter::Service => self.spec.service_rate,
        }]
    }
}

impl SimulationOracle for QueueOracle {
    fn dim(&self) -> usize {
        1
    }

    fn label(&self) -> String {
        format!(
            "queue@{},{},{},{},{}",
            self.spec.arrival_rate, self.spec.service_rate, self.spec.horizon, self.parameter, self.metric
        )
    }

    /// Returns NaN when `theta` is not a positive rate.
    fn sample(&self, theta: &[f64], rng: &mut StreamRng) -> f64 {
        check_point(theta, 1);
        let (arrival, service) = match self.parameter {
            QueueParameter::Arrival => (theta[0], self.spec.service_rate),
            QueueParameter::Service => (self.spec.arrival_rate, theta[0]),
        };
        if !(arrival > 0.0 && service > 0.0) {
            return f64::NAN;
        }
        simulate_queue(arrival, service, self.spec.horizon, self.metric, None, rng).0
    }

    fn ground_truth(&self, theta0: &[f64], _coord: usize) -> GroundTruth {
        let _ = theta0;
        GroundTruth::default()
    }
}

/// Likelihood-ratio (score function) derivative estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LikelihoodRatioEstimate {
    pub value: f64,
    pub std_error: f64,
    pub reps: usize,
}

const LR_BLOCK: usize = 10_000;

/// Score-function estimate of `d E[metric] / d rate` at the nominal rates.
///
/// Paths are grouped in blocks of 10^4, each on its own substream, so the
/// value depends only on `(stream, reps)`.
pub fn lr_derivative_oracle(
    spec: QueueSpec,
    parameter: QueueParameter,
    metric: QueueMetric,
    reps: usize,
    stream: RngStream,
) -> Result<LikelihoodRatioEstimate> {
    let spec = QueueSpec::new(spec.arrival_rate, spec.service_rate, spec.horizon)?;
    if reps == 0 {
        return Err(invalid("likelihood-ratio estimate needs at least one repetition"));
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut done = 0;
    let mut block = 0u64;
    while done < reps {
        let count = LR_BLOCK.min(reps - done);
        let mut rng = stream.substream(block).rng();
        for _ in 0..count {
            let (value, score) = simulate_queue(
                spec.arrival_rate,
                spec.service_rate,
                spec.horizon,
                metric,
                Some(parameter),
                &mut rng,
            );
            let term = value * score;
            sum += term;
            sum_sq += term * term;
        }
        done += count;
        block += 1;
    }
    let n = reps as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    Ok(LikelihoodRatioEstimate {
        value: mean,
        std_error: (var / n).sqrt(),
        reps,
    })
}

/// Problem selector used by the CLI and config files.
#[derive(Clone, Debug, PartialEq)]
pub enum ProblemSpec {
    Sin {
        noise: NoiseModel,
        kappa: f64,
    },
    Poly {
        theta0: f64,
    },
    Rosenbrock,
    Zakharov {
        dim: usize,
    },
    Queue {
        spec: QueueSpec,
        parameter: QueueParameter,
        metric: QueueMetric,
    },
}

/// Starting point for the Rosenbrock problem.
pub const ROSENBROCK_START: [f64; 2] = [-1.2, 1.0];
/// Default `kappa` for the sine problems.
pub const DEFAULT_KAPPA: f64 = 10.0;

impl ProblemSpec {
    pub fn build(&self) -> Result<Box<dyn SimulationOracle>> {
        Ok(match self {
            ProblemSpec::Sin { noise, kappa } => Box::new(sin_oracle(*kappa, *noise)?),
            ProblemSpec::Poly { .. } => Box::new(poly_oracle()),
            ProblemSpec::Rosenbrock => Box::new(noisy_bench_oracle(BenchFunction::Rosenbrock, 2)?),
            ProblemSpec::Zakharov { dim } => Box::new(noisy_bench_oracle(BenchFunction::Zakharov, *dim)?),
            ProblemSpec::Queue {
                spec,
                parameter,
                metric,
            } => Box::new(queue_oracle(*spec, *parameter, *metric)?),
        })
    }

    /// Point of interest: where derivatives are estimated, or where the
    /// optimizer starts.
    pub fn point(&self) -> Vec<f64> {
        match self {
            ProblemSpec::Sin { .. } => vec![0.0],
            ProblemSpec::Poly { theta0 } => vec![*theta0],
            ProblemSpec::Rosenbrock => ROSENBROCK_START.to_vec(),
            ProblemSpec::Zakharov { dim } => vec![1.0; *dim],
            ProblemSpec::Queue { spec, parameter, .. } => vec![match parameter {
                QueueParameter::Arrival => spec.arrival_rate,
                QueueParameter::Service => spec.service_rate,
            }],
        }
    }
}

fn parse_num<T: FromStr>(field: &str, what: &str, id: &str) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad {what} `{field}` in problem id `{id}`")))
}

impl FromStr for ProblemSpec {
    type Err = Error;

    /// Accepts `sin1`, `sin2` (optionally `@kappa`), `poly@<theta0>`,
    /// `rosenbrock`, `zakharov@<d>` and
    /// `queue@<lam>,<mu>,<N>,<arrival|service>[,<wait|sojourn>]`.
    fn from_str(id: &str) -> Result<Self> {
        let id = id.trim();
        let (name, args) = match id.split_once('@') {
            Some((n, a)) => (n, Some(a)),
            None => (id, None),
        };
        let spec = match (name, args) {
            ("sin1" | "sin2", _) => ProblemSpec::Sin {
                noise: if name == "sin1" {
                    NoiseModel::Homoscedastic
                } else {
                    NoiseModel::Heteroscedastic
                },
                kappa: args
                    .map(|a| parse_num(a, "kappa", id))
                    .transpose()?
                    .unwrap_or(DEFAULT_KAPPA),
            },
            ("poly", Some(a)) => ProblemSpec::Poly {
                theta0: parse_num(a, "theta0", id)?,
            },
            ("rosenbrock", None) => ProblemSpec::Rosenbrock,
            ("zakharov", Some(a)) => ProblemSpec::Zakharov {
                dim: parse_num(a, "dimension", id)?,
            },
            ("queue", Some(a)) => {
                let fields: Vec<&str> = a.split(',').map(str::trim).collect();
                if !(4..=5).contains(&fields.len()) {
                    return Err(Error::Config(format!(
                        "queue id needs `<lam>,<mu>,<N>,<param>[,<metric>]` (got `{id}`)"
                    )));
                }
                ProblemSpec::Queue {
                    spec: QueueSpec::new(
                        parse_num(fields[0], "arrival rate", id)?,
                        parse_num(fields[1], "service rate", id)?,
                        parse_num(fields[2], "horizon", id)?,
                    )?,
                    parameter: fields[3].parse()?,
                    metric: fields
                        .get(4)
                        .map(|m| m.parse())
                        .transpose()?
                        .unwrap_or(QueueMetric::Sojourn),
                }
            }
            _ => return Err(Error::UnknownProblem(id.to_string())),
        };
        // surface invalid dimensions and rates at parse time
        spec.build()?;
        Ok(spec)
    }
}

impl fmt::Display for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProblemSpec::Sin { noise, kappa } => {
                let name = match noise {
                    NoiseModel::Homoscedastic => "sin1",
                    NoiseModel::Heteroscedastic => "sin2",
                };
                if *kappa == DEFAULT_KAPPA {
                    write!(f, "{name}")
                } else {
                    write!(f, "{name}@{kappa}")
                }
            }
            ProblemSpec::Poly { theta0 } => write!(f, "poly@{theta0}"),
            ProblemSpec::Rosenbrock => write!(f, "rosenbrock"),
            ProblemSpec::Zakharov { dim } => write!(f, "zakharov@{dim}"),
            ProblemSpec::Queue {
                spec,
                parameter,
                metric,
            } => write!(
                f,
                "queue@{},{},{},{},{}",
                spec.arrival_rate, spec.service_rate, spec.horizon, parameter, metric
            ),
        }
    }
}
