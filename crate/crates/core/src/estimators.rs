//! Central finite-difference derivative estimators: fixed perturbation,
//! oracle-optimal perturbation, bootstrap-tuned perturbation, and the
//! correlation-induced estimator that recycles its pilot samples.

use std::fmt;
use std::str::FromStr;

use log::debug;

use crate::bootstrap::{bootstrap_moments, BootstrapMode, BootstrapMoments, PilotColumn};
use crate::error::{invalid, Error, Result};
use crate::oracle::{GroundTruth, SimulationOracle};
use crate::regression::{clamp_bias_constant, fit_bias_ols, fit_bias_wls, fit_var_ols, fit_var_wls};
use crate::sampling::{
    check_perturbation, draw_perturbation_set, DifferenceSampler, PerturbationGenerator, PerturbationSet, RngStream,
    DEFAULT_GAMMA,
};

// Substream tags under one estimate's stream.
const TAG_COEFFICIENTS: u64 = 0;
const TAG_PILOT: u64 = 1 << 32;
const TAG_BOOTSTRAP: u64 = 2 << 32;
const TAG_FRESH: u64 = 3 << 32;

/// How the budget is split between pilot and fresh samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PilotAllocation {
    /// Fixed number of pilot pairs per perturbation.
    PilotSize(usize),
    /// Fraction `r` of the budget spent on pilots: `n_b = floor(r n / K)`.
    Ratio(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ClampRule {
    /// `eps = scale * max(1, |alpha'|)`.
    Relative {
        scale: f64,
    },
    Absolute(f64),
}

impl ClampRule {
    pub fn threshold(&self, alpha: f64) -> f64 {
        match *self {
            ClampRule::Relative { scale } => scale * alpha.abs().max(1.0),
            ClampRule::Absolute(eps) => eps,
        }
    }
}

impl Default for ClampRule {
    fn default() -> Self {
        ClampRule::Relative { scale: 1e-4 }
    }
}

/// Estimator used for both regressions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RegressionKind {
    /// Rows weighted by bootstrap standard deviations; variance fit on `h^2 s^2`.
    #[default]
    Weighted,
    /// Unweighted fits.
    Ordinary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorConfig {
    /// Number of pilot perturbations `K`.
    pub k: usize,
    pub allocation: PilotAllocation,
    pub bootstrap: BootstrapMode,
    pub generator: PerturbationGenerator,
    /// Pilot perturbations are `c_k n_b^gamma`.
    pub gamma: f64,
    pub clamp: ClampRule,
    pub regression: RegressionKind,
    /// Lower bound on the variance estimate so that `h` stays positive.
    pub sigma2_floor: f64,
    /// Fixed coefficients instead of random draws.
    pub coefficients: Option<Vec<f64>>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            k: 10,
            allocation: PilotAllocation::Ratio(1.0),
            bootstrap: BootstrapMode::default(),
            generator: PerturbationGenerator::default(),
            gamma: DEFAULT_GAMMA,
            clamp: ClampRule::default(),
            regression: RegressionKind::default(),
            sigma2_floor: 1e-12,
            coefficients: None,
        }
    }
}

impl EstimatorConfig {
    /// `n_b` for a total budget of `n` pairs; requires `2 <= n_b` and `K n_b <= n`.
    pub fn pilot_size(&self, n: usize) -> Result<usize> {
        let k = self.coefficients.as_ref().map_or(self.k, Vec::len);
        if k < 2 {
            return Err(invalid(format!("K must be at least 2 (got {k})")));
        }
        let n_b = match self.allocation {
            PilotAllocation::PilotSize(n_b) => n_b,
            PilotAllocation::Ratio(r) => {
                if !(r > 0.0 && r <= 1.0) {
                    return Err(invalid(format!("pilot ratio r must lie in (0, 1] (got {r})")));
                }
                (r * n as f64 / k as f64).floor() as usize
            }
        };
        if n_b < 2 {
            return Err(Error::Budget(format!(
                "{n} pairs give n_b = {n_b} with K = {k}; need at least 2 pairs per perturbation"
            )));
        }
        if k * n_b > n {
            return Err(Error::Budget(format!(
                "pilot stage needs K n_b = {} pairs but n = {n}",
                k * n_b
            )));
        }
        Ok(n_b)
    }

    pub fn num_perturbations(&self) -> usize {
        self.coefficients.as_ref().map_or(self.k, Vec::len)
    }
}

/// Pilot samples: column `k` holds `n_b` difference quotients at `h_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PilotData {
    pub set: PerturbationSet,
    pub columns: Vec<PilotColumn>,
}

impl PilotData {
    /// Sample pairs consumed, `K n_b`.
    pub fn cost(&self) -> usize {
        self.columns.iter().map(PilotColumn::len).sum()
    }

    pub fn pilot_size(&self) -> usize {
        self.set.pilot_size
    }
}

/// Estimated constants and the perturbation they imply for a budget.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantEstimates {
    pub alpha: f64,
    /// Slope before clamping.
    pub bias_raw: f64,
    /// Clamped slope; used everywhere downstream.
    pub bias: f64,
    pub sigma2: f64,
    /// `(sigma2 / (4 budget bias^2))^(1/6)`
    pub h: f64,
    pub budget: usize,
}

impl ConstantEstimates {
    pub fn new(alpha: f64, bias_raw: f64, bias: f64, sigma2: f64, budget: usize) -> Result<Self> {
        let h = optimal_perturbation(bias, sigma2, budget)?;
        Ok(Self {
            alpha,
            bias_raw,
            bias,
            sigma2,
            h,
            budget,
        })
    }
}

/// MSE-optimal perturbation `(sigma^2 / (4 n B^2))^(1/6)`.
pub fn optimal_perturbation(b: f64, sigma2: f64, n: usize) -> Result<f64> {
    if b == 0.0 || !b.is_finite() {
        return Err(invalid(format!("bias constant must be finite and nonzero (got {b})")));
    }
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(invalid(format!(
            "noise variance must be finite and positive (got {sigma2})"
        )));
    }
    if n == 0 {
        return Err(invalid("budget must be at least one pair"));
    }
    Ok((sigma2 / (4.0 * n as f64 * b * b)).powf(1.0 / 6.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Tra,
    Opt,
    Boot,
    Cor,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Tra => "tra",
            Method::Opt => "opt",
            Method::Boot => "boot",
            Method::Cor => "cor",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tra" => Ok(Method::Tra),
            "opt" => Ok(Method::Opt),
            "boot" => Ok(Method::Boot),
            "cor" => Ok(Method::Cor),
            _ => Err(Error::Config(format!(
                "unknown method `{s}` (expected tra, opt, boot or cor)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientEstimate {
    pub value: f64,
    pub method: Method,
    /// Never exceeds the requested budget.
    pub pairs_used: usize,
    /// Perturbation of the fresh samples (or the one pilots are mapped to).
    pub perturbation: f64,
    pub constants: Option<ConstantEstimates>,
}

fn check_budget(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Budget("need at least one sample pair".into()));
    }
    Ok(())
}

fn sum_of_fresh<O: SimulationOracle + ?Sized>(
    oracle: &O,
    theta0: &[f64],
    coord: usize,
    n: usize,
    h: f64,
    stream: RngStream,
) -> Result<f64> {
    let mut sampler = DifferenceSampler::new(oracle, theta0, coord)?;
    let mut rng = stream.substream(TAG_FRESH).rng();
    let mut sum = 0.0;
    for _ in 0..n {
        sum += sampler.draw(h, &mut rng);
    }
    Ok(sum)
}

/// Mean of `n` difference samples at a fixed `h`.
pub fn tra_cfd<O: SimulationOracle + ?Sized>(
    oracle: &O,
    theta0: &[f64],
    coord: usize,
    n: usize,
    h: f64,
    stream: RngStream,
) -> Result<GradientEstimate> {
    check_budget(n)?;
    check_perturbation(h)?;
    let sum = sum_of_fresh(oracle, theta0, coord, n, h, stream)?;
    Ok(GradientEstimate {
        value: sum / n as f64,
        method: Method::Tra,
        pairs_used: n,
        perturbation: h,
        constants: None,
    })
}

/// Fixed-perturbation estimate at the optimal `h` for the true constants.
pub fn opt_cfd<O: SimulationOracle + ?Sized>(
    oracle: &O,
    theta0: &[f64],
    coord: usize,
    n: usize,
    truth: &GroundTruth,
    stream: RngStream,
) -> Result<GradientEstimate> {
    check_budget(n)?;
    let h = optimal_perturbation(truth.bias_const()?, truth.noise_var()?, n)?;
    let mut est = tra_cfd(oracle, theta0, coord, n, h, stream)?;
    est.method = Method::Opt;
    Ok(est)
}

/// Draws the coefficients (or takes the fixed ones) and `n_b` pilot pairs per
/// perturbation.
pub fn draw_pilot<O: SimulationOracle + ?Sized>(
    oracle: &O,
    theta0: &[f64],
    coord: usize,
    n_b: usize,
    cfg: &EstimatorConfig,
    stream: RngStream,
) -> Result<PilotData> {
    let set = match &cfg.coefficients {
        Some(c) => PerturbationSet::from_coefficients(c.clone(), n_b, cfg.gamma)?,
        None => {
            let mut rng = stream.substream(TAG_COEFFICIENTS).rng();
            draw_perturbation_set(cfg.k, n_b, cfg.gamma, &cfg.generator, &mut rng)?
        }
    };
    let mut sampler = DifferenceSampler::new(oracle, theta0, coord)?;
    let columns = set
        .perturbations
        .iter()
        .enumerate()
        .map(|(k, &h)| {
            let mut rng = stream.substream(TAG_PILOT | k as u64).rng();
            let mut samples = Vec::with_capacity(n_b);
            sampler.fill(h, n_b, &mut rng, &mut samples);
            PilotColumn::new(h, samples)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PilotData { set, columns })
}

/// Bootstrap moments of every pilot column.
pub fn pilot_moments(pilot: &PilotData, mode: BootstrapMode, stream: RngStream) -> Result<Vec<BootstrapMoments>> {
    pilot
        .columns
        .iter()
        .enumerate()
        .map(|(k, col)| {
            let mut rng = stream.substream(TAG_BOOTSTRAP | k as u64).rng();
            bootstrap_moments(col, mode, &mut rng)
        })
        .collect()
}

/// Regressions on the bootstrap moments, then the clamp and the perturbation
/// for `budget` pairs.
pub fn fit_constants(
    h: &[f64],
    moments: &[BootstrapMoments],
    n_b: usize,
    budget: usize,
    cfg: &EstimatorConfig,
) -> Result<ConstantEstimates> {
    let means: Vec<f64> = moments.iter().map(|m| m.mean).collect();
    let s2: Vec<f64> = moments.iter().map(|m| m.variance).collect();
    let sds: Vec<f64> = s2.iter().map(|v| v.sqrt()).collect();
    let fit = match cfg.regression {
        RegressionKind::Weighted if sds.iter().all(|s| *s > 0.0 && s.is_finite()) => fit_bias_wls(h, &means, &sds)?,
        RegressionKind::Weighted => {
            debug!("a pilot column has zero bootstrap spread; fitting with equal weights");
            fit_bias_ols(h, &means)?
        }
        RegressionKind::Ordinary => fit_bias_ols(h, &means)?,
    };
    let var = match cfg.regression {
        RegressionKind::Weighted => fit_var_wls(h, &s2, n_b)?,
        RegressionKind::Ordinary => fit_var_ols(h, &s2, n_b)?,
    };
    let sigma2 = var.sigma2.max(cfg.sigma2_floor);
    let bias = clamp_bias_constant(fit.slope, cfg.clamp.threshold(fit.intercept));
    ConstantEstimates::new(fit.intercept, fit.slope, bias, sigma2, budget)
}

/// Pilot stage plus constant estimation, with the perturbation computed for
/// a budget of `budget` pairs.
pub fn estimate_constants<O: SimulationOracle + ?Sized>(
    oracle: &O,
    theta0: &[f64],
    coord: usize,
    n_b: usize,
    budget: usize,
    cfg: &EstimatorConfig,
    stream: RngStream,
) -> Result<(PilotData, ConstantEstimates)> {
    let pilot = draw_pilot(oracle, theta0, coord, n_b, cfg, stream)?;
    let moments = pilot_moments(&pilot, cfg.bootstrap, stream)?;
    let constants = fit_constants(&pilot.set.perturbations, &moments, n_b, budget, cfg)?;
    Ok((pilot, constants))
}

/// Discards the pilots and spends the remaining `n - K n_b` pairs at the
/// perturbation tuned for that remainder.
pub fn boot_cfd<O: SimulationOracle + ?Sized>(
    oracle: &O,
    theta0: &[f64],
    coord: usize,
    n: usize,
    cfg: &EstimatorConfig,
    stream: RngStream,
) -> Result<GradientEstimate> {
    let n_b = cfg.pilot_size(n)?;
    let pilot_cost = cfg.num_perturbations() * n_b;
    let n2 = n - pilot_cost;
    if n2 == 0 {
        return Err(Error::Budget(format!(
            "all {n} pairs go to the pilot stage; nothing is left for fresh samples"
        )));
    }
    let (_, constants) = estimate_constants(oracle, theta0, coord, n_b, n2, cfg, stream)?;
    let sum = sum_of_fresh(oracle, theta0, coord, n2, constants.h, stream)?;
    Ok(GradientEstimate {
        value: sum / n2 as f64,
        method: Method::Boot,
        pairs_used: n,
        perturbation: constants.h,
        constants: Some(constants),
    })
}

/// Maps a pilot sample at `h_k` to a sample at `h`: rescales its residual
/// about the fitted line and recentres it at the fitted value for `h`.
pub fn transform_pilot_sample(delta: f64, h_k: f64, h: f64, alpha: f64, bias: f64) -> f64 {
    debug_assert!(h != 0.0);
    (h_k.abs() / h.abs()) * (delta - (alpha + bias * h_k * h_k)) + (alpha + bias * h * h)
}

/// Average of the transformed pilots and the fresh samples.
pub fn assemble_cor_estimate(pilot: &PilotData, constants: &ConstantEstimates, fresh_sum: f64, fresh: usize) -> f64 {
    let transformed: f64 = pilot
        .columns
        .iter()
        .map(|col| {
            col.samples
                .iter()
                .map(|&d| transform_pilot_sample(d, col.h, constants.h, constants.alpha, constants.bias))
                .sum::<f64>()
        })
        .sum();
    (transformed + fresh_sum) / (pilot.cost() + fresh) as f64
}

/// Correlation-induced CFD estimate using all `n` pairs.
pub fn cor_cfd<O: SimulationOracle + ?Sized>(
    oracle: &O,
    theta0: &[f64],
    coord: usize,
    n: usize,
    cfg: &EstimatorConfig,
    stream: RngStream,
) -> Result<GradientEstimate> {
    let n_b = cfg.pilot_size(n)?;
    let (pilot, constants) = estimate_constants(oracle, theta0, coord, n_b, n, cfg, stream)?;
    let fresh = n - pilot.cost();
    let fresh_sum = if fresh > 0 {
        sum_of_fresh(oracle, theta0, coord, fresh, constants.h, stream)?
    } else {
        0.0
    };
    let value = assemble_cor_estimate(&pilot, &constants, fresh_sum, fresh);
    Ok(GradientEstimate {
        value,
        method: Method::Cor,
        pairs_used: n,
        perturbation: constants.h,
        constants: Some(constants),
    })
}

/// Where a fixed-perturbation estimate gets its `h`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TraPerturbation {
    Fixed(f64),
    /// Optimal `h` for assumed constants `B` and `sigma^2`.
    Assumed {
        bias: f64,
        sigma2: f64,
    },
}

impl TraPerturbation {
    pub fn resolve(&self, n: usize) -> Result<f64> {
        match *self {
            TraPerturbation::Fixed(h) => Ok(h),
            TraPerturbation::Assumed { bias, sigma2 } => optimal_perturbation(bias, sigma2, n),
        }
    }
}

/// Method selection together with what each method needs.
#[derive(Clone, Debug, PartialEq)]
pub enum MethodSpec {
    Tra(TraPerturbation),
    Opt(GroundTruth),
    Boot(EstimatorConfig),
    Cor(EstimatorConfig),
}

impl MethodSpec {
    pub fn method(&self) -> Method {
        match self {
            MethodSpec::Tra(_) => Method::Tra,
            MethodSpec::Opt(_) => Method::Opt,
            MethodSpec::Boot(_) => Method::Boot,
            MethodSpec::Cor(_) => Method::Cor,
        }
    }
}

pub fn estimate_derivative<O: SimulationOracle + ?Sized>(
    spec: &MethodSpec,
    oracle: &O,
    theta0: &[f64],
    coord: usize,
    n: usize,
    stream: RngStream,
) -> Result<GradientEstimate> {
    match spec {
        MethodSpec::Tra(p) => tra_cfd(oracle, theta0, coord, n, p.resolve(n)?, stream),
        MethodSpec::Opt(truth) => opt_cfd(oracle, theta0, coord, n, truth, stream),
        MethodSpec::Boot(cfg) => boot_cfd(oracle, theta0, coord, n, cfg, stream),
        MethodSpec::Cor(cfg) => cor_cfd(oracle, theta0, coord, n, cfg, stream),
    }
}

/// Summary for one pilot ratio; `boot` is `None` when no fresh pairs remain.
#[derive(Clone, Debug, PartialEq)]
pub struct RSweepRow {
    pub r: f64,
    pub cor: crate::bench::SummaryStats,
    pub boot: Option<crate::bench::SummaryStats>,
}

/// Replicated Cor-CFD and BOOT-CFD error summaries across pilot ratios.
#[allow(clippy::too_many_arguments)]
pub fn r_sweep<O: SimulationOracle + ?Sized>(
    oracle: &O,
    theta0: &[f64],
    coord: usize,
    n: usize,
    r_grid: &[f64],
    reps: usize,
    cfg: &EstimatorConfig,
    truth: f64,
    stream: RngStream,
) -> Result<Vec<RSweepRow>> {
    r_grid
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let cfg = EstimatorConfig {
                allocation: PilotAllocation::Ratio(r),
                ..cfg.clone()
            };
            let n_b = cfg.pilot_size(n)?;
            let base = stream.substream(i as u64);
            let cor = crate::bench::run_replications(reps, base.substream(0), |s| {
                cor_cfd(oracle, theta0, coord, n, &cfg, s).map(|e| e.value)
            })?;
            let boot = if cfg.num_perturbations() * n_b < n {
                let v = crate::bench::run_replications(reps, base.substream(1), |s| {
                    boot_cfd(oracle, theta0, coord, n, &cfg, s).map(|e| e.value)
                })?;
                Some(crate::bench::summarize(&v, truth))
            } else {
                None
            };
            Ok(RSweepRow {
                r,
                cor: crate::bench::summarize(&cor, truth),
                boot,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::poly_oracle;

    #[test]
    fn transform_examples() {
        assert!((transform_pilot_sample(2.2, 0.2, 0.1, 2.0, 3.0) - 2.19).abs() < 1e-12);
        assert_eq!(transform_pilot_sample(1.7, 0.3, 0.3, 2.0, 3.0), 1.7);
        let on = transform_pilot_sample(2.0 + 3.0 * 0.04, 0.2, 0.5, 2.0, 3.0);
        assert!((on - (2.0 + 3.0 * 0.25)).abs() < 1e-12);
    }

    #[test]
    fn optimal_perturbation_examples() {
        assert!((optimal_perturbation(1.0, 4.0, 1).unwrap() - 1.0).abs() < 1e-15);
        let h = optimal_perturbation(-2.5, 1.0, 10_000).unwrap();
        // (1 / 250000)^(1/6)
        assert!((h - 0.125_992_1).abs() < 1e-7, "{h}");
        assert!(optimal_perturbation(0.0, 1.0, 10).is_err());
    }

    #[test]
    fn pilot_sizes() {
        let cfg = EstimatorConfig::default();
        assert_eq!(cfg.pilot_size(1000).unwrap(), 100);
        let half = EstimatorConfig {
            allocation: PilotAllocation::Ratio(0.5),
            ..EstimatorConfig::default()
        };
        assert_eq!(half.pilot_size(1005).unwrap(), 50);
        assert!(matches!(cfg.pilot_size(19), Err(Error::Budget(_))));
        let fixed = EstimatorConfig {
            allocation: PilotAllocation::PilotSize(10),
            ..EstimatorConfig::default()
        };
        assert!(fixed.pilot_size(99).is_err());
        assert_eq!(fixed.pilot_size(100).unwrap(), 10);
    }

    #[test]
    fn boot_needs_fresh_pairs() {
        let o = poly_oracle();
        let cfg = EstimatorConfig {
            allocation: PilotAllocation::PilotSize(10),
            bootstrap: BootstrapMode::Exact,
            ..EstimatorConfig::default()
        };
        let s = RngStream::from_seed(5);
        assert!(matches!(boot_cfd(&o, &[0.0], 0, 100, &cfg, s), Err(Error::Budget(_))));
        let e = boot_cfd(&o, &[0.0], 0, 1000, &cfg, s).unwrap();
        assert_eq!(e.pairs_used, 1000);
        assert_eq!(e.constants.unwrap().budget, 900);
    }

    #[test]
    fn methods_parse() {
        for m in ["tra", "opt", "boot", "cor"] {
            assert_eq!(m.parse::<Method>().unwrap().to_string(), m);
        }
        assert!("em".parse::<Method>().is_err());
    }
}
