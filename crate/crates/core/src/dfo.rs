//! Stochastic L-BFGS for derivative-free minimization with per-coordinate
//! finite-difference gradients, a noise-tolerant Armijo search and a growing
//! batch schedule.

use std::collections::VecDeque;

use log::{debug, warn};

use crate::bootstrap::BootstrapMode;
use crate::error::{invalid, Error, Result};
use crate::estimators::{cor_cfd, tra_cfd, EstimatorConfig, PilotAllocation, TraPerturbation};
use crate::oracle::SimulationOracle;
use crate::sampling::RngStream;

const TAG_LINE_SEARCH: u64 = 1 << 40;

/// Gradient estimator used inside the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub enum GradientMethod {
    /// Correlation-induced estimates on a growing batch.
    Cor,
    /// Fixed perturbation and a fixed number of pairs per coordinate.
    Tra {
        pairs: usize,
        perturbation: TraPerturbation,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DfoConfig {
    /// Total budget `T` in sample pairs; the loop runs while evaluations `< 2T`.
    pub budget: usize,
    /// Initial pairs per coordinate `T_0`.
    pub initial_batch: usize,
    /// Settings of the per-coordinate estimator; `estimator.k` is also the
    /// batch granularity.
    pub estimator: EstimatorConfig,
    pub gradient: GradientMethod,
    /// Sufficient-decrease constant `l1`.
    pub l1: f64,
    /// Backtracking factor `l2`.
    pub l2: f64,
    pub a0: f64,
    /// Noise allowance `sigma` in the Armijo test.
    pub sigma: f64,
    pub memory: usize,
    pub max_backtracks: usize,
    /// Use `+ l1 a g'Hg` in the Armijo test instead of the descent sign.
    pub armijo_plus_sign: bool,
    pub grad_tol: f64,
}

impl DfoConfig {
    /// `K = 5`, `T_0 = 20`, `r = 1`, `I = 100`, `(l1, l2) = (1e-4, 0.5)`,
    /// `a0 = 1`, `sigma = 1`, memory 10.
    pub fn standard(budget: usize) -> Self {
        Self {
            budget,
            initial_batch: 20,
            estimator: EstimatorConfig {
                k: 5,
                allocation: PilotAllocation::Ratio(1.0),
                bootstrap: BootstrapMode::MonteCarlo { replicates: 100 },
                ..EstimatorConfig::default()
            },
            gradient: GradientMethod::Cor,
            l1: 1e-4,
            l2: 0.5,
            a0: 1.0,
            sigma: 1.0,
            memory: 10,
            max_backtracks: 50,
            armijo_plus_sign: false,
            grad_tol: 1e-8,
        }
    }

    /// One pair per coordinate at the optimal `h` for `B = 1`, `sigma = 1`.
    pub fn tra_baseline(budget: usize) -> Self {
        Self {
            gradient: GradientMethod::Tra {
                pairs: 1,
                perturbation: TraPerturbation::Assumed { bias: 1.0, sigma2: 1.0 },
            },
            ..Self::standard(budget)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.estimator.k;
        if self.budget == 0 {
            return Err(invalid("budget must be positive"));
        }
        if !(0.0 < self.l1 && self.l1 < self.l2 && self.l2 < 1.0) {
            return Err(invalid(format!(
                "line-search constants need 0 < l1 < l2 < 1 (got {}, {})",
                self.l1, self.l2
            )));
        }
        if !(self.a0 > 0.0 && self.a0.is_finite()) {
            return Err(invalid("initial step a0 must be positive"));
        }
        if !(self.sigma >= 0.0) {
            return Err(invalid("noise allowance sigma must be >= 0"));
        }
        if self.memory == 0 {
            return Err(invalid("memory depth must be at least 1"));
        }
        match &self.gradient {
            GradientMethod::Cor if self.initial_batch < 2 * k => Err(invalid(format!(
                "initial batch T0 = {} must be at least 2K = {}",
                self.initial_batch,
                2 * k
            ))),
            GradientMethod::Tra { pairs: 0, .. } => Err(invalid("Tra gradients need at least one pair")),
            _ => Ok(()),
        }
    }
}

/// `floor((T_k + k + 1) / K) K`, raised to `K` when it would be zero.
pub fn batch_schedule(t_k: usize, k: usize, kk: usize) -> usize {
    assert!(kk > 0, "K must be positive");
    ((t_k + k + 1) / kk * kk).max(kk)
}

/// Curvature pairs of the limited-memory inverse-Hessian approximation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LbfgsMemory {
    capacity: usize,
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
}

/// Pairs with `s'y <= CURVATURE_TOL |s| |y|` are rejected.
pub const CURVATURE_TOL: f64 = 1e-10;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl LbfgsMemory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            pairs: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Stores `(s, y)` if it has safely positive curvature; returns whether it
    /// was kept. The oldest pair is dropped when full.
    pub fn push(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        let sy = dot(&s, &y);
        if !(sy > CURVATURE_TOL * norm(&s) * norm(&y)) {
            return false;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, sy));
        true
    }

    /// Stored `(s, y)` pairs, oldest first.
    pub fn pairs(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.pairs.iter().map(|(s, y, _)| (s.as_slice(), y.as_slice()))
    }
}

/// `H g` by the two-loop recursion, scaled initially by `s'y / y'y` of the
/// newest pair; the identity when memory is empty.
pub fn two_loop_direction(memory: &LbfgsMemory, g: &[f64]) -> Vec<f64> {
    let mut q = g.to_vec();
    let m = memory.pairs.len();
    let mut alpha = vec![0.0; m];
    for (i, (s, y, sy)) in memory.pairs.iter().enumerate().rev() {
        let a = dot(s, &q) / sy;
        alpha[i] = a;
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
    }
    if let Some((_, y, sy)) = memory.pairs.back() {
        let gamma = sy / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for (i, (s, y, sy)) in memory.pairs.iter().enumerate() {
        let b = dot(y, &q) / sy;
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (alpha[i] - b) * si);
    }
    q
}

/// Outcome of one backtracking search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineSearch {
    pub step: f64,
    /// Oracle calls made, including the draw at the base point.
    pub evaluations: usize,
    /// The noisy objective at the base point.
    pub base_value: f64,
    /// Every trial failed; `step` is the smallest one tried.
    pub gave_up: bool,
}

/// Parameters of the noisy sufficient-decrease test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArmijoParams {
    pub a0: f64,
    pub l1: f64,
    pub l2: f64,
    pub sigma: f64,
    pub max_backtracks: usize,
    pub plus_sign: bool,
}

/// First `a = a0 l2^j` with `Y(theta + a p) <= Y(theta) - l1 a g'Hg + 2 sigma`.
///
/// `Y(theta)` is drawn once; each trial draws once more.
pub fn stochastic_armijo<O: SimulationOracle + ?Sized>(
    oracle: &O,
    theta: &[f64],
    direction: &[f64],
    g_h_g: f64,
    params: &ArmijoParams,
    stream: RngStream,
) -> LineSearch {
    let mut rng = stream.rng();
    let base_value = oracle.sample(theta, &mut rng);
    let slope = if params.plus_sign { g_h_g } else { -g_h_g };
    let mut trial = theta.to_vec();
    let mut a = params.a0;
    let mut evaluations = 1;
    for j in 0..=params.max_backtracks {
        if j > 0 {
            a *= params.l2;
        }
        trial
            .iter_mut()
            .zip(theta.iter().zip(direction))
            .for_each(|(t, (x, p))| *t = x + a * p);
        let value = oracle.sample(&trial, &mut rng);
        evaluations += 1;
        if value <= base_value + params.l1 * a * slope + 2.0 * params.sigma {
            return LineSearch {
                step: a,
                evaluations,
                base_value,
                gave_up: false,
            };
        }
    }
    LineSearch {
        step: a,
        evaluations,
        base_value,
        gave_up: true,
    }
}

/// Per-coordinate correlation-induced gradient with `pairs` pairs each;
/// costs `2 d pairs` evaluations.
pub fn gradient_via_corcfd<O: SimulationOracle + ?Sized>(
    oracle: &O,
    theta: &[f64],
    pairs: usize,
    cfg: &EstimatorConfig,
    stream: RngStream,
) -> Result<Vec<f64>> {
    (0..theta.len())
        .map(|i| cor_cfd(oracle, theta, i, pairs, cfg, stream.substream(i as u64)).map(|e| e.value))
        .collect()
}

fn gradient<O: SimulationOracle + ?Sized>(
    oracle: &O,
    theta: &[f64],
    pairs: usize,
    cfg: &DfoConfig,
    stream: RngStream,
) -> Result<Vec<f64>> {
    match &cfg.gradient {
        GradientMethod::Cor => gradient_via_corcfd(oracle, theta, pairs, &cfg.estimator, stream),
        GradientMethod::Tra { perturbation, .. } => {
            let h = perturbation.resolve(pairs)?;
            (0..theta.len())
                .map(|i| tra_cfd(oracle, theta, i, pairs, h, stream.substream(i as u64)).map(|e| e.value))
                .collect()
        }
    }
}

/// One optimizer iteration as recorded in the trace.
#[derive(Clone, Debug, PartialEq)]
pub struct DfoIteration {
    pub k: usize,
    /// Iterate before the step.
    pub theta: Vec<f64>,
    pub gradient: Vec<f64>,
    pub step: f64,
    /// Pairs per coordinate behind `gradient`.
    pub batch: usize,
    /// Cumulative oracle calls after this iteration.
    pub evaluations: usize,
    pub line_search_evaluations: usize,
    pub f_noisy: f64,
    pub f_true: Option<f64>,
    pub armijo_gave_up: bool,
    pub pair_stored: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DfoTrace {
    pub iterations: Vec<DfoIteration>,
    pub final_theta: Vec<f64>,
    pub final_f: Option<f64>,
    /// Total oracle calls.
    pub evaluations: usize,
    /// Stopped because the gradient estimate vanished.
    pub converged: bool,
}

impl DfoTrace {
    /// `(|theta - theta*|, f(theta) - f(theta*))` when both are known.
    pub fn gaps<O: SimulationOracle + ?Sized>(&self, oracle: &O) -> Option<(f64, f64)> {
        let star = oracle.minimizer()?;
        let f_star = oracle.mean(&star)?;
        let f = oracle.mean(&self.final_theta)?;
        let sg = self
            .final_theta
            .iter()
            .zip(&star)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        Some((sg, f - f_star))
    }
}

/// Minimizes `E[Y(theta)]` from `theta0` until `2T` evaluations are spent.
///
/// Evaluations are charged as they happen, so the final count is exact; the
/// last iteration may overshoot `2T` by its line search and gradient.
pub fn corcfd_lbfgs<O: SimulationOracle + ?Sized>(
    oracle: &O,
    theta0: &[f64],
    cfg: &DfoConfig,
    stream: RngStream,
) -> Result<DfoTrace> {
    cfg.validate()?;
    let d = oracle.dim();
    if theta0.len() != d {
        return Err(invalid(format!(
            "start has dimension {} but the oracle expects {d}",
            theta0.len()
        )));
    }
    let limit = 2 * cfg.budget;
    let kk = cfg.estimator.k;
    let schedule = |t_k: usize, k: usize| match cfg.gradient {
        GradientMethod::Cor => batch_schedule(t_k, k, kk),
        GradientMethod::Tra { pairs, .. } => pairs,
    };
    let mut batch = match cfg.gradient {
        GradientMethod::Cor => cfg.initial_batch,
        GradientMethod::Tra { pairs, .. } => pairs,
    };
    if 2 * d * batch > limit {
        return Err(Error::Budget(format!(
            "the first gradient needs {} evaluations but the budget allows {limit}",
            2 * d * batch
        )));
    }
    let armijo = ArmijoParams {
        a0: cfg.a0,
        l1: cfg.l1,
        l2: cfg.l2,
        sigma: cfg.sigma,
        max_backtracks: cfg.max_backtracks,
        plus_sign: cfg.armijo_plus_sign,
    };

    let mut theta = theta0.to_vec();
    let mut g = gradient(oracle, &theta, batch, cfg, stream.substream(0))?;
    let mut memory = LbfgsMemory::new(cfg.memory);
    let mut t = 0usize;
    let mut k = 0usize;
    let mut iterations = Vec::new();
    let mut converged = false;

    while t < limit {
        if norm(&g) < cfg.grad_tol {
            converged = true;
            // the pending gradient was still paid for
            t += 2 * d * batch;
            break;
        }
        let hg = two_loop_direction(&memory, &g);
        let g_h_g = dot(&g, &hg);
        // H stays positive definite because every stored pair has s'y > 0
        debug_assert!(g_h_g > 0.0, "non-descent direction at iteration {k}");
        let direction: Vec<f64> = hg.iter().map(|v| -v).collect();
        let ls = stochastic_armijo(
            oracle,
            &theta,
            &direction,
            g_h_g,
            &armijo,
            stream.substream(TAG_LINE_SEARCH | k as u64),
        );
        if ls.gave_up {
            warn!("line search gave up at iteration {k}; taking step {:e}", ls.step);
        }
        t += ls.evaluations + 2 * d * batch;
        let next: Vec<f64> = theta.iter().zip(&direction).map(|(x, p)| x + ls.step * p).collect();
        let next_batch = schedule(batch, k);
        let mut pair_stored = false;
        let mut next_g = None;
        if t < limit {
            let g_new = gradient(oracle, &next, next_batch, cfg, stream.substream(k as u64 + 1))?;
            let s: Vec<f64> = next.iter().zip(&theta).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
            pair_stored = memory.push(s, y);
            if !pair_stored {
                debug!("iteration {k}: curvature pair rejected");
            }
            next_g = Some(g_new);
        }
        let f_true = oracle.mean(&theta);
        iterations.push(DfoIteration {
            k,
            theta: std::mem::replace(&mut theta, next),
            gradient: g.clone(),
            step: ls.step,
            batch,
            evaluations: t,
            line_search_evaluations: ls.evaluations,
            f_noisy: ls.base_value,
            f_true,
            armijo_gave_up: ls.gave_up,
            pair_stored,
        });
        match next_g {
            Some(g_new) => g = g_new,
            None => break,
        }
        batch = next_batch;
        k += 1;
    }
    let final_f = oracle.mean(&theta);
    Ok(DfoTrace {
        iterations,
        final_theta: theta,
        final_f,
        evaluations: t,
        converged,
    })
}
