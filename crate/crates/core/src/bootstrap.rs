//! Bootstrap mean and variance of the CFD estimator at one perturbation.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::sampling::StreamRng;

/// Difference samples drawn at a single perturbation `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct PilotColumn {
    pub h: f64,
    pub samples: Vec<f64>,
}

impl PilotColumn {
    pub fn new(h: f64, samples: Vec<f64>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(invalid(format!(
                "a pilot column needs at least 2 samples (got {})",
                samples.len()
            )));
        }
        Ok(Self { h, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    /// Unbiased sample variance (denominator `n_b - 1`).
    pub fn sample_variance(&self) -> f64 {
        let m = self.sample_mean();
        let ss: f64 = self.samples.iter().map(|x| (x - m) * (x - m)).sum();
        ss / (self.samples.len() - 1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BootstrapMoments {
    pub mean: f64,
    /// Always `>= 0`.
    pub variance: f64,
    /// Number of resamples; `0` for the closed form.
    pub replicates: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BootstrapMode {
    /// Resample `replicates` times with replacement.
    MonteCarlo { replicates: usize },
    /// Closed-form limit as the number of resamples grows.
    Exact,
}

impl Default for BootstrapMode {
    fn default() -> Self {
        BootstrapMode::MonteCarlo { replicates: 1000 }
    }
}

/// Average and population variance (denominator `I`) of `I` bootstrap means.
pub fn bootstrap_moments_mc(column: &PilotColumn, replicates: usize, rng: &mut StreamRng) -> Result<BootstrapMoments> {
    if column.len() < 2 {
        return Err(invalid("bootstrap needs at least 2 samples"));
    }
    if replicates < 2 {
        return Err(invalid(format!(
            "bootstrap needs at least 2 replicates (got {replicates})"
        )));
    }
    let n = column.len();
    let xs = &column.samples;
    let mut means = Vec::with_capacity(replicates);
    for _ in 0..replicates {
        let mut s = 0.0;
        for _ in 0..n {
            s += xs[rng.random_range(0..n)];
        }
        means.push(s / n as f64);
    }
    let mean = means.iter().sum::<f64>() / replicates as f64;
    let variance = means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / replicates as f64;
    Ok(BootstrapMoments {
        mean,
        variance,
        replicates,
    })
}

/// Sample mean and `(n_b - 1) S^2 / n_b^2`, the exact bootstrap moments.
pub fn bootstrap_moments_exact(column: &PilotColumn) -> Result<BootstrapMoments> {
    let n = column.len();
    if n < 2 {
        return Err(invalid("bootstrap needs at least 2 samples"));
    }
    let nf = n as f64;
    Ok(BootstrapMoments {
        mean: column.sample_mean(),
        variance: (nf - 1.0) * column.sample_variance() / (nf * nf),
        replicates: 0,
    })
}

pub fn bootstrap_moments(column: &PilotColumn, mode: BootstrapMode, rng: &mut StreamRng) -> Result<BootstrapMoments> {
    match mode {
        BootstrapMode::MonteCarlo { replicates } => bootstrap_moments_mc(column, replicates, rng),
        BootstrapMode::Exact => bootstrap_moments_exact(column),
    }
}
