#![allow(dead_code)]

use corfd::oracle::SimulationOracle;
use corfd::sampling::StreamRng;
use rand::Rng;
use rand_distr::StandardNormal;

/// `f(theta)` plus optional `N(0, sd^2)` noise, for tests.
pub struct FnOracle<F: Fn(&[f64]) -> f64 + Send + Sync> {
    pub dim: usize,
    pub f: F,
    pub sd: f64,
}

impl<F: Fn(&[f64]) -> f64 + Send + Sync> SimulationOracle for FnOracle<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn label(&self) -> String {
        "test".into()
    }

    fn sample(&self, theta: &[f64], rng: &mut StreamRng) -> f64 {
        let noise = if self.sd > 0.0 {
            self.sd * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        (self.f)(theta) + noise
    }

    fn mean(&self, theta: &[f64]) -> Option<f64> {
        Some((self.f)(theta))
    }

    fn minimizer(&self) -> Option<Vec<f64>> {
        None
    }
}

pub fn noise_free<F: Fn(&[f64]) -> f64 + Send + Sync>(dim: usize, f: F) -> FnOracle<F> {
    FnOracle { dim, f, sd: 0.0 }
}

pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}
