mod common;

use common::mean_var;
use corfd::oracle::{
    lr_derivative_oracle, poly_oracle, queue_oracle, sin_oracle, NoiseModel, PolyOracle, QueueMetric, QueueParameter,
    QueueSpec, SimulationOracle,
};
use corfd::sampling::RngStream;
use proptest::prelude::*;

fn draws<O: SimulationOracle>(o: &O, theta: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = RngStream::from_seed(seed).rng();
    (0..n).map(|_| o.sample(&[theta], &mut rng)).collect()
}

#[test]
fn sine_moments() {
    let o = sin_oracle(10.0, NoiseModel::Homoscedastic).unwrap();
    let (m, _) = mean_var(&draws(&o, 0.0, 1_000_000, 1));
    assert!(m.abs() < 3e-3, "{m}");
    for theta in [-1.0, 0.0, 0.7, 2.0] {
        let (_, v) = mean_var(&draws(&o, theta, 100_000, 2));
        assert!((0.97..=1.03).contains(&v), "variance {v} at {theta}");
    }
    let o2 = sin_oracle(10.0, NoiseModel::Heteroscedastic).unwrap();
    let (_, v) = mean_var(&draws(&o2, 0.0, 100_000, 3));
    assert!((0.97..=1.03).contains(&v));
    let (_, v) = mean_var(&draws(&o2, 0.5, 100_000, 4));
    assert!((v / (-1.5f64).exp() - 1.0).abs() < 0.03);
}

#[test]
fn sine_draws_are_reproducible() {
    let o = sin_oracle(10.0, NoiseModel::Homoscedastic).unwrap();
    assert_eq!(draws(&o, 0.3, 10, 9), draws(&o, 0.3, 10, 9));
    assert_ne!(draws(&o, 0.3, 10, 9), draws(&o, 0.3, 10, 10));
}

#[test]
fn queue_lr_matches_published_derivatives() {
    let cases = [((4.0, 4.0), -0.2501), ((3.0, 5.0), -0.1136)];
    for (i, ((lam, mu), target)) in cases.into_iter().enumerate() {
        let spec = QueueSpec::new(lam, mu, 10).unwrap();
        let e = lr_derivative_oracle(
            spec,
            QueueParameter::Service,
            QueueMetric::Sojourn,
            400_000,
            RngStream::from_seed(i as u64),
        )
        .unwrap();
        assert!((e.value - target).abs() < 0.01, "{} vs {target}", e.value);
    }
}

#[test]
fn lr_agrees_with_finite_differences_of_the_simulation() {
    // LR estimates the derivative of the same functional the oracle simulates
    let spec = QueueSpec::new(3.0, 5.0, 5).unwrap();
    for (param, metric, at) in [
        (QueueParameter::Arrival, QueueMetric::Waiting, 3.0),
        (QueueParameter::Service, QueueMetric::Waiting, 5.0),
    ] {
        let lr = lr_derivative_oracle(spec, param, metric, 400_000, RngStream::from_seed(21)).unwrap();
        let o = queue_oracle(spec, param, metric).unwrap();
        let h = 0.25;
        let n = 400_000;
        let up = mean_var(&draws(&o, at + h, n, 22)).0;
        let down = mean_var(&draws(&o, at - h, n, 23)).0;
        let fd = (up - down) / (2.0 * h);
        assert!(
            (fd - lr.value).abs() < 0.02,
            "{param} {metric}: fd {fd} lr {}",
            lr.value
        );
    }
}

#[test]
fn queue_waits_are_nonnegative_and_grow_with_arrivals() {
    let spec = QueueSpec::new(3.0, 4.0, 10).unwrap();
    let o = queue_oracle(spec, QueueParameter::Arrival, QueueMetric::Waiting).unwrap();
    let n = 100_000;
    // same seed at both rates: paired paths
    let slow = draws(&o, 3.0, n, 31);
    let fast = draws(&o, 4.0, n, 31);
    assert!(slow.iter().chain(&fast).all(|w| *w >= 0.0));
    let diffs: Vec<f64> = fast.iter().zip(&slow).map(|(a, b)| a - b).collect();
    let (m, v) = mean_var(&diffs);
    assert!(m > 3.0 * (v / n as f64).sqrt(), "mean difference {m}");
}

#[test]
fn queue_nonpositive_rate_is_nan() {
    let o = queue_oracle(
        QueueSpec::new(3.0, 4.0, 10).unwrap(),
        QueueParameter::Service,
        QueueMetric::Sojourn,
    )
    .unwrap();
    assert!(o.sample(&[0.0], &mut RngStream::from_seed(1).rng()).is_nan());
}

proptest! {
    #[test]
    fn poly_surrogate_is_exact_expansion(theta in -3.0f64..3.0, h in 0.01f64..1.5) {
        let o = poly_oracle();
        let t = o.ground_truth(&[theta], 0);
        let q = (PolyOracle::value(theta + h) - PolyOracle::value(theta - h)) / (2.0 * h);
        let expansion = t.deriv.unwrap() + t.bias_const.unwrap() * h * h + t.fifth_const.unwrap() * h.powi(4);
        prop_assert!((q - expansion).abs() <= 1e-12 * (1.0 + expansion.abs()) / h.min(1.0));
    }

    #[test]
    fn sine_truth_is_consistent(kappa in 0.5f64..20.0, theta in -3.0f64..3.0) {
        let o = sin_oracle(kappa, NoiseModel::Heteroscedastic).unwrap();
        let t = o.ground_truth(&[theta], 0);
        prop_assert!((t.bias_const.unwrap() + t.deriv.unwrap() / 6.0).abs() < 1e-12 * kappa);
        prop_assert!((t.noise_var.unwrap() - (-3.0 * theta).exp()).abs() < 1e-12 * t.noise_var.unwrap());
        prop_assert!(t.noise_var.unwrap() > 0.0);
    }
}
