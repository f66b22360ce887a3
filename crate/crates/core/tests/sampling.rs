mod common;

use common::{mean_var, noise_free};
use corfd::oracle::{poly_oracle, sin_oracle, NoiseModel, SimulationOracle};
use corfd::sampling::{
    difference_sample, draw_perturbation_set, truncated_normal, DifferenceSampler, PerturbationGenerator, RngStream,
};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn one_sided_generator_mean() {
    let gen = PerturbationGenerator::default();
    let mut rng = RngStream::from_seed(11).rng();
    let n = 1_000_000;
    let xs: Vec<f64> = (0..n).map(|_| truncated_normal(&gen, &mut rng).unwrap()).collect();
    assert!(xs.iter().all(|x| *x >= 0.1));
    let (m, v) = mean_var(&xs);
    // phi(0.1) / (1 - Phi(0.1))
    assert!((m - 0.862_6).abs() < 4.0 * (v / n as f64).sqrt() + 1e-4, "mean {m}");
}

#[test]
fn set_draws_are_reproducible() {
    let gen = PerturbationGenerator::default();
    let a = draw_perturbation_set(10, 100, -0.1, &gen, &mut RngStream::new(3, 4).rng()).unwrap();
    let b = draw_perturbation_set(10, 100, -0.1, &gen, &mut RngStream::new(3, 4).rng()).unwrap();
    assert_eq!(a, b);
    for (c, h) in a.coefficients.iter().zip(&a.perturbations) {
        assert!(*c >= 0.1);
        assert!((h / c - 0.630_957_344_480_193).abs() < 1e-12);
    }
}

#[test]
fn difference_sample_examples() {
    let cube = noise_free(1, |t: &[f64]| t[0].powi(3));
    let mut rng = RngStream::from_seed(1).rng();
    assert!((difference_sample(&cube, &[0.0], 0, 0.5, &mut rng).unwrap() - 0.25).abs() < 1e-15);
    assert!(difference_sample(&cube, &[0.0], 0, 0.0, &mut rng).is_err());

    let poly = noise_free(1, |t: &[f64]| corfd::oracle::PolyOracle::value(t[0]));
    let q = difference_sample(&poly, &[0.0], 0, 0.2, &mut rng).unwrap();
    assert!((q + 6.099_84).abs() < 1e-12, "{q}");
}

#[test]
fn sine_difference_mean_and_variance() {
    let o = sin_oracle(10.0, NoiseModel::Homoscedastic).unwrap();
    let mut sampler = DifferenceSampler::new(&o, &[0.0], 0).unwrap();
    let mut rng = RngStream::from_seed(2).rng();
    let n = 100_000;
    let mut xs = Vec::new();
    sampler.fill(0.1, n, &mut rng, &mut xs);
    let (m, v) = mean_var(&xs);
    let target = 10.0 * 0.1f64.sin() / 0.1;
    assert!((m - target).abs() < 4.0 * (v / n as f64).sqrt());
    assert!((m - 9.983_34).abs() < 0.05);
    // 1 / (2 h^2)
    assert!((v / 50.0 - 1.0).abs() < 0.05, "variance {v}");

    let mut half = Vec::new();
    sampler.fill(0.05, n, &mut rng, &mut half);
    let ratio = mean_var(&half).1 / v;
    assert!((ratio / 4.0 - 1.0).abs() < 0.1, "ratio {ratio}");
}

#[test]
fn poly_difference_is_unbiased_for_surrogate() {
    let o = poly_oracle();
    let h = 0.3;
    let mut rng = RngStream::from_seed(5).rng();
    let xs: Vec<f64> = (0..100_000)
        .map(|_| difference_sample(&o, &[2.0], 0, h, &mut rng).unwrap())
        .collect();
    let (m, v) = mean_var(&xs);
    let surrogate = (o.mean(&[2.0 + h]).unwrap() - o.mean(&[2.0 - h]).unwrap()) / (2.0 * h);
    assert!((m - surrogate).abs() < 4.0 * (v / xs.len() as f64).sqrt());
}

#[test]
fn sampler_rejects_bad_points() {
    let o = poly_oracle();
    assert!(DifferenceSampler::new(&o, &[0.0, 1.0], 0).is_err());
    assert!(DifferenceSampler::new(&o, &[0.0], 1).is_err());
}

proptest! {
    #[test]
    fn streams_reproduce(seed in any::<u64>(), id in any::<u64>()) {
        let s = RngStream::new(seed, id);
        let a: Vec<u64> = (0..4).map({ let mut r = s.rng(); move |_| r.random() }).collect();
        let b: Vec<u64> = (0..4).map({ let mut r = s.rng(); move |_| r.random() }).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn substreams_differ(seed in any::<u64>(), i in 0u64..1000, j in 0u64..1000) {
        prop_assume!(i != j);
        let s = RngStream::from_seed(seed);
        let a: u64 = s.substream(i).rng().random();
        let b: u64 = s.substream(j).rng().random();
        prop_assert_ne!(a, b);
    }

    #[test]
    fn truncated_draws_respect_bounds(
        mu in -3.0f64..3.0,
        sd in 0.1f64..3.0,
        lower in 0.01f64..4.0,
        width in 0.01f64..4.0,
        seed in any::<u64>(),
    ) {
        let gen = PerturbationGenerator::new(mu, sd, lower, lower + width).unwrap();
        let mut rng = RngStream::from_seed(seed).rng();
        match truncated_normal(&gen, &mut rng) {
            Ok(x) => prop_assert!(x >= lower && x <= lower + width),
            Err(corfd::Error::DegenerateTruncation { mass }) => prop_assert!(mass < 1e-6),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        }
    }

    #[test]
    fn sets_have_distinct_squares(k in 2usize..30, n_b in 2usize..1000, seed in any::<u64>()) {
        let gen = PerturbationGenerator::default();
        let set = draw_perturbation_set(k, n_b, -0.1, &gen, &mut RngStream::from_seed(seed).rng()).unwrap();
        prop_assert_eq!(set.len(), k);
        let scale = (n_b as f64).powf(-0.1);
        for i in 0..k {
            prop_assert!((set.perturbations[i] - set.coefficients[i] * scale).abs() < 1e-12);
            for j in 0..i {
                let (a, b) = (set.coefficients[i].powi(2), set.coefficients[j].powi(2));
                prop_assert!((a - b).abs() > 1e-6 * a.max(b));
            }
        }
    }
}
