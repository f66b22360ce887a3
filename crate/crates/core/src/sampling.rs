//! Random streams, perturbation coefficients and difference samples.
//!
//! Every random quantity in the crate is drawn from a [`RngStream`]: a
//! `(seed, stream id)` pair that expands to a ChaCha8 generator. Work that can
//! run in parallel (replications, pilot columns, coordinates) derives its own
//! substream, so results never depend on scheduling order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{invalid, Error, Result};
use crate::oracle::SimulationOracle;

/// Generator type behind every stream.
pub type StreamRng = ChaCha8Rng;

/// Default pilot-perturbation exponent: `h_k = c_k * n_b^gamma`.
pub const DEFAULT_GAMMA: f64 = -0.1;

/// Squared coefficients closer than this (relative) are treated as ties.
const COEFF_TIE_TOL: f64 = 1e-6;
const MAX_REDRAWS: usize = 1000;
/// Below this acceptance probability the truncated normal switches from
/// rejection to inverse-CDF sampling.
const REJECTION_MIN_ACCEPT: f64 = 0.1;
const MIN_TRUNCATED_MASS: f64 = 1e-12;

/// A reproducible random stream identified by `(seed, stream)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngStream {
    seed: u64,
    stream: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Root stream of an experiment.
    pub fn from_seed(seed: u64) -> Self {
        Self::new(seed, 0)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn id(&self) -> u64 {
        self.stream
    }

    /// Child stream keyed by `index`. Distinct indices give distinct ids.
    pub fn substream(&self, index: u64) -> Self {
        let id = splitmix64(self.stream.rotate_left(17) ^ splitmix64(index));
        Self {
            seed: self.seed,
            stream: id,
        }
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> StreamRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// Truncated normal law `psi(mu0, sigma0^2, L, U)` used to draw the pilot
/// perturbation coefficients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbationGenerator {
    pub mu0: f64,
    pub sigma0: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Default for PerturbationGenerator {
    /// `psi(0, 1, 0.1, inf)`.
    fn default() -> Self {
        Self {
            mu0: 0.0,
            sigma0: 1.0,
            lower: 0.1,
            upper: f64::INFINITY,
        }
    }
}

impl PerturbationGenerator {
    pub fn new(mu0: f64, sigma0: f64, lower: f64, upper: f64) -> Result<Self> {
        if !mu0.is_finite() || !(sigma0 > 0.0) || !sigma0.is_finite() {
            return Err(invalid(format!(
                "truncated normal needs finite mu0 and sigma0 > 0 (got {mu0}, {sigma0})"
            )));
        }
        if !(lower > 0.0) || !(lower < upper) || lower.is_infinite() {
            return Err(invalid(format!(
                "truncation bounds must satisfy 0 < L < U (got L={lower}, U={upper})"
            )));
        }
        Ok(Self {
            mu0,
            sigma0,
            lower,
            upper,
        })
    }

    fn standardized(&self) -> (f64, f64) {
        (
            (self.lower - self.mu0) / self.sigma0,
            (self.upper - self.mu0) / self.sigma0,
        )
    }

    /// Probability mass of `[L, U]` under the untruncated normal.
    pub fn mass(&self) -> f64 {
        let (a, b) = self.standardized();
        if a > 0.0 {
            // upper tail: difference of survival functions keeps precision
            norm_cdf(-a) - norm_cdf(-b)
        } else {
            norm_cdf(b) - norm_cdf(a)
        }
    }

    /// Draws one coefficient. See [`truncated_normal`].
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        truncated_normal(self, rng)
    }
}

pub(crate) fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn norm_inv_cdf(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// Draw from `Normal(mu0, sigma0^2)` conditioned on `[L, U]`.
///
/// Plain rejection while the acceptance probability is at least 0.1, inverse
/// CDF on the truncated interval otherwise, so the expected work is bounded.
pub fn truncated_normal<R: Rng + ?Sized>(gen: &PerturbationGenerator, rng: &mut R) -> Result<f64> {
    let mass = gen.mass();
    if !(mass > MIN_TRUNCATED_MASS) {
        return Err(Error::DegenerateTruncation { mass });
    }
    if mass >= REJECTION_MIN_ACCEPT {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            let x = gen.mu0 + gen.sigma0 * z;
            if x >= gen.lower && x <= gen.upper {
                return Ok(x);
            }
        }
    }
    let (a, b) = gen.standardized();
    let u: f64 = rng.random();
    let z = if a > 0.0 {
        // sample the mirrored interval [-b, -a] where the CDF is small
        let (lo, hi) = (norm_cdf(-b), norm_cdf(-a));
        -norm_inv_cdf(lo + u * (hi - lo))
    } else {
        let (lo, hi) = (norm_cdf(a), norm_cdf(b));
        norm_inv_cdf(lo + u * (hi - lo))
    };
    Ok((gen.mu0 + gen.sigma0 * z.clamp(a, b)).clamp(gen.lower, gen.upper))
}

/// Pilot perturbations `h_k = c_k * n_b^gamma`.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationSet {
    pub coefficients: Vec<f64>,
    pub pilot_size: usize,
    pub exponent: f64,
    pub perturbations: Vec<f64>,
}

impl PerturbationSet {
    /// Builds a set from fixed coefficients (used when `c` is a design choice
    /// rather than a draw).
    pub fn from_coefficients(coefficients: Vec<f64>, pilot_size: usize, exponent: f64) -> Result<Self> {
        if coefficients.len() < 2 {
            return Err(invalid("at least two perturbation coefficients are required"));
        }
        if pilot_size < 2 {
            return Err(invalid("pilot size n_b must be at least 2"));
        }
        if coefficients.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(invalid("perturbation coefficients must be finite and positive"));
        }
        for (i, ci) in coefficients.iter().enumerate() {
            if coefficients[..i].iter().any(|cj| squares_tie(*ci, *cj)) {
                return Err(invalid(format!("coefficient {ci} duplicates an earlier one")));
            }
        }
        let scale = (pilot_size as f64).powf(exponent);
        let perturbations = coefficients.iter().map(|c| c * scale).collect();
        Ok(Self {
            coefficients,
            pilot_size,
            exponent,
            perturbations,
        })
    }

    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }
}

fn squares_tie(a: f64, b: f64) -> bool {
    let (a2, b2) = (a * a, b * b);
    (a2 - b2).abs() <= COEFF_TIE_TOL * a2.max(b2)
}

/// Draws `k` i.i.d. coefficients from `gen`, redrawing any whose square ties
/// with an earlier one, and scales them by `pilot_size^exponent`.
pub fn draw_perturbation_set<R: Rng + ?Sized>(
    k: usize,
    pilot_size: usize,
    exponent: f64,
    gen: &PerturbationGenerator,
    rng: &mut R,
) -> Result<PerturbationSet> {
    if k < 2 {
        return Err(invalid(format!("K must be at least 2 (got {k})")));
    }
    if pilot_size < 2 {
        return Err(invalid(format!("pilot size n_b must be at least 2 (got {pilot_size})")));
    }
    let mut coefficients: Vec<f64> = Vec::with_capacity(k);
    for index in 0..k {
        let mut attempts = 0;
        loop {
            let c = gen.sample(rng)?;
            if !coefficients.iter().any(|&prev| squares_tie(c, prev)) {
                coefficients.push(c);
                break;
            }
            attempts += 1;
            if attempts >= MAX_REDRAWS {
                return Err(Error::CoefficientRedrawLimit { index, attempts });
            }
        }
    }
    PerturbationSet::from_coefficients(coefficients, pilot_size, exponent)
}

/// Reusable central-difference sampler along one coordinate.
///
/// Keeps two scratch points so that drawing a pair does not allocate.
pub struct DifferenceSampler<'a, O: SimulationOracle + ?Sized> {
    oracle: &'a O,
    coord: usize,
    base: f64,
    plus: Vec<f64>,
    minus: Vec<f64>,
}

impl<'a, O: SimulationOracle + ?Sized> DifferenceSampler<'a, O> {
    pub fn new(oracle: &'a O, theta0: &[f64], coord: usize) -> Result<Self> {
        if theta0.len() != oracle.dim() {
            return Err(invalid(format!(
                "point has dimension {} but oracle `{}` expects {}",
                theta0.len(),
                oracle.label(),
                oracle.dim()
            )));
        }
        if coord >= theta0.len() {
            return Err(invalid(format!("coordinate {coord} out of range")));
        }
        Ok(Self {
            oracle,
            coord,
            base: theta0[coord],
            plus: theta0.to_vec(),
            minus: theta0.to_vec(),
        })
    }

    /// One difference quotient `(Y(theta0 + h e) - Y(theta0 - h e)) / (2h)`;
    /// consumes exactly one sample pair.
    pub fn draw(&mut self, h: f64, rng: &mut StreamRng) -> f64 {
        self.plus[self.coord] = self.base + h;
        self.minus[self.coord] = self.base - h;
        let up = self.oracle.sample(&self.plus, rng);
        let down = self.oracle.sample(&self.minus, rng);
        (up - down) / (2.0 * h)
    }

    /// Appends `count` difference quotients at `h` to `out`.
    pub fn fill(&mut self, h: f64, count: usize, rng: &mut StreamRng, out: &mut Vec<f64>) {
        out.reserve(count);
        for _ in 0..count {
            out.push(self.draw(h, rng));
        }
    }
}

/// Single central-difference sample at perturbation `h`.
pub fn difference_sample<O: SimulationOracle + ?Sized>(
    oracle: &O,
    theta0: &[f64],
    coord: usize,
    h: f64,
    rng: &mut StreamRng,
) -> Result<f64> {
    check_perturbation(h)?;
    Ok(DifferenceSampler::new(oracle, theta0, coord)?.draw(h, rng))
}

pub(crate) fn check_perturbation(h: f64) -> Result<()> {
    if h == 0.0 || !h.is_finite() {
        return Err(invalid(format!("perturbation must be finite and nonzero (got {h})")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_reproduce_and_differ() {
        let s = RngStream::new(7, 3);
        let a: Vec<u64> = (0..8)
            .map({
                let mut r = s.rng();
                move |_| r.random()
            })
            .collect();
        let b: Vec<u64> = (0..8)
            .map({
                let mut r = s.rng();
                move |_| r.random()
            })
            .collect();
        assert_eq!(a, b);
        let c: u64 = s.substream(1).rng().random();
        let d: u64 = s.substream(2).rng().random();
        assert_ne!(c, d);
        assert_ne!(s.substream(1), s.substream(2));
    }

    #[test]
    fn one_sided_truncation_respects_bound() {
        let gen = PerturbationGenerator::default();
        let mut rng = RngStream::from_seed(1).rng();
        for _ in 0..10_000 {
            assert!(gen.sample(&mut rng).unwrap() >= 0.1);
        }
    }

    #[test]
    fn symmetric_truncation_mean() {
        let gen = PerturbationGenerator::new(5.0, 1.0, 4.0, 6.0).unwrap();
        let mut rng = RngStream::from_seed(2).rng();
        let n = 1_000_000;
        let mean = (0..n).map(|_| gen.sample(&mut rng).unwrap()).sum::<f64>() / n as f64;
        assert!((mean - 5.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn inverse_cdf_branch_stays_in_range() {
        // mass ~ 3e-5 forces the inverse-CDF path
        let gen = PerturbationGenerator::new(0.0, 1.0, 4.0, 5.0).unwrap();
        assert!(gen.mass() < REJECTION_MIN_ACCEPT);
        let mut rng = RngStream::from_seed(3).rng();
        let draws: Vec<f64> = (0..10_000).map(|_| gen.sample(&mut rng).unwrap()).collect();
        assert!(draws.iter().all(|x| (4.0..=5.0).contains(x)));
        // conditional mean of N(0,1) on [4,5]
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 4.216_831).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn degenerate_region_is_an_error() {
        let gen = PerturbationGenerator::new(0.0, 1.0, 40.0, 41.0).unwrap();
        let mut rng = RngStream::from_seed(4).rng();
        assert!(matches!(gen.sample(&mut rng), Err(Error::DegenerateTruncation { .. })));
    }

    #[test]
    fn generator_rejects_bad_bounds() {
        assert!(PerturbationGenerator::new(0.0, 1.0, 0.0, 1.0).is_err());
        assert!(PerturbationGenerator::new(0.0, 1.0, 2.0, 1.0).is_err());
        assert!(PerturbationGenerator::new(0.0, 0.0, 0.1, 1.0).is_err());
    }

    #[test]
    fn perturbation_set_scales_and_is_distinct() {
        let gen = PerturbationGenerator::default();
        let mut rng = RngStream::from_seed(5).rng();
        let set = draw_perturbation_set(10, 100, DEFAULT_GAMMA, &gen, &mut rng).unwrap();
        let scale = 10f64.powf(-0.2);
        assert!((scale - 0.630_957_344_480_193).abs() < 1e-12);
        for (c, h) in set.coefficients.iter().zip(&set.perturbations) {
            assert!(*c >= 0.1);
            assert!((h - c * scale).abs() < 1e-12);
        }
        for i in 0..10 {
            for j in 0..i {
                assert!(!squares_tie(set.coefficients[i], set.coefficients[j]));
            }
        }
        let mut rng2 = RngStream::from_seed(5).rng();
        let again = draw_perturbation_set(10, 100, DEFAULT_GAMMA, &gen, &mut rng2).unwrap();
        assert_eq!(set, again);
    }

    #[test]
    fn perturbation_set_needs_two_columns() {
        let gen = PerturbationGenerator::default();
        let mut rng = RngStream::from_seed(6).rng();
        assert!(draw_perturbation_set(1, 100, DEFAULT_GAMMA, &gen, &mut rng).is_err());
        assert!(draw_perturbation_set(3, 1, DEFAULT_GAMMA, &gen, &mut rng).is_err());
        assert!(PerturbationSet::from_coefficients(vec![1.0, 1.0], 10, -0.1).is_err());
    }

    #[test]
    fn near_point_mass_generator_exhausts_redraws() {
        // every draw lands within 1e-6 relative of the first one
        let gen = PerturbationGenerator::new(1.0, 1e-3, 1.0, 1.0 + 1e-9).unwrap();
        let mut rng = RngStream::from_seed(8).rng();
        let err = draw_perturbation_set(3, 10, DEFAULT_GAMMA, &gen, &mut rng).unwrap_err();
        assert!(matches!(err, Error::CoefficientRedrawLimit { index: 1, .. }));
    }
}
