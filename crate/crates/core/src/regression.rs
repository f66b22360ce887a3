//! Regressions that recover `(alpha', B)` and `sigma^2` from bootstrap
//! moments, the clamp on `B`, and closed-form constants of the design.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};

/// Largest condition number accepted for a regression design.
pub const MAX_CONDITION: f64 = 1e12;

/// Fit of `mean_k ~ alpha' + B h_k^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasFit {
    pub intercept: f64,
    pub slope: f64,
    /// Unweighted residuals `mean_k - intercept - slope h_k^2`.
    pub residuals: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarFit {
    pub sigma2: f64,
}

fn check_bias_inputs(h: &[f64], means: &[f64], sds: &[f64]) -> Result<()> {
    if h.len() < 2 {
        return Err(invalid(format!("bias regression needs K >= 2 (got {})", h.len())));
    }
    if means.len() != h.len() || sds.len() != h.len() {
        return Err(invalid("h, means and sds must have the same length"));
    }
    if let Some(s) = sds.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(invalid(format!(
            "weights need positive finite standard deviations (got {s})"
        )));
    }
    Ok(())
}

/// Minimizes `sum_k ((mean_k - a - b h_k^2) / sd_k)^2` by SVD.
pub fn fit_bias_wls(h: &[f64], means: &[f64], sds: &[f64]) -> Result<BiasFit> {
    check_bias_inputs(h, means, sds)?;
    let k = h.len();
    let x = DMatrix::from_fn(k, 2, |i, j| if j == 0 { 1.0 / sds[i] } else { h[i] * h[i] / sds[i] });
    let y = DVector::from_fn(k, |i, _| means[i] / sds[i]);
    let svd = x.svd(true, true);
    let sv = &svd.singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::SingularDesign { condition });
    }
    let beta = svd
        .solve(&y, 0.0)
        .map_err(|e| invalid(format!("least-squares solve failed: {e}")))?;
    let (intercept, slope) = (beta[0], beta[1]);
    let residuals = h
        .iter()
        .zip(means)
        .map(|(hk, m)| m - intercept - slope * hk * hk)
        .collect();
    Ok(BiasFit {
        intercept,
        slope,
        residuals,
    })
}

/// Unweighted fit; the form analyzed by the asymptotic constants.
pub fn fit_bias_ols(h: &[f64], means: &[f64]) -> Result<BiasFit> {
    fit_bias_wls(h, means, &vec![1.0; h.len()])
}

fn check_var_inputs(h: &[f64], s2: &[f64], n_b: usize) -> Result<()> {
    if h.is_empty() || h.len() != s2.len() {
        return Err(invalid("variance regression needs K >= 1 matching h and s2"));
    }
    if n_b < 2 {
        return Err(invalid(format!("pilot size must be at least 2 (got {n_b})")));
    }
    if h.iter().any(|v| *v == 0.0 || !v.is_finite()) {
        return Err(invalid("perturbations must be finite and nonzero"));
    }
    Ok(())
}

/// `sigma^2 = (2 n_b^2 / (n_b - 1)) mean_k(h_k^2 s2_k)`: the regression of
/// `h_k^2 s2_k` on the constant `(n_b - 1) / (2 n_b^2)`.
pub fn fit_var_wls(h: &[f64], s2: &[f64], n_b: usize) -> Result<VarFit> {
    check_var_inputs(h, s2, n_b)?;
    let nb = n_b as f64;
    let mean_hs: f64 = h.iter().zip(s2).map(|(hk, s)| hk * hk * s).sum::<f64>() / h.len() as f64;
    Ok(VarFit {
        sigma2: 2.0 * nb * nb / (nb - 1.0) * mean_hs,
    })
}

/// Regression through the origin of `s2_k` on `(n_b - 1) / (2 n_b^2 h_k^2)`.
pub fn fit_var_ols(h: &[f64], s2: &[f64], n_b: usize) -> Result<VarFit> {
    check_var_inputs(h, s2, n_b)?;
    let nb = n_b as f64;
    let scale = (nb - 1.0) / (2.0 * nb * nb);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (hk, s) in h.iter().zip(s2) {
        let x = scale / (hk * hk);
        sxy += x * s;
        sxx += x * x;
    }
    Ok(VarFit { sigma2: sxy / sxx })
}

/// `sign(b) (eps + max(|b| - eps, 0))` with `sign(0) = +1`; `|result| >= eps`.
pub fn clamp_bias_constant(b: f64, eps: f64) -> f64 {
    debug_assert!(eps > 0.0);
    let sign = if b < 0.0 { -1.0 } else { 1.0 };
    sign * (eps + (b.abs() - eps).max(0.0))
}

/// Default clamp threshold `1e-4 max(1, |alpha'|)`.
pub fn default_clamp_eps(alpha: f64) -> f64 {
    1e-4 * alpha.abs().max(1.0)
}

/// Residual projection of the design `(1, c^2)` and the sign statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionDiagnostics {
    pub projection: DMatrix<f64>,
    /// `c' P c^4`
    pub lambda: f64,
    /// `|| Diag(1/c) P c ||^2`
    pub q: f64,
}

fn abs_coefficients(c: &[f64]) -> Result<Vec<f64>> {
    if c.len() < 2 {
        return Err(invalid(format!("design needs K >= 2 coefficients (got {})", c.len())));
    }
    if c.iter().any(|v| *v == 0.0 || !v.is_finite()) {
        return Err(invalid("coefficients must be finite and nonzero"));
    }
    Ok(c.iter().map(|v| v.abs()).collect())
}

/// `K sum c^4 - (sum c^2)^2`, guarded against collinear designs.
fn design_denominator(c: &[f64]) -> Result<f64> {
    let k = c.len() as f64;
    let s2: f64 = c.iter().map(|v| v.powi(2)).sum();
    let s4: f64 = c.iter().map(|v| v.powi(4)).sum();
    let den = k * s4 - s2 * s2;
    if !(den > k * s4 / MAX_CONDITION) {
        return Err(Error::SingularDesign {
            condition: if den > 0.0 { k * s4 / den } else { f64::INFINITY },
        });
    }
    Ok(den)
}

/// `I - X (X'X)^-1 X'` for `X = [1, c^2]`.
pub fn residual_projection(c: &[f64]) -> Result<DMatrix<f64>> {
    let c = abs_coefficients(c)?;
    let den = design_denominator(&c)?;
    let k = c.len();
    let s2: f64 = c.iter().map(|v| v * v).sum();
    let s4: f64 = c.iter().map(|v| v.powi(4)).sum();
    // (X'X)^-1 = [[s4, -s2], [-s2, K]] / den
    let kf = k as f64;
    Ok(DMatrix::from_fn(k, k, |i, j| {
        let (a, b) = (c[i] * c[i], c[j] * c[j]);
        let hat = (s4 - s2 * (a + b) + kf * a * b) / den;
        if i == j {
            1.0 - hat
        } else {
            -hat
        }
    }))
}

pub fn projection_and_lambda(c: &[f64]) -> Result<ProjectionDiagnostics> {
    let projection = residual_projection(c)?;
    let c = abs_coefficients(c)?;
    let cv = DVector::from_vec(c.clone());
    let c4 = cv.map(|v| v.powi(4));
    let pc = &projection * &cv;
    let lambda = pc.dot(&c4);
    let q = pc.iter().zip(&c).map(|(p, ck)| (p / ck).powi(2)).sum();
    Ok(ProjectionDiagnostics { projection, lambda, q })
}

/// `|| (I - P) v || / || v ||`: cosine of the angle between `v` and the span
/// of `(1, c^2)`.
pub fn cos_to_design_space(c: &[f64], v: &[f64]) -> Result<f64> {
    if v.len() != c.len() {
        return Err(invalid("vector length must match K"));
    }
    let p = residual_projection(c)?;
    let v = DVector::from_column_slice(v);
    let norm = v.norm();
    if norm == 0.0 {
        return Err(invalid("zero vector has no direction"));
    }
    Ok((&v - &p * &v).norm() / norm)
}

/// Asymptotic bias and variance constants of the estimators of `B`,
/// `alpha'` and `sigma^2` for perturbations `h_k = c_k n_b^gamma`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TheoryConstants {
    /// Bias constant of the slope estimator.
    pub h_k: f64,
    /// Variance constant of the slope estimator.
    pub v_k: f64,
    /// Bias constant of the intercept estimator.
    pub h_tilde: f64,
    /// Variance constant of the intercept estimator.
    pub v_tilde: f64,
    /// Bias constant of the variance estimator.
    pub h_hat: f64,
    /// Variance constant of the variance estimator.
    pub v_hat: f64,
}

pub fn theory_constants(c: &[f64], d: f64, sigma_prime: f64) -> Result<TheoryConstants> {
    let c = abs_coefficients(c)?;
    let den = design_denominator(&c)?;
    let k = c.len() as f64;
    let pw = |p: i32| c.iter().map(|v| v.powi(p)).sum::<f64>();
    let (s2, s4, s6, si2, si4, si8) = (pw(2), pw(4), pw(6), pw(-2), pw(-4), pw(-8));
    let den2 = den * den;
    Ok(TheoryConstants {
        h_k: d * (k * s6 - s2 * s4) / den,
        v_k: (-k * k * s2 + s2 * s2 * si2) / den2,
        h_tilde: d * (s4 * s4 - s2 * s6) / den,
        v_tilde: (s2.powi(3) - 2.0 * k * s4 * s2 + s4 * s4 * si2) / den2,
        h_hat: sigma_prime * sigma_prime * si2 / si4,
        v_hat: si8 / (si4 * si4),
    })
}

/// Leading variance of the variance estimator given the fourth-moment limit
/// `nu4` of the scaled difference noise.
pub fn sigma2_estimator_variance(v_hat: f64, sigma2: f64, nu4: f64, n_b: usize) -> f64 {
    let nb = n_b as f64;
    v_hat * (4.0 * nu4 * (nb - 1.0) - sigma2 * sigma2 * (nb - 3.0)) / (nb * (nb - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_system() {
        let f = fit_bias_wls(&[0.1, 0.2], &[2.03, 2.12], &[1.0, 1.0]).unwrap();
        assert!((f.intercept - 2.0).abs() < 1e-12);
        assert!((f.slope - 3.0).abs() < 1e-10);
        assert!(f.residuals.iter().all(|r| r.abs() < 1e-12));
    }

    #[test]
    fn exact_linear_model_any_weights() {
        let h = [0.3, 0.5, 0.9, 1.4];
        let m: Vec<f64> = h.iter().map(|x| 2.0 + 3.0 * x * x).collect();
        let f = fit_bias_wls(&h, &m, &[0.1, 2.0, 0.7, 5.0]).unwrap();
        assert!((f.intercept - 2.0).abs() < 1e-10 && (f.slope - 3.0).abs() < 1e-10);
    }

    #[test]
    fn tied_squares_are_singular() {
        let e = fit_bias_wls(&[0.5, -0.5], &[1.0, 1.0], &[1.0, 1.0]).unwrap_err();
        assert!(matches!(e, Error::SingularDesign { .. }));
        assert!(fit_bias_wls(&[0.5, 0.6], &[1.0, 1.0], &[1.0, 0.0]).is_err());
        assert!(matches!(
            projection_and_lambda(&[1.0, 1.0, 1.0]).unwrap_err(),
            Error::SingularDesign { .. }
        ));
    }

    #[test]
    fn variance_fit_arithmetic() {
        let f = fit_var_wls(&[0.5], &[0.0396], 100).unwrap();
        assert!((f.sigma2 - 2.0).abs() < 1e-12);
        let h = [0.2, 0.4, 0.7];
        let nb = 50usize;
        let s2: Vec<f64> = h.iter().map(|x| 49.0 / (2.0 * 2500.0 * x * x)).collect();
        assert!((fit_var_wls(&h, &s2, nb).unwrap().sigma2 - 1.0).abs() < 1e-12);
        assert!((fit_var_ols(&h, &s2, nb).unwrap().sigma2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(clamp_bias_constant(5.0, 0.01), 5.0);
        assert_eq!(clamp_bias_constant(0.0, 0.01), 0.01);
        assert_eq!(clamp_bias_constant(-0.004, 0.01), -0.01);
        assert_eq!(default_clamp_eps(-30.0), 3e-3);
        assert_eq!(default_clamp_eps(0.2), 1e-4);
    }

    #[test]
    fn two_column_design_has_zero_projection() {
        let d = projection_and_lambda(&[0.7, 1.9]).unwrap();
        assert!(d.projection.iter().all(|v| v.abs() < 1e-12));
        assert!(d.lambda.abs() < 1e-12 && d.q.abs() < 1e-20);
    }

    #[test]
    fn two_column_constants() {
        let t = theory_constants(&[1.0, 2.0], 1.0, 0.0).unwrap();
        assert!((t.h_k - 5.0).abs() < 1e-12);
        assert_eq!(t.h_hat, 0.0);
        assert_eq!(theory_constants(&[1.0, 2.0], 0.0, 1.0).unwrap().h_k, 0.0);
    }

    #[test]
    fn gaussian_sigma2_variance_reduces() {
        let (v, s2, nb) = (1.3, 2.0, 40);
        let got = sigma2_estimator_variance(v, s2, 0.75 * s2 * s2, nb);
        assert!((got - 2.0 * s2 * s2 * v / (nb as f64 - 1.0)).abs() < 1e-12);
    }
}
