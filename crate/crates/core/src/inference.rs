//! Wald tests and confidence intervals for the ATE, including the
//! K-estimator optimal-combination test.
//!
//! Only the chi-squared distribution with one degree of freedom is ever
//! needed, so its CDF and quantile are expressed through the standard
//! normal `erf` relation instead of a general incomplete gamma.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::rngstat::{erfc, normal_inverse_cdf};

/// Outcome of one Wald-type test.
#[derive(Debug, Clone)]
pub struct TestResult {
    /// Chi-squared(1) scale statistic.
    pub statistic: f64,
    pub p_value: f64,
    pub reject: bool,
    pub tau0: f64,
    pub alpha: f64,
    pub method: String,
}

/// `(1 - alpha)` quantile of chi-squared(1):
/// the square of the standard-normal `1 - alpha/2` quantile.
pub fn chi2_1_quantile(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in (0,1), got {alpha}"
        )));
    }
    let z = normal_inverse_cdf(1.0 - alpha / 2.0)?;
    Ok(z * z)
}

/// Survival function of chi-squared(1): `P(Z^2 >= x) = erfc(sqrt(x/2))`.
pub fn chi2_1_survival(x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else {
        erfc((x / 2.0).sqrt())
    }
}

/// The rejection rule: reject when the statistic reaches the critical
/// value (the boundary rejects).
#[inline]
fn reject_at(statistic: f64, critical: f64) -> bool {
    statistic >= critical
}

/// Two-sided Wald test of `tau = tau0` from an estimate and its
/// variance estimate: statistic `n (tau_hat - tau0)^2 / sigma2`.
pub fn wald(
    tau_hat: f64,
    sigma2: f64,
    n: usize,
    tau0: f64,
    alpha: f64,
    method: &str,
) -> Result<TestResult> {
    if sigma2 <= 0.0 {
        return Err(Error::Numerical(format!(
            "non-positive variance estimate ({sigma2})"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let critical = chi2_1_quantile(alpha)?;
    let diff = tau_hat - tau0;
    let statistic = n as f64 * diff * diff / sigma2;
    Ok(TestResult {
        statistic,
        p_value: chi2_1_survival(statistic),
        reject: reject_at(statistic, critical),
        tau0,
        alpha,
        method: method.to_string(),
    })
}

/// Wald-inverted confidence interval `tau_hat ± sqrt(C_alpha sigma2/n)`.
/// Contains `tau0` exactly when [`wald`] does not reject.
pub fn confidence_interval(tau_hat: f64, sigma2: f64, n: usize, alpha: f64) -> Result<(f64, f64)> {
    if sigma2 <= 0.0 {
        return Err(Error::Numerical(format!(
            "non-positive variance estimate ({sigma2})"
        )));
    }
    let half = (chi2_1_quantile(alpha)? * sigma2 / n as f64).sqrt();
    Ok((tau_hat - half, tau_hat + half))
}

/// Optimal combination test for K estimators of the same parameter:
/// statistic `n (1' S^-1 (tau - tau0 1))^2 / (1' S^-1 1)` with
/// combination weights `w = S^-1 1 / (1' S^-1 1)`. Requires a positive
/// definite `sigma` (checked by Cholesky).
///
/// The caller supplies the K x K covariance: the built-in covariance
/// module only produces the 2 x 2 (adjusted, unadjusted) matrix, so a
/// combination with further estimators (a prior-subset adjustment, say)
/// needs an externally constructed `sigma`.
pub fn multi_combine_test(
    tau_hats: &[f64],
    sigma: &DMatrix<f64>,
    n: usize,
    tau0: f64,
    alpha: f64,
) -> Result<(TestResult, Vec<f64>)> {
    let k = tau_hats.len();
    if k == 0 || sigma.nrows() != k || sigma.ncols() != k {
        return Err(Error::InvalidArgument(format!(
            "need a K x K covariance for K = {k} estimators"
        )));
    }
    let chol = nalgebra::Cholesky::new(sigma.clone()).ok_or(Error::NotPositiveDefinite)?;
    let ones = DVector::from_element(k, 1.0);
    let sig_inv_ones = chol.solve(&ones);
    let denom = ones.dot(&sig_inv_ones);
    if denom <= 0.0 {
        return Err(Error::NotPositiveDefinite);
    }
    let weights: Vec<f64> = sig_inv_ones.iter().map(|&v| v / denom).collect();
    let centered = DVector::from_fn(k, |i, _| tau_hats[i] - tau0);
    let num = sig_inv_ones.dot(&centered);
    let statistic = n as f64 * num * num / denom;
    let critical = chi2_1_quantile(alpha)?;
    Ok((
        TestResult {
            statistic,
            p_value: chi2_1_survival(statistic),
            reject: reject_at(statistic, critical),
            tau0,
            alpha,
            method: format!("combine{k}"),
        },
        weights,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimate::combine;
    use crate::rngstat::RngStream;
    use nalgebra::Matrix2;

    #[test]
    fn quantile_reference_values() {
        assert!((chi2_1_quantile(0.05).unwrap() - 3.8414588).abs() < 1e-6);
        assert!((chi2_1_quantile(0.5).unwrap() - 0.4549364).abs() < 1e-6);
        // alpha -> 1 sends the critical value to 0
        assert!(chi2_1_quantile(0.9999999).unwrap() < 1e-10);
    }

    #[test]
    fn wald_no_rejection_at_the_null() {
        let t = wald(0.3, 1.0, 100, 0.3, 0.05, "adj").unwrap();
        assert_eq!(t.statistic, 0.0);
        assert_eq!(t.p_value, 1.0);
        assert!(!t.reject);
    }

    #[test]
    fn wald_arithmetic_example() {
        // n=100, diff=0.2, sigma2=1 -> statistic 4.0 > 3.841
        let t = wald(0.2, 1.0, 100, 0.0, 0.05, "adj").unwrap();
        assert!((t.statistic - 4.0).abs() < 1e-12);
        assert!(t.reject);
    }

    #[test]
    fn boundary_statistic_rejects() {
        let c = chi2_1_quantile(0.05).unwrap();
        assert!(reject_at(c, c));
        assert!(!reject_at(c - 1e-12, c));
    }

    #[test]
    fn wald_rejects_nonpositive_variance() {
        assert!(wald(0.1, 0.0, 10, 0.0, 0.05, "adj").is_err());
        assert!(wald(0.1, -1.0, 10, 0.0, 0.05, "adj").is_err());
    }

    #[test]
    fn interval_width_and_duality() {
        let (lo, hi) = confidence_interval(0.0, 0.01, 100, 0.05).unwrap();
        let half = (hi - lo) / 2.0;
        assert!((half - (3.8414588 * 0.0001f64).sqrt()).abs() < 1e-6);

        let mut rng = RngStream::new(61, 0, "test");
        for _ in 0..100 {
            let tau_hat = rng.standard_normal();
            let sigma2 = rng.uniform_in(0.1, 2.0);
            let tau0 = rng.standard_normal() * 0.3;
            let n = 50;
            let t = wald(tau_hat, sigma2, n, tau0, 0.05, "m").unwrap();
            let (lo, hi) = confidence_interval(tau_hat, sigma2, n, 0.05).unwrap();
            assert_eq!(!t.reject, (lo <= tau0) && (tau0 <= hi));
        }

        // smaller alpha widens the interval
        let (lo1, hi1) = confidence_interval(0.0, 1.0, 10, 0.05).unwrap();
        let (lo2, hi2) = confidence_interval(0.0, 1.0, 10, 0.01).unwrap();
        assert!(hi2 - lo2 > hi1 - lo1);
    }

    #[test]
    fn p_value_calibration_on_simulated_normals() {
        // fraction of Z^2 >= C_{0.05} should be 5% within MC error
        let mut rng = RngStream::new(67, 0, "test");
        let c = chi2_1_quantile(0.05).unwrap();
        let n = 1_000_000;
        let mut hits = 0u64;
        for _ in 0..n {
            let z = rng.standard_normal();
            if z * z >= c {
                hits += 1;
            }
        }
        let frac = hits as f64 / n as f64;
        assert!((frac - 0.05).abs() < 0.001, "rejection fraction {frac}");
    }

    #[test]
    fn k2_combination_matches_tau_star_wald() {
        let mut rng = RngStream::new(71, 0, "test");
        for _ in 0..100 {
            let a = rng.standard_normal();
            let b = rng.standard_normal();
            let c = rng.standard_normal();
            let d = rng.standard_normal();
            let m = Matrix2::new(a, b, c, d);
            let sigma2x2 = m.transpose() * m + Matrix2::identity() * 0.1;
            let tau_adj = rng.standard_normal() * 0.1;
            let tau_unadj = rng.standard_normal() * 0.1;
            let tau0 = 0.02;
            let n = 200;

            let combo = combine(tau_adj, tau_unadj, &sigma2x2, 0.0).unwrap();
            let star = wald(combo.tau_star, combo.var_star, n, tau0, 0.05, "star").unwrap();

            let sigma = DMatrix::from_fn(2, 2, |r, c| sigma2x2[(r, c)]);
            let (multi, weights) =
                multi_combine_test(&[tau_adj, tau_unadj], &sigma, n, tau0, 0.05).unwrap();
            assert!(
                (star.statistic - multi.statistic).abs() < 1e-10,
                "star {} vs multi {}",
                star.statistic,
                multi.statistic
            );
            assert!((weights[0] - combo.weight).abs() < 1e-10);
        }
    }

    #[test]
    fn combination_orthonormal_case() {
        // Sigma = I, all estimates tau0 + delta: statistic = n K delta^2
        let sigma = DMatrix::identity(3, 3);
        let delta = 0.3;
        let taus = [delta, delta, delta];
        let (t, w) = multi_combine_test(&taus, &sigma, 50, 0.0, 0.05).unwrap();
        assert!((t.statistic - 50.0 * 3.0 * delta * delta).abs() < 1e-10);
        assert!(w.iter().all(|&wi| (wi - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn combination_requires_positive_definite() {
        // duplicated estimator -> singular covariance
        let mut sigma = DMatrix::identity(3, 3);
        sigma[(2, 0)] = 1.0;
        sigma[(0, 2)] = 1.0;
        sigma[(2, 2)] = 1.0;
        let err = multi_combine_test(&[0.1, 0.2, 0.1], &sigma, 50, 0.0, 0.05).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite));
    }

    #[test]
    fn combination_invariant_to_reordering() {
        let sigma = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.5, 0.2, 0.1, 0.2, 1.0]);
        let taus = [0.12, -0.05, 0.2];
        let (t1, _) = multi_combine_test(&taus, &sigma, 80, 0.0, 0.05).unwrap();
        // permute (2,0,1)
        let perm = [2usize, 0, 1];
        let taus_p: Vec<f64> = perm.iter().map(|&i| taus[i]).collect();
        let sigma_p = DMatrix::from_fn(3, 3, |r, c| sigma[(perm[r], perm[c])]);
        let (t2, _) = multi_combine_test(&taus_p, &sigma_p, 80, 0.0, 0.05).unwrap();
        assert!((t1.statistic - t2.statistic).abs() < 1e-12);
    }
}
