//! The three ATE point estimators: unadjusted (fully saturated
//! difference in means), fully saturated regression adjusted, and the
//! optimal linear combination of the two.

use nalgebra::{Matrix2, Vector2};

use crate::covariance::{self, SigmaHat, VarianceVariant};
use crate::data::{Dataset, StrataIndex};
use crate::error::{Error, Result};
use crate::olskernel::{self, ArmFit, DemeanedCovariates};
use crate::rngstat::fixed_mean;

/// The unadjusted estimator and its per-stratum arm means.
#[derive(Debug, Clone)]
pub struct Unadjusted {
    pub tau: f64,
    /// `arm_means[sid][a]` is the mean outcome of arm `a` in stratum `sid`.
    pub arm_means: Vec<[f64; 2]>,
}

/// `tau_unadj = sum_s p_s ( mean Y in (1,s) - mean Y in (0,s) )`.
pub fn tau_unadj(d: &Dataset, idx: &StrataIndex) -> Result<Unadjusted> {
    let y = d.outcome();
    let mut arm_means = Vec::with_capacity(idx.num_strata());
    let mut tau = 0.0;
    for (sid, st) in idx.strata.iter().enumerate() {
        let mut means = [0.0; 2];
        for arm in 0..2usize {
            let ids = &st.arms[arm];
            if ids.is_empty() {
                let what = if arm == 1 { "treated" } else { "control" };
                return Err(Error::NotEstimable {
                    stratum: st.label.clone(),
                    arm: arm as u8,
                    reason: format!("no {what} units"),
                });
            }
            let vals: Vec<f64> = ids.iter().map(|&i| y[i]).collect();
            means[arm] = fixed_mean(&vals);
        }
        arm_means.push(means);
        tau += idx.share(sid) * (means[1] - means[0]);
    }
    Ok(Unadjusted { tau, arm_means })
}

/// The adjusted estimator and the per-stratum arm fits behind it.
#[derive(Debug, Clone)]
pub struct Adjusted {
    pub tau: f64,
    /// `fits[sid][a]` is the OLS fit for arm `a` of stratum `sid`.
    pub fits: Vec<[ArmFit; 2]>,
}

/// Gather one arm's outcome slice and demeaned covariate rows.
fn arm_slices(
    d: &Dataset,
    xd: &DemeanedCovariates,
    ids: &[usize],
) -> (Vec<f64>, nalgebra::DMatrix<f64>) {
    let y: Vec<f64> = ids.iter().map(|&i| d.outcome()[i]).collect();
    let x = nalgebra::DMatrix::from_fn(ids.len(), d.k(), |r, c| xd.xd[(ids[r], c)]);
    (y, x)
}

/// `tau_adj = sum_s p_s (tau_{1,s} - tau_{0,s})`, each `tau_{a,s}` the
/// intercept of the within-cell OLS on the stratum-demeaned covariates.
/// With `k = 0` this reduces exactly to [`tau_unadj`].
pub fn tau_adj(d: &Dataset, idx: &StrataIndex, xd: &DemeanedCovariates) -> Result<Adjusted> {
    let mut fits = Vec::with_capacity(idx.num_strata());
    let mut tau = 0.0;
    for (sid, st) in idx.strata.iter().enumerate() {
        let mut pair: Vec<ArmFit> = Vec::with_capacity(2);
        for arm in 0..2u8 {
            let ids = &st.arms[arm as usize];
            let (y_arm, x_arm) = arm_slices(d, xd, ids);
            pair.push(olskernel::fit_arm(arm, sid, &st.label, &y_arm, &x_arm)?);
        }
        let treated = pair.pop().expect("two fits");
        let control = pair.pop().expect("two fits");
        tau += idx.share(sid) * (treated.intercept - control.intercept);
        fits.push([control, treated]);
    }
    Ok(Adjusted { tau, fits })
}

/// The augmented inverse-propensity-weighted form of the adjusted
/// estimator. Algebraically identical to [`tau_adj`] when the
/// covariates are demeaned at the stratum level; kept as an identity
/// oracle.
pub fn aipw_value(d: &Dataset, idx: &StrataIndex, adjusted: &Adjusted) -> f64 {
    let n = d.n();
    let y = d.outcome();
    let x = d.covariates();
    let mut acc = 0.0;
    for i in 0..n {
        let sid = idx.stratum_of[i];
        let pi = idx.strata[sid].propensity();
        let xi = x.row(i).transpose();
        let b1 = &adjusted.fits[sid][1].slope;
        let b0 = &adjusted.fits[sid][0].slope;
        let fitted1 = xi.dot(b1);
        let fitted0 = xi.dot(b0);
        if d.treatment()[i] == 1 {
            acc += (y[i] - fitted1) / pi;
        } else {
            acc -= (y[i] - fitted0) / (1.0 - pi);
        }
        acc += fitted1 - fitted0;
    }
    acc / n as f64
}

/// The combined estimator, its weight, and the quadratic-form variance.
#[derive(Debug, Clone, Copy)]
pub struct Combination {
    pub tau_star: f64,
    /// Weight on the adjusted estimator (the safeguarded `w` when
    /// `lambda_ridge > 0`).
    pub weight: f64,
    /// `(w, 1-w) Sigma (w, 1-w)'` at the reported weight.
    pub var_star: f64,
}

/// Optimal linear combination
/// `tau* = w tau_adj + (1 - w) tau_unadj` with
/// `w = (S22 - S12) / (S11 - 2 S12 + S22 + lambda)`.
///
/// With `lambda_ridge = 0` the denominator must be positive; the
/// variance reported is always the quadratic form at the reported
/// weight so Wald statistics stay internally consistent under a ridge.
pub fn combine(
    tau_adj: f64,
    tau_unadj: f64,
    sigma: &Matrix2<f64>,
    lambda_ridge: f64,
) -> Result<Combination> {
    if lambda_ridge < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "lambda_ridge must be >= 0, got {lambda_ridge}"
        )));
    }
    let (s11, s12, s22) = (sigma[(0, 0)], sigma[(0, 1)], sigma[(1, 1)]);
    if (sigma[(1, 0)] - s12).abs() > 1e-12 * (s12.abs() + 1.0) {
        return Err(Error::InvalidArgument(
            "combination covariance must be symmetric".into(),
        ));
    }
    let denom = s11 - 2.0 * s12 + s22 + lambda_ridge;
    let scale = s11.abs() + 2.0 * s12.abs() + s22.abs();
    if denom <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::DegenerateCombination);
    }
    let weight = (s22 - s12) / denom;
    let tau_star = weight * tau_adj + (1.0 - weight) * tau_unadj;
    let wv = Vector2::new(weight, 1.0 - weight);
    let var_star = wv.dot(&(sigma * wv));
    Ok(Combination {
        tau_star,
        weight,
        var_star,
    })
}

/// Everything the `analyze` workflow reports for one dataset.
#[derive(Debug, Clone)]
pub struct AteResult {
    pub tau_unadj: f64,
    pub tau_adj: f64,
    pub tau_star: f64,
    pub weight: f64,
    pub var_star: f64,
    /// Per-stratum `[tau_{0,s}, tau_{1,s}]` intercepts.
    pub stratum_intercepts: Vec<[f64; 2]>,
    pub fits: Vec<[ArmFit; 2]>,
    /// The covariance estimate used by the combination.
    pub sigma: SigmaHat,
}

/// Full estimation pass: both point estimators, the requested
/// covariance variant, and the combined estimator.
pub fn analyze(
    d: &Dataset,
    idx: &StrataIndex,
    variant: &dyn VarianceVariant,
    lambda_ridge: f64,
) -> Result<AteResult> {
    let unadj = tau_unadj(d, idx)?;
    let xd = olskernel::demean_by_stratum(d, idx);
    let adjusted = tau_adj(d, idx, &xd)?;
    let sigma = covariance::sigma_matrix(d, idx, &adjusted.fits, adjusted.tau, unadj.tau, variant)?;
    let combo = match combine(adjusted.tau, unadj.tau, &sigma.matrix, lambda_ridge) {
        Ok(c) => c,
        // Exact degeneracy (k = 0 collapses the two estimators and all
        // covariance entries): every weight yields the same estimator,
        // so report the adjusted leg with unit weight.
        Err(Error::DegenerateCombination)
            if (adjusted.tau - unadj.tau).abs()
                <= 1e-10 * adjusted.tau.abs().max(unadj.tau.abs()).max(1.0) =>
        {
            Combination {
                tau_star: adjusted.tau,
                weight: 1.0,
                var_star: sigma.matrix[(0, 0)],
            }
        }
        Err(e) => return Err(e),
    };
    let stratum_intercepts = adjusted
        .fits
        .iter()
        .map(|pair| [pair[0].intercept, pair[1].intercept])
        .collect();
    Ok(AteResult {
        tau_unadj: unadj.tau,
        tau_adj: adjusted.tau,
        tau_star: combo.tau_star,
        weight: combo.weight,
        var_star: combo.var_star,
        stratum_intercepts,
        fits: adjusted.fits,
        sigma,
    })
}
