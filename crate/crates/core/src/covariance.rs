//! Estimators of the joint 2x2 asymptotic covariance of the adjusted
//! and unadjusted ATE estimators,
//! `Sigma = Sigma_U + Sigma_V + Sigma_W 11'`.
//!
//! Index 1 is the adjusted estimator, index 2 the unadjusted one. The
//! `(2,2)` entry never involves the covariates. The `(1,1)` and `(1,2)`
//! entries are assembled from per-(arm, stratum) terms supplied by a
//! [`VarianceVariant`] strategy:
//!
//! - `crossfit` (default): cross-fit products `Y_i * loo-residual_i`
//!   weighted by annihilator row sums; consistent for any `kappa < 1`
//!   but not guaranteed PSD in finite samples;
//! - `ho`: assumes errors homogeneous within a stratum and uses the
//!   degrees-of-freedom-corrected residual variance;
//! - `hc3`: conservative HC3-style replacement for the `(1,1)` weight;
//! - `naive`: the fixed-dimension plug-in that ignores the many-regressor
//!   corrections entirely: plain residual second moments with `gamma = 1`
//!   plus the sample analog of `E(m_1(X,S) - m_0(X,S) - tau)^2` built
//!   from the fitted slopes. This reconstructs the comparator whose
//!   variance shrinks as regressors are added.

use nalgebra::Matrix2;

use crate::data::{Dataset, StrataIndex};
use crate::error::{Error, Result};
use crate::olskernel::ArmFit;
use crate::rngstat::fixed_mean;

/// The assembled covariance estimate with its component breakdown.
#[derive(Debug, Clone)]
pub struct SigmaHat {
    /// Symmetric 2x2 matrix; `[0,0]` adjusted, `[1,1]` unadjusted.
    pub matrix: Matrix2<f64>,
    /// Per-stratum `[arm 0, arm 1]` contributions to the (1,1)
    /// Sigma_U weight (the cross-fit `omega^2` under `crossfit`).
    pub omega2: Vec<[f64; 2]>,
    /// Per-stratum `[arm 0, arm 1]` contributions to the (1,2) weight
    /// (the cross-fit `varpi` under `crossfit`).
    pub varpi: Vec<[f64; 2]>,
    pub sigma_v_adj: f64,
    pub sigma_w: f64,
    pub sigma22: f64,
    pub variant: &'static str,
    /// Cross-fit matrices can fail positive semidefiniteness in finite
    /// samples; this flag is a warning, never an error.
    pub psd: bool,
}

impl SigmaHat {
    /// `S11 - 2 S12 + S22`, the combination denominator.
    pub fn combination_denominator(&self) -> f64 {
        self.matrix[(0, 0)] - 2.0 * self.matrix[(0, 1)] + self.matrix[(1, 1)]
    }
}

/// Which middle (`Sigma_V`-flavored) term a variant assembles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaVForm {
    /// The cross-fit construction with the leverage correction.
    CrossFit,
    /// The fixed-dimension plug-in
    /// `sum_s p_s (b_1 - b_0)' (Gamma_s / n_s) (b_1 - b_0)`, the sample
    /// analog of the across-unit variation of `m_1 - m_0`.
    FixedKDelta,
}

/// Per-(arm, stratum) weight policy for the Sigma_U entries.
pub trait VarianceVariant: Send + Sync {
    fn name(&self) -> &'static str;

    /// `(contribution to the (1,1) entry, contribution to the (1,2)
    /// entry)` for one cell, before the `n_s^2/(n n_as)` weighting.
    fn u_terms(&self, fit: &ArmFit, y_arm: &[f64]) -> (f64, f64);

    fn v_form(&self) -> SigmaVForm {
        SigmaVForm::CrossFit
    }
}

/// Cross-fit `omega^2 = gamma^-2 (1/n_as) sum_i m_i^2 Y_i loo_eps_i`.
/// May be negative in finite samples.
pub fn omega_hat(fit: &ArmFit, y_arm: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..fit.n {
        let m = fit.m_row_sum[i];
        acc += m * m * y_arm[i] * fit.loo_residuals[i];
    }
    acc / (fit.n as f64 * fit.gamma * fit.gamma)
}

/// Cross-fit `varpi = gamma^-1 (1/n_as) sum_i m_i Y_i loo_eps_i`.
pub fn varpi_hat(fit: &ArmFit, y_arm: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..fit.n {
        acc += fit.m_row_sum[i] * y_arm[i] * fit.loo_residuals[i];
    }
    acc / (fit.n as f64 * fit.gamma)
}

/// HC3-style conservative replacement for `omega^2`:
/// `gamma^-2 (1/n_as) sum_i m_i^2 M_ii^-2 eps_i^2` (always nonnegative).
pub fn omega_hc3(fit: &ArmFit) -> f64 {
    let mut acc = 0.0;
    for i in 0..fit.n {
        let m = fit.m_row_sum[i];
        let loo = fit.loo_residuals[i];
        acc += m * m * loo * loo;
    }
    acc / (fit.n as f64 * fit.gamma * fit.gamma)
}

/// Degrees-of-freedom-corrected residual variance
/// `sum eps^2 / (n_as - 1 - k)` for the homoskedastic variant.
pub fn residual_variance_ho(fit: &ArmFit) -> f64 {
    let k = fit.slope.len();
    let ss: f64 = fit.residuals.iter().map(|&e| e * e).sum();
    ss / (fit.n - 1 - k) as f64
}

pub struct CrossFit;

impl VarianceVariant for CrossFit {
    fn name(&self) -> &'static str {
        "crossfit"
    }

    fn u_terms(&self, fit: &ArmFit, y_arm: &[f64]) -> (f64, f64) {
        (omega_hat(fit, y_arm), varpi_hat(fit, y_arm))
    }
}

pub struct Homoskedastic;

impl VarianceVariant for Homoskedastic {
    fn name(&self) -> &'static str {
        "ho"
    }

    fn u_terms(&self, fit: &ArmFit, _y_arm: &[f64]) -> (f64, f64) {
        let v = residual_variance_ho(fit);
        (v / fit.gamma, v)
    }
}

/// HC3 weight for the (1,1) entry; the (1,2) entry keeps the cross-fit
/// `varpi` (no conservative off-diagonal construction exists).
pub struct Hc3Conservative;

impl VarianceVariant for Hc3Conservative {
    fn name(&self) -> &'static str {
        "hc3"
    }

    fn u_terms(&self, fit: &ArmFit, y_arm: &[f64]) -> (f64, f64) {
        (omega_hc3(fit), varpi_hat(fit, y_arm))
    }
}

/// The fixed-dimension plug-in: plain residual second moments with
/// `gamma = 1`, and the slope-difference quadratic in place of the
/// cross-fit `Sigma_V`. Together with `Sigma_W` the middle term equals
/// `(1/n) sum_i (mhat_1(X_i) - mhat_0(X_i) - tau_adj)^2` exactly, the
/// classical plug-in for the fixed-`k` asymptotic variance.
pub struct NaiveFixedK;

impl VarianceVariant for NaiveFixedK {
    fn name(&self) -> &'static str {
        "naive"
    }

    fn u_terms(&self, fit: &ArmFit, _y_arm: &[f64]) -> (f64, f64) {
        let v = fit.residuals.iter().map(|&e| e * e).sum::<f64>() / fit.n as f64;
        (v, v)
    }

    fn v_form(&self) -> SigmaVForm {
        SigmaVForm::FixedKDelta
    }
}

pub const VARIANT_NAMES: [&str; 4] = ["crossfit", "ho", "hc3", "naive"];

pub fn variant_by_name(name: &str) -> Result<Box<dyn VarianceVariant>> {
    match name {
        "crossfit" => Ok(Box::new(CrossFit)),
        "ho" => Ok(Box::new(Homoskedastic)),
        "hc3" => Ok(Box::new(Hc3Conservative)),
        "naive" => Ok(Box::new(NaiveFixedK)),
        other => Err(Error::InvalidArgument(format!(
            "unknown variance variant `{other}` (expected one of {VARIANT_NAMES:?})"
        ))),
    }
}

/// The asymptotic variance of the unadjusted estimator:
/// within-arm variation of the propensity-weighted outcomes plus the
/// across-strata variation of the arm-mean differences.
pub fn sigma22(d: &Dataset, idx: &StrataIndex, tau_unadj: f64) -> Result<f64> {
    let y = d.outcome();
    let n = d.n() as f64;
    let mut within = 0.0;
    let mut across = 0.0;
    for (sid, st) in idx.strata.iter().enumerate() {
        let pi = st.propensity();
        let mut arm_means = [0.0; 2];
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
            let denom = if arm == 1 { pi } else { 1.0 - pi };
            let scaled: Vec<f64> = ids.iter().map(|&i| y[i] / denom).collect();
            let mean = fixed_mean(&scaled);
            within += scaled.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
            arm_means[arm] = mean * denom;
        }
        let diff = arm_means[1] - arm_means[0] - tau_unadj;
        across += idx.share(sid) * diff * diff;
    }
    Ok(within / n + across)
}

fn y_arm(d: &Dataset, idx: &StrataIndex, sid: usize, arm: usize) -> Vec<f64> {
    idx.strata[sid].arms[arm]
        .iter()
        .map(|&i| d.outcome()[i])
        .collect()
}

/// Weighted sums `sum_s sum_a n_s^2/(n n_as) * u_term(a, s)` for the
/// (1,1) and (1,2) Sigma_U entries.
pub fn sigma_u_terms(
    d: &Dataset,
    idx: &StrataIndex,
    fits: &[[ArmFit; 2]],
    variant: &dyn VarianceVariant,
) -> (f64, f64, Vec<[f64; 2]>, Vec<[f64; 2]>) {
    let n = d.n() as f64;
    let mut u11 = 0.0;
    let mut u12 = 0.0;
    let mut omega2 = Vec::with_capacity(idx.num_strata());
    let mut varpi = Vec::with_capacity(idx.num_strata());
    for (sid, st) in idx.strata.iter().enumerate() {
        let n_s = st.n() as f64;
        let mut o = [0.0; 2];
        let mut v = [0.0; 2];
        for arm in 0..2usize {
            let fit = &fits[sid][arm];
            let ys = y_arm(d, idx, sid, arm);
            let (t11, t12) = variant.u_terms(fit, &ys);
            o[arm] = t11;
            v[arm] = t12;
            let w = n_s * n_s / (n * fit.n as f64);
            u11 += w * t11;
            u12 += w * t12;
        }
        omega2.push(o);
        varpi.push(v);
    }
    (u11, u12, omega2, varpi)
}

/// The shared `Sigma_V` entry:
/// `sum_s p_s [ sum_a ( beta_a' Gamma_as beta_a / n_as
///                      - (1/n_as) sum_i P_ii Y_i loo_eps_i )
///              - (2/n_s) beta_1' Gamma_s beta_0 ]`,
/// with `Gamma_s = Gamma_{0,s} + Gamma_{1,s}`. The leverage correction
/// is dropped when the variant says so.
pub fn sigma_v_adj(
    d: &Dataset,
    idx: &StrataIndex,
    fits: &[[ArmFit; 2]],
    correction: bool,
) -> f64 {
    let mut total = 0.0;
    for (sid, st) in idx.strata.iter().enumerate() {
        let mut cell = 0.0;
        for arm in 0..2usize {
            let fit = &fits[sid][arm];
            let quad = (&fit.gram * &fit.slope).dot(&fit.slope) / fit.n as f64;
            let corr = if correction {
                let ys = y_arm(d, idx, sid, arm);
                let mut acc = 0.0;
                for i in 0..fit.n {
                    acc += fit.leverage[i] * ys[i] * fit.loo_residuals[i];
                }
                acc / fit.n as f64
            } else {
                0.0
            };
            cell += quad - corr;
        }
        let gram_s = &fits[sid][0].gram + &fits[sid][1].gram;
        let cross = (&gram_s * &fits[sid][0].slope).dot(&fits[sid][1].slope);
        cell -= 2.0 * cross / st.n() as f64;
        total += idx.share(sid) * cell;
    }
    total
}

/// Fixed-dimension middle term:
/// `sum_s p_s (b_{1,s} - b_{0,s})' (Gamma_s / n_s) (b_{1,s} - b_{0,s})`.
pub fn sigma_v_fixed_k_delta(idx: &StrataIndex, fits: &[[ArmFit; 2]]) -> f64 {
    let mut total = 0.0;
    for (sid, pair) in fits.iter().enumerate() {
        let delta = &pair[1].slope - &pair[0].slope;
        let gram_s = &pair[0].gram + &pair[1].gram;
        let n_s = idx.strata[sid].n() as f64;
        total += idx.share(sid) * (gram_s * &delta).dot(&delta) / n_s;
    }
    total
}

/// `Sigma_W = sum_s p_s (tau_{1,s} - tau_{0,s} - tau_adj)^2`.
pub fn sigma_w(idx: &StrataIndex, fits: &[[ArmFit; 2]], tau_adj: f64) -> f64 {
    let mut acc = 0.0;
    for (sid, pair) in fits.iter().enumerate() {
        let diff = pair[1].intercept - pair[0].intercept - tau_adj;
        acc += idx.share(sid) * diff * diff;
    }
    acc
}

/// Assemble the full estimate for the requested variant.
pub fn sigma_matrix(
    d: &Dataset,
    idx: &StrataIndex,
    fits: &[[ArmFit; 2]],
    tau_adj: f64,
    tau_unadj: f64,
    variant: &dyn VarianceVariant,
) -> Result<SigmaHat> {
    if fits.len() != idx.num_strata() {
        return Err(Error::InvalidArgument(
            "one fit pair per stratum is required".into(),
        ));
    }
    let (u11, u12, omega2, varpi) = sigma_u_terms(d, idx, fits, variant);
    let v_adj = match variant.v_form() {
        SigmaVForm::CrossFit => sigma_v_adj(d, idx, fits, true),
        SigmaVForm::FixedKDelta => sigma_v_fixed_k_delta(idx, fits),
    };
    let w = sigma_w(idx, fits, tau_adj);
    let s22 = sigma22(d, idx, tau_unadj)?;
    let s11 = u11 + v_adj + w;
    let s12 = u12 + v_adj + w;
    let matrix = Matrix2::new(s11, s12, s12, s22);
    let psd = s11 >= 0.0 && s22 >= 0.0 && s11 * s22 - s12 * s12 >= -1e-12 * (s11 * s22).abs();
    Ok(SigmaHat {
        matrix,
        omega2,
        varpi,
        sigma_v_adj: v_adj,
        sigma_w: w,
        sigma22: s22,
        variant: variant.name(),
        psd,
    })
}
