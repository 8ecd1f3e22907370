//! Per-(arm, stratum) OLS machinery.
//!
//! For each cell the adjusted estimator needs, besides the intercept and
//! slope, several functionals of the annihilator `M = I - P` of the
//! stratum-demeaned covariates: the diagonal `M_ii`, the row sums
//! `m_i = sum_j M_ij`, and `gamma = (1' M 1)/n_as`. All of them are
//! computed from one Gram factorization without materializing the
//! `n_as x n_as` matrix:
//!
//! - `h_i = x_i' G^-1 x_i` with `G = X' X` (leverages, `P_ii`),
//! - `m_i = 1 - x_i' G^-1 u` with `u = X' 1` (row sums of `M`),
//! - intercept `tau = (sum_i m_i y_i) / (sum_i m_i)`, which equals
//!   `(1' M 1)^-1 1' M y`.
//!
//! Note `M` annihilates the demeaned covariates only; the intercept is
//! recovered through the `m`-weighting, so `M_ii` here is not the
//! classical hat-matrix diagonal of the intercept-augmented regression.

use nalgebra::{DMatrix, DVector};

use crate::data::{Dataset, StrataIndex};
use crate::error::{Error, Result};

/// Covariates demeaned by their stratum mean (never by the
/// stratum-arm mean; the outcome is never demeaned).
#[derive(Debug, Clone)]
pub struct DemeanedCovariates {
    /// `n x k` matrix with row `i` equal to `X_i - mean(X over stratum of i)`.
    pub xd: DMatrix<f64>,
    /// Per-stratum column means, aligned with the index's stratum order.
    pub stratum_means: Vec<DVector<f64>>,
}

pub fn demean_by_stratum(d: &Dataset, idx: &StrataIndex) -> DemeanedCovariates {
    let k = d.k();
    let x = d.covariates();
    let mut xd = x.clone();
    let mut stratum_means = Vec::with_capacity(idx.num_strata());
    for st in &idx.strata {
        let mut mean = DVector::zeros(k);
        for &i in &st.members {
            for c in 0..k {
                mean[c] += x[(i, c)];
            }
        }
        mean /= st.n() as f64;
        for &i in &st.members {
            for c in 0..k {
                xd[(i, c)] -= mean[c];
            }
        }
        stratum_means.push(mean);
    }
    DemeanedCovariates { xd, stratum_means }
}

/// Regression artifacts for one (arm, stratum) cell.
#[derive(Debug, Clone)]
pub struct ArmFit {
    pub arm: u8,
    /// Stratum id in the index's order.
    pub stratum: usize,
    /// Cell size `n_{a,s}`.
    pub n: usize,
    /// The intercept `tau_{a,s}`.
    pub intercept: f64,
    /// The slope `beta_{a,s}` (length k).
    pub slope: DVector<f64>,
    /// Gram matrix `Gamma_{a,s} = sum_i x_i x_i'` over the cell.
    pub gram: DMatrix<f64>,
    /// Leverages `h_i = P_ii`.
    pub leverage: Vec<f64>,
    /// Annihilator row sums `m_i = sum_j M_ij`.
    pub m_row_sum: Vec<f64>,
    /// `gamma = (1' M 1)/n = mean(m_i)`.
    pub gamma: f64,
    /// Residuals `eps_i = y_i - tau - x_i' beta`.
    pub residuals: Vec<f64>,
    /// Leave-one-out residuals `eps_i / M_ii`.
    pub loo_residuals: Vec<f64>,
}

/// Floor on `M_ii` below which the leave-one-out division is refused.
const LEVERAGE_FLOOR: f64 = 1e-8;

fn not_estimable(stratum_label: &str, arm: u8, reason: &str) -> Error {
    Error::NotEstimable {
        stratum: stratum_label.to_string(),
        arm,
        reason: reason.to_string(),
    }
}

/// Lower-triangular factor `L` with `G = L L'`, from a Cholesky of the
/// Gram matrix or, when that fails, from the `R` factor of a QR of the
/// design itself. No jitter is ever added.
fn gram_factor(
    x_arm: &DMatrix<f64>,
    gram: &DMatrix<f64>,
    label: &str,
    arm: u8,
) -> Result<DMatrix<f64>> {
    if let Some(chol) = nalgebra::Cholesky::new(gram.clone()) {
        return Ok(chol.unpack());
    }
    let r = x_arm.clone().qr().unpack_r();
    let scale = r.diagonal().iter().fold(0.0f64, |m, d| m.max(d.abs()));
    if r.diagonal()
        .iter()
        .any(|d| d.abs() <= 1e-12 * scale.max(1e-300))
    {
        return Err(not_estimable(label, arm, "collinear covariates"));
    }
    Ok(r.transpose())
}

fn solve_gram(lower: &DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    let t = lower
        .solve_lower_triangular(&b)
        .ok_or_else(|| Error::Numerical("singular triangular factor".into()))?;
    lower
        .tr_solve_lower_triangular(&t)
        .ok_or_else(|| Error::Numerical("singular triangular factor".into()))
}

/// Fit one (arm, stratum) cell: outcome `y_arm` on an intercept and the
/// stratum-demeaned covariate rows `x_arm`. Cost `O(n k^2 + k^3)`.
pub fn fit_arm(
    arm: u8,
    stratum: usize,
    stratum_label: &str,
    y_arm: &[f64],
    x_arm: &DMatrix<f64>,
) -> Result<ArmFit> {
    let n = y_arm.len();
    let k = x_arm.ncols();
    if x_arm.nrows() != n {
        return Err(Error::InvalidArgument(format!(
            "fit_arm: {} outcomes vs {} covariate rows",
            n,
            x_arm.nrows()
        )));
    }
    if n < k + 2 {
        return Err(not_estimable(
            stratum_label,
            arm,
            &format!("n_as < k+2 ({n} < {})", k + 2),
        ));
    }

    if k == 0 {
        // Projection onto nothing: M = I.
        let mean = crate::rngstat::fixed_mean(y_arm);
        let residuals: Vec<f64> = y_arm.iter().map(|&y| y - mean).collect();
        return Ok(ArmFit {
            arm,
            stratum,
            n,
            intercept: mean,
            slope: DVector::zeros(0),
            gram: DMatrix::zeros(0, 0),
            leverage: vec![0.0; n],
            m_row_sum: vec![1.0; n],
            gamma: 1.0,
            loo_residuals: residuals.clone(),
            residuals,
        });
    }

    let gram = x_arm.tr_mul(x_arm);
    let lower = gram_factor(x_arm, &gram, stratum_label, arm)?;

    // Leverages: h_i = ||L^-1 x_i||^2, all rows at once.
    let w = lower
        .solve_lower_triangular(&x_arm.transpose())
        .ok_or_else(|| not_estimable(stratum_label, arm, "collinear covariates"))?;
    let leverage: Vec<f64> = (0..n).map(|i| w.column(i).norm_squared()).collect();

    // Row sums of M: m_i = 1 - x_i' G^-1 u with u = X' 1.
    let u = x_arm.tr_mul(&DVector::from_element(n, 1.0));
    let t = solve_gram(&lower, u)?;
    let xt = x_arm * &t;
    let m_row_sum: Vec<f64> = (0..n).map(|i| 1.0 - xt[i]).collect();

    let sum_m = crate::rngstat::fixed_sum(&m_row_sum);
    let gamma = sum_m / n as f64;
    if gamma <= 1e-12 {
        return Err(not_estimable(
            stratum_label,
            arm,
            "intercept not identified (1' M 1 = 0)",
        ));
    }
    let sum_my = m_row_sum
        .iter()
        .zip(y_arm)
        .fold(0.0, |acc, (&m, &y)| acc + m * y);
    let intercept = sum_my / sum_m;

    // beta = G^-1 X' (y - tau 1)
    let centered = DVector::from_fn(n, |i, _| y_arm[i] - intercept);
    let slope = solve_gram(&lower, x_arm.tr_mul(&centered))?;

    let fitted = x_arm * &slope;
    let residuals: Vec<f64> = (0..n).map(|i| y_arm[i] - intercept - fitted[i]).collect();

    let mut loo_residuals = Vec::with_capacity(n);
    for i in 0..n {
        let m_ii = 1.0 - leverage[i];
        if m_ii < LEVERAGE_FLOOR {
            return Err(not_estimable(stratum_label, arm, "leverage-one observation"));
        }
        loo_residuals.push(residuals[i] / m_ii);
    }

    Ok(ArmFit {
        arm,
        stratum,
        n,
        intercept,
        slope,
        gram,
        leverage,
        m_row_sum,
        gamma,
        residuals,
        loo_residuals,
    })
}
