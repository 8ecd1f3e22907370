//! Marchenko-Pastur quantities: the spectral integral `zeta(kappa)`,
//! the variance inflation factor `zeta/2`, and the Gaussian-design limit
//! of the intercept weight `gamma`.
//!
//! `zeta(kappa)` is the integral of
//! `sqrt((l+ - l)(l - l-)) / (2 pi l^2)` over the Marchenko-Pastur bulk
//! `[l-, l+]`, `l± = (1 ± sqrt(kappa))^2`. The quadrature path is the
//! ground truth; `zeta_closed_form` is the verified closed form
//! `kappa/(1 - kappa)`, kept as a fast path and cross-checked against
//! the quadrature in the test suite.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Marchenko-Pastur summary at one aspect ratio.
#[derive(Debug, Clone, Copy)]
pub struct MpResult {
    pub kappa: f64,
    pub lambda_minus: f64,
    pub lambda_plus: f64,
    pub zeta: f64,
    pub vif: f64,
    /// Difference between the last two quadrature refinements.
    pub quad_error: f64,
}

/// Gauss-Legendre nodes and weights on `[-1, 1]` (Newton on the
/// Legendre recurrence).
fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; m];
    let mut weights = vec![0.0; m];
    for i in 0..m.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let mut p0 = 1.0;
            let mut p1 = x;
            for j in 2..=m {
                let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = m as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[m - 1 - i] = x;
        weights[i] = w;
        weights[m - 1 - i] = w;
    }
    (nodes, weights)
}

/// One Gauss-Legendre pass at order `m` after the substitution
/// `lambda = (1 + kappa) + 2 sqrt(kappa) sin(u)`, which turns the
/// integrand into a smooth function of `u` on `[-pi/2, pi/2]` (the
/// endpoint square-root singularities become `cos^2 u`).
fn zeta_quadrature_pass(kappa: f64, m: usize) -> f64 {
    let center = 1.0 + kappa;
    let radius = 2.0 * kappa.sqrt();
    let (nodes, weights) = gauss_legendre(m);
    let mut acc = 0.0;
    for (t, w) in nodes.iter().zip(&weights) {
        let u = t * PI / 2.0;
        let lambda = center + radius * u.sin();
        let c = u.cos();
        acc += w * radius * radius * c * c / (2.0 * PI * lambda * lambda);
    }
    acc * PI / 2.0
}

/// `zeta(kappa)` by adaptive Gauss-Legendre quadrature: the order is
/// doubled until two successive passes agree within `tol`.
pub fn mp_zeta(kappa: f64, tol: f64) -> Result<MpResult> {
    if !(0.0..1.0).contains(&kappa) {
        return Err(Error::InvalidArgument(format!(
            "Marchenko-Pastur aspect ratio must lie in [0, 1), got {kappa}"
        )));
    }
    if tol <= 0.0 {
        return Err(Error::InvalidArgument("quadrature tol must be > 0".into()));
    }
    let sq = kappa.sqrt();
    let (lambda_minus, lambda_plus) = ((1.0 - sq) * (1.0 - sq), (1.0 + sq) * (1.0 + sq));
    if kappa == 0.0 {
        return Ok(MpResult {
            kappa,
            lambda_minus,
            lambda_plus,
            zeta: 0.0,
            vif: 0.0,
            quad_error: 0.0,
        });
    }
    let mut m = 16;
    let mut prev = zeta_quadrature_pass(kappa, m);
    loop {
        m *= 2;
        let next = zeta_quadrature_pass(kappa, m);
        let err = (next - prev).abs();
        if err < tol {
            return Ok(MpResult {
                kappa,
                lambda_minus,
                lambda_plus,
                zeta: next,
                vif: next / 2.0,
                quad_error: err,
            });
        }
        if m >= 8192 {
            return Err(Error::Numerical(format!(
                "Marchenko-Pastur quadrature did not reach tol={tol} at kappa={kappa}"
            )));
        }
        prev = next;
    }
}

/// Closed form `kappa/(1 - kappa)`, verified against the quadrature.
pub fn zeta_closed_form(kappa: f64) -> f64 {
    kappa / (1.0 - kappa)
}

const DEFAULT_TOL: f64 = 1e-9;

/// Variance inflation factor `zeta(kappa)/2` (equal target fractions,
/// homoskedastic Gaussian design).
pub fn vif(kappa: f64) -> Result<f64> {
    Ok(mp_zeta(kappa, DEFAULT_TOL)?.zeta / 2.0)
}

/// Gaussian-design limit of the intercept weight:
/// `gamma = 1 / (1 + (a(1-pi) + (1-a)pi) zeta(kappa))`.
pub fn gamma_inf(kappa: f64, pi: f64, arm: u8) -> Result<f64> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "target fraction must lie in (0,1), got {pi}"
        )));
    }
    if arm > 1 {
        return Err(Error::InvalidArgument(format!("arm must be 0 or 1, got {arm}")));
    }
    let zeta = mp_zeta(kappa, DEFAULT_TOL)?.zeta;
    let mix = if arm == 1 { 1.0 - pi } else { pi };
    Ok(1.0 / (1.0 + mix * zeta))
}

/// `(kappa, VIF)` pairs for plot emission.
pub fn vif_curve(kappa_grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    kappa_grid.iter().map(|&k| Ok((k, vif(k)?))).collect()
}
