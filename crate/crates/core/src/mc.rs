//! Monte Carlo harness: replicated trial generation, estimation, and
//! testing, aggregated into rejection rates, bias, SD, and SD/SE ratios.
//!
//! Reproducibility contract: replication `r` draws from streams keyed by
//! `(seed, r, purpose)`, results land in a slot per replication id, and
//! every aggregation runs in replication order, so reports are
//! bit-identical across worker counts.

use std::time::Instant;

use rayon::prelude::*;

use crate::covariance::{self, SigmaHat, VarianceVariant};
use crate::data::{build_index, StrataIndex};
use crate::dgp::{self, GeneratedTrial, ModelSpec, OutcomeModel};
use crate::error::{Error, Result};
use crate::estimate::{self, Adjusted};
use crate::inference;
use crate::olskernel;
use crate::randomize::{self, Scheme, SchemeParams};
use crate::rngstat::{self, normal_inverse_cdf, TrialRngs};

/// The inference methods the harness can compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Adjusted estimator with the selected variance variant.
    Adj,
    /// Optimal linear combination with the selected variance variant.
    Star,
    /// Unadjusted estimator with its own variance (uses no regressors).
    Unadj,
    /// Adjusted estimator with the fixed-dimension plug-in variance.
    Naive,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Adj => "adj",
            Method::Star => "star",
            Method::Unadj => "unadj",
            Method::Naive => "naive",
        }
    }

    pub fn parse(text: &str) -> Result<Method> {
        match text {
            "adj" => Ok(Method::Adj),
            "star" => Ok(Method::Star),
            "unadj" | "bcs" => Ok(Method::Unadj),
            "naive" | "yys" => Ok(Method::Naive),
            other => Err(Error::InvalidArgument(format!(
                "unknown method `{other}` (expected adj, star, unadj, naive)"
            ))),
        }
    }

    pub fn all() -> [Method; 4] {
        [Method::Adj, Method::Star, Method::Unadj, Method::Naive]
    }
}

/// One simulation configuration.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub model: u8,
    pub n: usize,
    pub num_strata: usize,
    pub k: usize,
    pub effect: f64,
    pub scheme: String,
    pub scheme_params: SchemeParams,
    pub methods: Vec<Method>,
    /// Variance variant used by `adj` and `star`.
    pub variance: String,
    pub reps: usize,
    pub seed: u64,
    pub alpha: f64,
    pub tau0: f64,
    pub workers: usize,
    pub lambda_ridge: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            model: 1,
            n: 400,
            num_strata: 2,
            k: 40,
            effect: 0.0,
            scheme: "sbr".into(),
            scheme_params: SchemeParams::default(),
            methods: Method::all().to_vec(),
            variance: "crossfit".into(),
            reps: 1000,
            seed: 42,
            alpha: 0.05,
            tau0: 0.0,
            workers: 0,
            lambda_ridge: 0.0,
        }
    }
}

impl SimConfig {
    fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::InvalidArgument("reps must be >= 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidArgument("method list must be nonempty".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must lie in (0,1), got {}",
                self.alpha
            )));
        }
        if self.lambda_ridge < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "ridge must be >= 0, got {}",
                self.lambda_ridge
            )));
        }
        Ok(())
    }
}

/// One method's result on one replication.
#[derive(Debug, Clone, Copy)]
pub struct MethodOutcome {
    pub estimate: f64,
    /// Standard error `sqrt(sigma2 / n)`.
    pub se: f64,
    pub statistic: f64,
    pub p_value: f64,
    pub reject: bool,
}

/// Per-replication record; `outcomes` is aligned with the configured
/// method list, `None` marking a recorded failure for that method.
#[derive(Debug, Clone)]
pub struct RepRecord {
    pub rep: usize,
    pub outcomes: Vec<Option<MethodOutcome>>,
}

/// Aggregated statistics for one method.
#[derive(Debug, Clone)]
pub struct MethodReport {
    pub method: Method,
    pub uses: usize,
    pub failures: usize,
    pub reject_rate: f64,
    /// Wilson 95% interval for the rejection rate.
    pub wilson: (f64, f64),
    pub bias: f64,
    pub sd: f64,
    pub mean_se: f64,
    pub sd_se_ratio: f64,
}

/// Full simulation report.
#[derive(Debug, Clone)]
pub struct SimReport {
    pub methods: Vec<MethodReport>,
    pub reps: usize,
    pub tau_true: f64,
    pub wall_seconds: f64,
}

/// Wilson score interval for a binomial proportion at 95%.
pub fn wilson_interval(successes: usize, trials: usize) -> (f64, f64) {
    if trials == 0 {
        return (f64::NAN, f64::NAN);
    }
    let z = normal_inverse_cdf(0.975).expect("fixed quantile");
    let n = trials as f64;
    let p = successes as f64 / n;
    let denom = 1.0 + z * z / n;
    let center = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    (center - half, center + half)
}

/// Failures of estimation on one draw are recorded; anything else is a
/// real error.
fn is_estimation_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::NotEstimable { .. } | Error::DegenerateCombination | Error::Numerical(_)
    )
}

struct AdjustedPass {
    adjusted: Adjusted,
    sigma: SigmaHat,
    naive_sigma: Option<SigmaHat>,
}

fn adjusted_pass(
    trial: &GeneratedTrial,
    idx: &StrataIndex,
    tau_unadj: f64,
    variant: &dyn VarianceVariant,
    want_naive: bool,
) -> Result<AdjustedPass> {
    let d = &trial.dataset;
    let xd = olskernel::demean_by_stratum(d, idx);
    let adjusted = estimate::tau_adj(d, idx, &xd)?;
    let sigma = covariance::sigma_matrix(d, idx, &adjusted.fits, adjusted.tau, tau_unadj, variant)?;
    let naive_sigma = if want_naive && variant.name() != "naive" {
        Some(covariance::sigma_matrix(
            d,
            idx,
            &adjusted.fits,
            adjusted.tau,
            tau_unadj,
            &covariance::NaiveFixedK,
        )?)
    } else if want_naive {
        Some(sigma.clone())
    } else {
        None
    };
    Ok(AdjustedPass {
        adjusted,
        sigma,
        naive_sigma,
    })
}

fn one_replication(
    cfg: &SimConfig,
    spec: &ModelSpec,
    model: &dyn OutcomeModel,
    scheme: &dyn Scheme,
    variant: &dyn VarianceVariant,
    rep: usize,
) -> Result<RepRecord> {
    let mut rngs = TrialRngs::new(cfg.seed, rep as u64);
    let trial = dgp::generate_with_model(spec, model, scheme, &mut rngs)?;
    let d = &trial.dataset;
    let idx = build_index(d);
    let n = d.n();

    // Unadjusted leg; it can fail only when some arm is empty.
    let unadj = match estimate::tau_unadj(d, &idx) {
        Ok(u) => match covariance::sigma22(d, &idx, u.tau) {
            Ok(s22) => Some((u.tau, s22)),
            Err(e) if is_estimation_failure(&e) => None,
            Err(e) => return Err(e),
        },
        Err(e) if is_estimation_failure(&e) => None,
        Err(e) => return Err(e),
    };

    // Adjusted leg; failures here hit adj/star/naive but not unadj.
    let want_naive = cfg.methods.contains(&Method::Naive);
    let need_adjusted = want_naive
        || cfg.methods.contains(&Method::Adj)
        || cfg.methods.contains(&Method::Star);
    let adj_pass = if need_adjusted {
        match unadj {
            Some((tau_u, _)) => match adjusted_pass(&trial, &idx, tau_u, variant, want_naive) {
                Ok(p) => Some(p),
                Err(e) if is_estimation_failure(&e) => None,
                Err(e) => return Err(e),
            },
            None => None,
        }
    } else {
        None
    };

    let mut outcomes = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let point = match method {
            Method::Unadj => unadj.map(|(tau, s22)| (tau, s22)),
            Method::Adj => adj_pass
                .as_ref()
                .map(|p| (p.adjusted.tau, p.sigma.matrix[(0, 0)])),
            Method::Naive => adj_pass.as_ref().and_then(|p| {
                p.naive_sigma
                    .as_ref()
                    .map(|s| (p.adjusted.tau, s.matrix[(0, 0)]))
            }),
            Method::Star => adj_pass.as_ref().and_then(|p| {
                let (tau_u, _) = unadj.expect("adjusted pass implies unadjusted pass");
                match estimate::combine(p.adjusted.tau, tau_u, &p.sigma.matrix, cfg.lambda_ridge) {
                    Ok(c) => Some((c.tau_star, c.var_star)),
                    Err(Error::DegenerateCombination) => {
                        // Exact degeneracy (k = 0 makes the estimators
                        // identical and all matrix entries equal): any
                        // weight yields the same estimator, so report
                        // the adjusted leg.
                        let scale = p.adjusted.tau.abs().max(tau_u.abs()).max(1.0);
                        if (p.adjusted.tau - tau_u).abs() <= 1e-10 * scale {
                            Some((p.adjusted.tau, p.sigma.matrix[(0, 0)]))
                        } else {
                            None
                        }
                    }
                    Err(_) => None,
                }
            }),
        };
        let outcome = point.and_then(|(est, sigma2)| {
            match inference::wald(est, sigma2, n, cfg.tau0, cfg.alpha, method.name()) {
                Ok(t) => Some(MethodOutcome {
                    estimate: est,
                    se: (sigma2 / n as f64).sqrt(),
                    statistic: t.statistic,
                    p_value: t.p_value,
                    reject: t.reject,
                }),
                Err(_) => None,
            }
        });
        outcomes.push(outcome);
    }
    Ok(RepRecord { rep, outcomes })
}

/// Aggregate per-replication records (in replication order) into the
/// report. Failed replications are excluded from every statistic and
/// counted.
pub fn aggregate(records: &[RepRecord], cfg: &SimConfig, tau_true: f64) -> Result<SimReport> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records to aggregate".into()));
    }
    let mut methods = Vec::with_capacity(cfg.methods.len());
    let mut any_use = false;
    for (mi, &method) in cfg.methods.iter().enumerate() {
        let mut estimates = Vec::new();
        let mut ses = Vec::new();
        let mut rejections = 0usize;
        for rec in records {
            if let Some(out) = &rec.outcomes[mi] {
                estimates.push(out.estimate);
                ses.push(out.se);
                rejections += out.reject as usize;
            }
        }
        let uses = estimates.len();
        any_use |= uses > 0;
        let reject_rate = rejections as f64 / uses as f64;
        let bias = rngstat::fixed_mean(&estimates) - tau_true;
        let sd = rngstat::sample_sd(&estimates);
        let mean_se = rngstat::fixed_mean(&ses);
        methods.push(MethodReport {
            method,
            uses,
            failures: records.len() - uses,
            reject_rate,
            wilson: wilson_interval(rejections, uses),
            bias,
            sd,
            mean_se,
            sd_se_ratio: sd / mean_se,
        });
    }
    if !any_use {
        return Err(Error::InvalidData("all replications failed".into()));
    }
    Ok(SimReport {
        methods,
        reps: records.len(),
        tau_true,
        wall_seconds: 0.0,
    })
}

/// Run the configured simulation and keep the per-replication records
/// (the `--dump-reps` path).
pub fn run_simulation_with_records(cfg: &SimConfig) -> Result<(SimReport, Vec<RepRecord>)> {
    cfg.validate()?;
    let start = Instant::now();
    let spec = ModelSpec::resolve(cfg.model, cfg.n, cfg.num_strata, cfg.k, cfg.effect)?;
    let model = dgp::model_for(cfg.model, cfg.n, cfg.num_strata)?;
    let scheme = randomize::by_name(&cfg.scheme, &cfg.scheme_params)?;
    let variant = covariance::variant_by_name(&cfg.variance)?;

    let workers = if cfg.workers == 0 {
        std::thread::available_parallelism()
            .map(|p| p.get())
            .unwrap_or(1)
    } else {
        cfg.workers
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot build worker pool: {e}")))?;

    let results: Vec<Result<RepRecord>> = pool.install(|| {
        (0..cfg.reps)
            .into_par_iter()
            .map(|rep| {
                one_replication(cfg, &spec, model.as_ref(), scheme.as_ref(), variant.as_ref(), rep)
            })
            .collect()
    });
    let mut records = Vec::with_capacity(cfg.reps);
    for r in results {
        records.push(r?);
    }

    let mut report = aggregate(&records, cfg, spec.effect)?;
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok((report, records))
}

/// Run the configured simulation.
pub fn run_simulation(cfg: &SimConfig) -> Result<SimReport> {
    run_simulation_with_records(cfg).map(|(report, _)| report)
}

/// One row of a regressor-count sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub k: usize,
    /// `kappa = k / (n / (2 |S|))`, the effective-cell aspect ratio.
    pub kappa: f64,
    pub report: SimReport,
}

/// Run the simulation at each regressor count in the grid. Covariate
/// and noise draws are shared across grid points (they depend only on
/// the seed), so methods that ignore the regressors are constant in `k`.
pub fn sweep_kappa(cfg: &SimConfig, k_grid: &[usize]) -> Result<Vec<SweepRow>> {
    if k_grid.is_empty() {
        return Err(Error::InvalidArgument("empty k grid".into()));
    }
    let cell = cfg.n as f64 / (2.0 * cfg.num_strata as f64);
    let mut rows = Vec::with_capacity(k_grid.len());
    for &k in k_grid {
        let mut sub = cfg.clone();
        sub.k = k;
        let report = run_simulation(&sub)?;
        rows.push(SweepRow {
            k,
            kappa: k as f64 / cell,
            report,
        });
    }
    Ok(rows)
}
