//! Covariate-adaptive treatment-assignment schemes and imbalance
//! diagnostics.
//!
//! Each scheme implements the [`Scheme`] trait and is registered under a
//! short name (`srs`, `wei`, `bcd`, `sbr`) so callers can select it at
//! runtime. Schemes consume only the stratum sequence and an RNG stream,
//! never outcomes or covariates.

use crate::error::{Error, Result};
use crate::rngstat::RngStream;

/// Target treatment fractions per stratum.
#[derive(Debug, Clone)]
pub enum PiSpec {
    /// One fraction shared by all strata.
    Uniform(f64),
    /// Per-stratum fractions indexed by stratum id.
    PerStratum(Vec<f64>),
}

impl Default for PiSpec {
    fn default() -> Self {
        PiSpec::Uniform(0.5)
    }
}

impl PiSpec {
    pub fn pi(&self, sid: usize) -> Result<f64> {
        match self {
            PiSpec::Uniform(p) => Ok(*p),
            PiSpec::PerStratum(ps) => ps.get(sid).copied().ok_or_else(|| {
                Error::InvalidArgument(format!("unknown stratum id {sid} in pi table"))
            }),
        }
    }
}

/// A realized assignment along with running imbalance diagnostics.
#[derive(Debug, Clone)]
pub struct Assignment {
    pub a: Vec<u8>,
    /// Per-stratum final imbalance `D_{n,s} = sum_i (a_i - pi_s) 1{s_i = s}`.
    pub imbalance: Vec<f64>,
    /// Per-stratum `2 B_n(s)` where `B_n(s) = sum_i (a_i - 1/2) 1{s_i = s}`,
    /// kept as an exact integer.
    pub b_twice: Vec<i64>,
}

fn finish_assignment(
    a: Vec<u8>,
    strata: &[usize],
    n_strata: usize,
    pi: &PiSpec,
) -> Result<Assignment> {
    let imbalance = imbalance(&a, strata, n_strata, pi)?;
    let mut b_twice = vec![0i64; n_strata];
    for (i, &sid) in strata.iter().enumerate() {
        b_twice[sid] += 2 * a[i] as i64 - 1;
    }
    Ok(Assignment {
        a,
        imbalance,
        b_twice,
    })
}

/// Per-stratum imbalance `D_{n,s}` of an assignment against target
/// fractions `pi`. Computed from integer arm counts, so the result is
/// exact whenever `pi_s * n_s` is exactly representable.
pub fn imbalance(a: &[u8], strata: &[usize], n_strata: usize, pi: &PiSpec) -> Result<Vec<f64>> {
    let mut treated = vec![0u64; n_strata];
    let mut totals = vec![0u64; n_strata];
    for (i, &sid) in strata.iter().enumerate() {
        if sid >= n_strata {
            return Err(Error::InvalidArgument(format!(
                "stratum id {sid} out of range (n_strata = {n_strata})"
            )));
        }
        totals[sid] += 1;
        treated[sid] += a[i] as u64;
    }
    let mut d = Vec::with_capacity(n_strata);
    for sid in 0..n_strata {
        d.push(treated[sid] as f64 - pi.pi(sid)? * totals[sid] as f64);
    }
    Ok(d)
}

/// A treatment-assignment scheme. Implementations are deterministic
/// functions of the stratum sequence and the RNG stream.
pub trait Scheme: Send + Sync {
    fn name(&self) -> &'static str;

    /// Assign treatment to units arriving in the order of `strata`
    /// (row order is enrollment order for the sequential schemes).
    fn assign(&self, strata: &[usize], n_strata: usize, rng: &mut RngStream)
        -> Result<Assignment>;
}

/// Simple random sampling: `a_i ~ Bernoulli(pi_{s_i})` independently.
#[derive(Debug, Clone)]
pub struct Srs {
    pub pi: PiSpec,
}

impl Srs {
    pub fn new(pi: PiSpec) -> Self {
        Srs { pi }
    }
}

impl Scheme for Srs {
    fn name(&self) -> &'static str {
        "srs"
    }

    fn assign(
        &self,
        strata: &[usize],
        n_strata: usize,
        rng: &mut RngStream,
    ) -> Result<Assignment> {
        let mut a = Vec::with_capacity(strata.len());
        for &sid in strata {
            if sid >= n_strata {
                return Err(Error::InvalidArgument(format!(
                    "unknown stratum id {sid}"
                )));
            }
            a.push(rng.bernoulli(self.pi.pi(sid)?) as u8);
        }
        finish_assignment(a, strata, n_strata, &self.pi)
    }
}

/// Wei's adaptive biased-coin design: the k-th unit of its stratum is
/// treated with probability `f(2 B_{k-1}(s) / n_{k-1}(s))`, with the
/// ratio understood to be zero on first arrival. Targets `pi_s = 1/2`.
pub struct Wei {
    f: Box<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl Wei {
    /// Default allocation function `f(x) = (1 - x)/2`.
    pub fn new() -> Self {
        Wei {
            f: Box::new(|x| (1.0 - x) / 2.0),
        }
    }

    /// Supply a custom `f: [-1,1] -> [0,1]`; it is assumed non-increasing
    /// with `f(-x) = 1 - f(x)`, not checked.
    pub fn with_allocation_fn(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Wei { f: Box::new(f) }
    }

    fn probability(&self, b_twice: i64, n_seen: u64) -> f64 {
        if n_seen == 0 {
            (self.f)(0.0)
        } else {
            (self.f)(b_twice as f64 / n_seen as f64)
        }
    }
}

impl Default for Wei {
    fn default() -> Self {
        Wei::new()
    }
}

impl Scheme for Wei {
    fn name(&self) -> &'static str {
        "wei"
    }

    fn assign(
        &self,
        strata: &[usize],
        n_strata: usize,
        rng: &mut RngStream,
    ) -> Result<Assignment> {
        let mut b_twice = vec![0i64; n_strata];
        let mut seen = vec![0u64; n_strata];
        let mut a = Vec::with_capacity(strata.len());
        for &sid in strata {
            if sid >= n_strata {
                return Err(Error::InvalidArgument(format!(
                    "unknown stratum id {sid}"
                )));
            }
            let p = self.probability(b_twice[sid], seen[sid]);
            let ai = rng.bernoulli(p) as u8;
            a.push(ai);
            b_twice[sid] += 2 * ai as i64 - 1;
            seen[sid] += 1;
        }
        finish_assignment(a, strata, n_strata, &PiSpec::Uniform(0.5))
    }
}

/// Efron's biased-coin design: treat with probability 1/2 when the
/// stratum is balanced, `lambda` when under-treated, `1 - lambda` when
/// over-treated. Targets `pi_s = 1/2`.
#[derive(Debug, Clone)]
pub struct Bcd {
    lambda: f64,
}

impl Bcd {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda > 0.5 && lambda <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "BCD lambda must lie in (1/2, 1], got {lambda}"
            )));
        }
        Ok(Bcd { lambda })
    }

    fn probability(&self, b_twice: i64) -> f64 {
        if b_twice == 0 {
            0.5
        } else if b_twice < 0 {
            self.lambda
        } else {
            1.0 - self.lambda
        }
    }
}

impl Scheme for Bcd {
    fn name(&self) -> &'static str {
        "bcd"
    }

    fn assign(
        &self,
        strata: &[usize],
        n_strata: usize,
        rng: &mut RngStream,
    ) -> Result<Assignment> {
        let mut b_twice = vec![0i64; n_strata];
        let mut a = Vec::with_capacity(strata.len());
        for &sid in strata {
            if sid >= n_strata {
                return Err(Error::InvalidArgument(format!(
                    "unknown stratum id {sid}"
                )));
            }
            let p = self.probability(b_twice[sid]);
            let ai = rng.bernoulli(p) as u8;
            a.push(ai);
            b_twice[sid] += 2 * ai as i64 - 1;
        }
        finish_assignment(a, strata, n_strata, &PiSpec::Uniform(0.5))
    }
}

/// Stratified block randomization: exactly `floor(pi_s * n_s)` treated
/// units per stratum, chosen uniformly at random. Needs the full
/// stratum membership up front.
#[derive(Debug, Clone)]
pub struct Sbr {
    pub pi: PiSpec,
}

impl Sbr {
    pub fn new(pi: PiSpec) -> Self {
        Sbr { pi }
    }
}

/// Unbiased-enough index draw in `[0, m)` via a widening multiply.
fn rand_index(rng: &mut RngStream, m: usize) -> usize {
    ((rng.next_u64() as u128 * m as u128) >> 64) as usize
}

impl Scheme for Sbr {
    fn name(&self) -> &'static str {
        "sbr"
    }

    fn assign(
        &self,
        strata: &[usize],
        n_strata: usize,
        rng: &mut RngStream,
    ) -> Result<Assignment> {
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n_strata];
        for (i, &sid) in strata.iter().enumerate() {
            if sid >= n_strata {
                return Err(Error::InvalidArgument(format!(
                    "unknown stratum id {sid}"
                )));
            }
            rows[sid].push(i);
        }
        let mut a = vec![0u8; strata.len()];
        for (sid, ids) in rows.iter_mut().enumerate() {
            let n_s = ids.len();
            let n_treat = (self.pi.pi(sid)? * n_s as f64).floor() as usize;
            // Partial Fisher-Yates: the first n_treat slots end up as a
            // uniform random subset.
            for j in 0..n_treat.min(n_s) {
                let pick = j + rand_index(rng, n_s - j);
                ids.swap(j, pick);
                a[ids[j]] = 1;
            }
        }
        finish_assignment(a, strata, n_strata, &self.pi)
    }
}

/// Runtime scheme parameters mirrored from the CLI flags.
#[derive(Debug, Clone)]
pub struct SchemeParams {
    pub pi: PiSpec,
    pub lambda: f64,
}

impl Default for SchemeParams {
    fn default() -> Self {
        SchemeParams {
            pi: PiSpec::default(),
            lambda: 0.75,
        }
    }
}

pub const SCHEME_NAMES: [&str; 4] = ["srs", "wei", "bcd", "sbr"];

/// Look up a scheme by its registered name.
pub fn by_name(name: &str, params: &SchemeParams) -> Result<Box<dyn Scheme>> {
    match name {
        "srs" => Ok(Box::new(Srs::new(params.pi.clone()))),
        "wei" => Ok(Box::new(Wei::new())),
        "bcd" => Ok(Box::new(Bcd::new(params.lambda)?)),
        "sbr" => Ok(Box::new(Sbr::new(params.pi.clone()))),
        other => Err(Error::InvalidArgument(format!(
            "unknown scheme `{other}` (expected one of {SCHEME_NAMES:?})"
        ))),
    }
}
