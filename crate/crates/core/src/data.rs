//! Dataset container, CSV ingestion, strata indexing, and estimability
//! validation.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// An observed experiment: outcome, treatment indicator, stratum label,
/// and an `n x k` covariate matrix (`k` may be zero).
///
/// Immutable after construction; safe to share across workers.
#[derive(Debug, Clone)]
pub struct Dataset {
    y: Vec<f64>,
    a: Vec<u8>,
    s: Vec<String>,
    x: DMatrix<f64>,
}

impl Dataset {
    pub fn new(y: Vec<f64>, a: Vec<u8>, s: Vec<String>, x: DMatrix<f64>) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::InvalidData("dataset is empty".into()));
        }
        if a.len() != n || s.len() != n || x.nrows() != n {
            return Err(Error::InvalidData(format!(
                "column lengths differ: y={n}, a={}, s={}, x rows={}",
                a.len(),
                s.len(),
                x.nrows()
            )));
        }
        if let Some(i) = a.iter().position(|&ai| ai > 1) {
            return Err(Error::InvalidData(format!(
                "treatment not binary at row {i}"
            )));
        }
        Ok(Dataset { y, a, s, x })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Number of covariate columns.
    pub fn k(&self) -> usize {
        self.x.ncols()
    }

    pub fn outcome(&self) -> &[f64] {
        &self.y
    }

    pub fn treatment(&self) -> &[u8] {
        &self.a
    }

    pub fn strata_labels(&self) -> &[String] {
        &self.s
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// A copy of the dataset containing only rows whose stratum label is
    /// not listed in `drop`. Row order is preserved.
    pub fn drop_strata(&self, drop: &[String]) -> Result<Dataset> {
        let keep: Vec<usize> = (0..self.n())
            .filter(|&i| !drop.contains(&self.s[i]))
            .collect();
        if keep.is_empty() {
            return Err(Error::InvalidData(
                "dropping the listed strata removes every row".into(),
            ));
        }
        let y = keep.iter().map(|&i| self.y[i]).collect();
        let a = keep.iter().map(|&i| self.a[i]).collect();
        let s = keep.iter().map(|&i| self.s[i].clone()).collect();
        let x = DMatrix::from_fn(keep.len(), self.k(), |r, c| self.x[(keep[r], c)]);
        Dataset::new(y, a, s, x)
    }
}

/// How covariate columns are picked out of the CSV header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CovariateSpec {
    /// Explicit column names, used in the given order.
    Columns(Vec<String>),
    /// Every column whose name starts with the prefix, in header order
    /// (the CLI syntax `X*`).
    Prefix(String),
    /// No covariates (k = 0).
    None,
}

impl CovariateSpec {
    /// Parse the CLI form: empty string for none, a trailing `*` for a
    /// prefix glob, otherwise a comma-separated list.
    pub fn parse(text: &str) -> CovariateSpec {
        let t = text.trim();
        if t.is_empty() {
            CovariateSpec::None
        } else if let Some(prefix) = t.strip_suffix('*') {
            CovariateSpec::Prefix(prefix.to_string())
        } else {
            CovariateSpec::Columns(t.split(',').map(|c| c.trim().to_string()).collect())
        }
    }
}

/// Column-name map for CSV ingestion.
#[derive(Debug, Clone)]
pub struct ColSpec {
    pub outcome: String,
    pub treatment: String,
    pub stratum: String,
    pub covariates: CovariateSpec,
}

impl Default for ColSpec {
    fn default() -> Self {
        ColSpec {
            outcome: "Y".into(),
            treatment: "A".into(),
            stratum: "S".into(),
            covariates: CovariateSpec::Prefix("X".into()),
        }
    }
}

fn parse_cell(raw: &str, column: &str, row: usize) -> Result<f64> {
    let t = raw.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") {
        return Err(Error::InvalidData(format!(
            "missing value in column `{column}` at data row {row}"
        )));
    }
    t.parse::<f64>().map_err(|_| {
        Error::InvalidData(format!(
            "non-numeric cell `{t}` in column `{column}` at data row {row}"
        ))
    })
}

/// Load a dataset from a UTF-8, comma-delimited CSV file with a header
/// row. Missing values are hard errors.
pub fn load_dataset(path: &Path, cols: &ColSpec) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;

    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidData(format!("missing column `{name}`")))
    };
    let y_idx = find(&cols.outcome)?;
    let a_idx = find(&cols.treatment)?;
    let s_idx = find(&cols.stratum)?;
    let x_idx: Vec<(usize, String)> = match &cols.covariates {
        CovariateSpec::None => Vec::new(),
        CovariateSpec::Prefix(p) => headers
            .iter()
            .enumerate()
            .filter(|(i, h)| {
                h.starts_with(p.as_str()) && *i != y_idx && *i != a_idx && *i != s_idx
            })
            .map(|(i, h)| (i, h.clone()))
            .collect(),
        CovariateSpec::Columns(names) => {
            let mut out = Vec::with_capacity(names.len());
            for name in names {
                out.push((find(name)?, name.clone()));
            }
            out
        }
    };

    let mut y = Vec::new();
    let mut a = Vec::new();
    let mut s = Vec::new();
    let mut x_rows: Vec<f64> = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let cell = |idx: usize, name: &str| -> Result<&str> {
            record.get(idx).ok_or_else(|| {
                Error::InvalidData(format!("short record at data row {row} (column `{name}`)"))
            })
        };
        y.push(parse_cell(cell(y_idx, &cols.outcome)?, &cols.outcome, row)?);
        let a_val = parse_cell(cell(a_idx, &cols.treatment)?, &cols.treatment, row)?;
        if a_val == 0.0 {
            a.push(0u8);
        } else if a_val == 1.0 {
            a.push(1u8);
        } else {
            return Err(Error::InvalidData(format!(
                "treatment not binary: value {a_val} at data row {row}"
            )));
        }
        let s_raw = cell(s_idx, &cols.stratum)?;
        if s_raw.is_empty() {
            return Err(Error::InvalidData(format!(
                "missing value in column `{}` at data row {row}",
                cols.stratum
            )));
        }
        s.push(s_raw.to_string());
        for (idx, name) in &x_idx {
            x_rows.push(parse_cell(cell(*idx, name)?, name, row)?);
        }
    }

    let n = y.len();
    let k = x_idx.len();
    let x = DMatrix::from_row_slice(n, k, &x_rows);
    Dataset::new(y, a, s, x)
}

/// One stratum's membership lists.
#[derive(Debug, Clone)]
pub struct Stratum {
    pub label: String,
    /// Row ids in file order.
    pub members: Vec<usize>,
    /// `arms[a]` holds the row ids with treatment `a`, in file order.
    pub arms: [Vec<usize>; 2],
}

impl Stratum {
    pub fn n(&self) -> usize {
        self.members.len()
    }

    pub fn n_arm(&self, arm: u8) -> usize {
        self.arms[arm as usize].len()
    }

    /// Empirical propensity n_{1,s}/n_s.
    pub fn propensity(&self) -> f64 {
        self.n_arm(1) as f64 / self.n() as f64
    }
}

/// Per-stratum row ids, counts, shares, and propensities. Stratum order
/// is lexicographic in the label, so iteration is deterministic.
#[derive(Debug, Clone)]
pub struct StrataIndex {
    pub strata: Vec<Stratum>,
    /// Map from row id to position in `strata`.
    pub stratum_of: Vec<usize>,
    n: usize,
}

impl StrataIndex {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_strata(&self) -> usize {
        self.strata.len()
    }

    /// Empirical share p_s = n_s/n.
    pub fn share(&self, sid: usize) -> f64 {
        self.strata[sid].n() as f64 / self.n as f64
    }
}

/// Build the strata index from the treatment and stratum columns.
pub fn build_index(d: &Dataset) -> StrataIndex {
    let mut by_label: BTreeMap<&str, usize> = BTreeMap::new();
    for label in d.strata_labels() {
        let next = by_label.len();
        by_label.entry(label.as_str()).or_insert(next);
    }
    // BTreeMap iterates in sorted order; reassign ids accordingly.
    let labels: Vec<String> = by_label.keys().map(|l| l.to_string()).collect();
    let id_of: BTreeMap<&str, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();

    let mut strata: Vec<Stratum> = labels
        .iter()
        .map(|label| Stratum {
            label: label.clone(),
            members: Vec::new(),
            arms: [Vec::new(), Vec::new()],
        })
        .collect();
    let mut stratum_of = Vec::with_capacity(d.n());
    for i in 0..d.n() {
        let sid = id_of[d.strata_labels()[i].as_str()];
        stratum_of.push(sid);
        strata[sid].members.push(i);
        strata[sid].arms[d.treatment()[i] as usize].push(i);
    }
    StrataIndex {
        strata,
        stratum_of,
        n: d.n(),
    }
}

/// Small-stratum policy for [`validate`].
#[derive(Debug, Clone, Copy)]
pub struct ValidationPolicy {
    /// Minimum acceptable arm size; strata with a smaller arm are listed
    /// for exclusion when `drop_small_strata` is set.
    pub min_arm_size: usize,
    pub drop_small_strata: bool,
}

impl Default for ValidationPolicy {
    fn default() -> Self {
        ValidationPolicy {
            min_arm_size: 5,
            drop_small_strata: false,
        }
    }
}

/// Estimability status of one (arm, stratum) cell.
#[derive(Debug, Clone)]
pub struct ArmCheck {
    pub stratum: String,
    pub arm: u8,
    pub estimable: bool,
    pub reason: Option<String>,
}

/// Report-only result of [`validate`]; nothing here is an error.
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub arms: Vec<ArmCheck>,
    /// Strata slated for exclusion under the drop policy.
    pub dropped_strata: Vec<String>,
}

impl ValidationReport {
    /// True when every retained (arm, stratum) cell can support the
    /// adjusted regression.
    pub fn adjusted_estimable(&self) -> bool {
        self.arms
            .iter()
            .filter(|c| !self.dropped_strata.contains(&c.stratum))
            .all(|c| c.estimable)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ArmCheck> {
        self.arms.iter().filter(|c| !c.estimable)
    }
}

/// Check each (arm, stratum) cell: the adjusted regression needs
/// `n_{a,s} >= k + 2` and both arms present.
pub fn validate(d: &Dataset, idx: &StrataIndex, policy: &ValidationPolicy) -> ValidationReport {
    let k = d.k();
    let mut arms = Vec::with_capacity(2 * idx.num_strata());
    let mut dropped = Vec::new();
    for st in &idx.strata {
        for arm in 0..2u8 {
            let n_as = st.n_arm(arm);
            let other = st.n_arm(1 - arm);
            let (estimable, reason) = if other == 0 && arm == 1 {
                (false, Some("no control units".to_string()))
            } else if other == 0 && arm == 0 {
                (false, Some("no treated units".to_string()))
            } else if n_as == 0 {
                let what = if arm == 1 { "treated" } else { "control" };
                (false, Some(format!("no {what} units")))
            } else if n_as < k + 2 {
                (false, Some(format!("n_as < k+2 ({n_as} < {})", k + 2)))
            } else {
                (true, None)
            };
            arms.push(ArmCheck {
                stratum: st.label.clone(),
                arm,
                estimable,
                reason,
            });
        }
        if policy.drop_small_strata
            && (st.n_arm(0) < policy.min_arm_size || st.n_arm(1) < policy.min_arm_size)
        {
            dropped.push(st.label.clone());
        }
    }
    ValidationReport {
        arms,
        dropped_strata: dropped,
    }
}
