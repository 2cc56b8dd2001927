//! Agreement statistics for bedside-versus-remote comparisons: Pearson
//! correlation, ICC, Cohen's kappa, relative errors, absolute-difference
//! buckets and the paired t-test.

pub mod records;
pub mod report;
pub mod special;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use records::{Arm, ExamRecord};
pub use report::{campaign_report, StudyReport};

use crate::phantom::Grade;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("too few observations: {n}, need at least {min}")]
    TooFew { n: usize, min: usize },
    #[error("degenerate variance")]
    DegenerateVariance,
    #[error("kappa undefined: chance agreement is 1")]
    UndefinedKappa,
    #[error("relative error undefined: bedside value is zero")]
    DivisionDegenerate,
    #[error("patients without both arms: {}", .0.join(", "))]
    UnpairedRecords(Vec<String>),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// One quantity measured by both arms, meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementPair {
    pub bedside: f64,
    pub remote: f64,
    #[serde(default)]
    pub site_id: String,
    #[serde(default)]
    pub patient_id: String,
}

impl MeasurementPair {
    pub fn new(bedside: f64, remote: f64) -> Self {
        MeasurementPair { bedside, remote, site_id: String::new(), patient_id: String::new() }
    }

    pub fn diff(&self) -> f64 {
        self.remote - self.bedside
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradePair {
    pub bedside: Grade,
    pub remote: Grade,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p_value: f64,
    pub n: usize,
}

fn mean(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = xs.clone().count() as f64;
    xs.sum::<f64>() / n
}

/// Sample Pearson correlation with a two-sided p-value from t(n - 2).
pub fn pearson_r(pairs: &[MeasurementPair]) -> Result<Correlation, StatsError> {
    let n = pairs.len();
    if n < 3 {
        return Err(StatsError::TooFew { n, min: 3 });
    }
    let mx = mean(pairs.iter().map(|p| p.bedside));
    let my = mean(pairs.iter().map(|p| p.remote));
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in pairs {
        let (dx, dy) = (p.bedside - mx, p.remote - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::DegenerateVariance);
    }
    let mut r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    // Exactly collinear data can land a few ulps short of 1.
    if 1.0 - r.abs() < 1e-14 {
        r = r.signum();
    }
    let df = (n - 2) as f64;
    let p_value = if r.abs() == 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        special::student_t_two_sided(t, df)
    };
    Ok(Correlation { r, p_value, n })
}

/// ICC(2,1): two-way random effects, absolute agreement, single rater.
pub fn icc_2_1(pairs: &[MeasurementPair]) -> Result<f64, StatsError> {
    let n = pairs.len();
    if n < 2 {
        return Err(StatsError::TooFew { n, min: 2 });
    }
    let k = 2.0;
    let nf = n as f64;
    let grand = pairs.iter().map(|p| p.bedside + p.remote).sum::<f64>() / (nf * k);
    let col = [
        pairs.iter().map(|p| p.bedside).sum::<f64>() / nf,
        pairs.iter().map(|p| p.remote).sum::<f64>() / nf,
    ];
    let mut ss_rows = 0.0;
    let mut ss_err = 0.0;
    for p in pairs {
        let row = (p.bedside + p.remote) / k;
        ss_rows += k * (row - grand).powi(2);
        for (v, c) in [(p.bedside, col[0]), (p.remote, col[1])] {
            ss_err += (v - row - c + grand).powi(2);
        }
    }
    let ss_cols = nf * col.iter().map(|c| (c - grand).powi(2)).sum::<f64>();
    let msr = ss_rows / (nf - 1.0);
    let msc = ss_cols / (k - 1.0);
    let mse = ss_err / ((nf - 1.0) * (k - 1.0));
    let denom = msr + (k - 1.0) * mse + k * (msc - mse) / nf;
    if denom == 0.0 {
        return Err(StatsError::DegenerateVariance);
    }
    Ok((msr - mse) / denom)
}

/// Disagreement weighting for kappa on ordered categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KappaWeights {
    /// Cohen's simple kappa: only exact agreement counts.
    Unweighted,
    /// 1 - |i - j| / (k - 1)
    Linear,
    /// 1 - ((i - j) / (k - 1))^2
    Quadratic,
}

impl KappaWeights {
    fn weight(self, i: usize, j: usize, k: usize) -> f64 {
        let d = i.abs_diff(j) as f64 / (k - 1) as f64;
        match self {
            KappaWeights::Unweighted => f64::from(u8::from(i == j)),
            KappaWeights::Linear => 1.0 - d,
            KappaWeights::Quadratic => 1.0 - d * d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    pub kappa: f64,
    /// Large-sample standard error (non-null).
    pub se: f64,
    pub ci95: (f64, f64),
    pub observed_agreement: f64,
    pub chance_agreement: f64,
}

/// Cohen's simple kappa of a k x k table (rows: first rater, columns: second).
pub fn cohen_kappa(table: &[Vec<f64>]) -> Result<Kappa, StatsError> {
    weighted_kappa(table, KappaWeights::Unweighted)
}

/// Kappa with agreement weights, and the Fleiss-Cohen-Everitt large-sample
/// standard error; the 95% interval is kappa ± 1.96 SE.
pub fn weighted_kappa(table: &[Vec<f64>], weights: KappaWeights) -> Result<Kappa, StatsError> {
    let k = table.len();
    if k < 2 || table.iter().any(|row| row.len() != k) {
        return Err(StatsError::InvalidInput("kappa needs a square table of size >= 2".into()));
    }
    if table.iter().flatten().any(|c| !(*c >= 0.0) || !c.is_finite()) {
        return Err(StatsError::InvalidInput("counts must be finite and non-negative".into()));
    }
    let total: f64 = table.iter().flatten().sum();
    if !(total > 0.0) {
        return Err(StatsError::TooFew { n: 0, min: 1 });
    }
    let p: Vec<Vec<f64>> = table.iter().map(|row| row.iter().map(|c| c / total).collect()).collect();
    let rows: Vec<f64> = p.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..k).map(|j| p.iter().map(|r| r[j]).sum()).collect();
    let w = |i, j| weights.weight(i, j, k);

    let (mut po, mut pe) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            po += w(i, j) * p[i][j];
            pe += w(i, j) * rows[i] * cols[j];
        }
    }
    if pe >= 1.0 {
        return Err(StatsError::UndefinedKappa);
    }
    let kappa = (po - pe) / (1.0 - pe);

    // Weighted marginal means of the agreement weights.
    let w_row: Vec<f64> = (0..k).map(|i| (0..k).map(|j| w(i, j) * cols[j]).sum()).collect();
    let w_col: Vec<f64> = (0..k).map(|j| (0..k).map(|i| w(i, j) * rows[i]).sum()).collect();
    let mut var = 0.0;
    for i in 0..k {
        for j in 0..k {
            var += p[i][j] * (w(i, j) - (w_row[i] + w_col[j]) * (1.0 - kappa)).powi(2);
        }
    }
    var -= (kappa - pe * (1.0 - kappa)).powi(2);
    let se = (var.max(0.0) / (total * (1.0 - pe).powi(2))).sqrt();
    Ok(Kappa {
        kappa,
        se,
        ci95: (kappa - 1.96 * se, kappa + 1.96 * se),
        observed_agreement: po,
        chance_agreement: pe,
    })
}

/// 3 x 3 confusion table over grades; rows bedside, columns remote.
pub fn grade_table(pairs: &[GradePair]) -> Vec<Vec<f64>> {
    let mut t = vec![vec![0.0; 3]; 3];
    for p in pairs {
        t[p.bedside.index()][p.remote.index()] += 1.0;
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeErrors {
    /// (remote - bedside) / bedside, in input order.
    pub errors: Vec<f64>,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl RelativeErrors {
    /// Fraction of errors with |e| < t.
    pub fn frac_below(&self, t: f64) -> f64 {
        if self.errors.is_empty() {
            return 0.0;
        }
        self.errors.iter().filter(|e| e.abs() < t).count() as f64 / self.errors.len() as f64
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

pub fn relative_errors(pairs: &[MeasurementPair]) -> Result<RelativeErrors, StatsError> {
    if pairs.is_empty() {
        return Err(StatsError::TooFew { n: 0, min: 1 });
    }
    let mut errors = Vec::with_capacity(pairs.len());
    for p in pairs {
        if p.bedside == 0.0 {
            return Err(StatsError::DivisionDegenerate);
        }
        errors.push((p.remote - p.bedside) / p.bedside);
    }
    let median = median(&errors).expect("non-empty");
    let min = errors.iter().copied().fold(f64::INFINITY, f64::min);
    let max = errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(RelativeErrors { errors, median, min, max })
}

/// Boundary slack, meters; absorbs float noise in differences of
/// millimetre-resolution values.
const BUCKET_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Buckets {
    /// Meters: the buckets are [0, cuts.0), [cuts.0, cuts.1], (cuts.1, inf).
    pub cuts: (f64, f64),
    pub counts: [usize; 3],
    pub percent: [f64; 3],
}

pub const DEFAULT_CUTS: (f64, f64) = (0.004, 0.010);

pub fn abs_diff_buckets(pairs: &[MeasurementPair], cuts: (f64, f64)) -> Buckets {
    let mut counts = [0usize; 3];
    for p in pairs {
        let d = p.diff().abs();
        let b = if d < cuts.0 - BUCKET_EPS {
            0
        } else if d <= cuts.1 + BUCKET_EPS {
            1
        } else {
            2
        };
        counts[b] += 1;
    }
    let n = pairs.len();
    let percent = counts.map(|c| if n == 0 { 0.0 } else { 100.0 * c as f64 / n as f64 });
    Buckets { cuts, counts, percent }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p_value: f64,
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub n: usize,
}

/// Paired t-test on d = remote - bedside, two-sided against t(n - 1).
pub fn paired_t_test(pairs: &[MeasurementPair]) -> Result<TTest, StatsError> {
    let n = pairs.len();
    if n < 2 {
        return Err(StatsError::TooFew { n, min: 2 });
    }
    let mean_diff = mean(pairs.iter().map(MeasurementPair::diff));
    let ss: f64 = pairs.iter().map(|p| (p.diff() - mean_diff).powi(2)).sum();
    if ss == 0.0 {
        return Err(StatsError::DegenerateVariance);
    }
    let sd_diff = (ss / (n - 1) as f64).sqrt();
    let t = mean_diff / (sd_diff / (n as f64).sqrt());
    let p_value = special::student_t_two_sided(t, (n - 1) as f64);
    Ok(TTest { t, p_value, mean_diff, sd_diff, n })
}
