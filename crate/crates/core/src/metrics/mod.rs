//! Realism metrics for correlation matrices and their summaries.

mod linkage;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use linkage::{
    condensed, cophenetic_corr, linkage_from_distance, linkage_matrix, LinkageMethod, LinkageTree, Merge,
};

use crate::error::{Error, Result};
use crate::linalg;
use crate::market::CorrelationMatrix;

/// Mean of the strictly upper triangle.
pub fn mean_correl(c: &CorrelationMatrix) -> Result<f64> {
    let n = c.n();
    if n < 2 {
        return Err(Error::invalid("mean correlation needs at least 2 assets"));
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += c.get(i, j);
        }
    }
    Ok(sum / (n * (n - 1) / 2) as f64)
}

/// Gini coefficient of a spectrum with negative values clamped to 0.
pub fn gini(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().map(|x| x.max(0.0)).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let total: f64 = v.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    // sum_ij |a_i - a_j| = 2 sum_i (2i - n - 1) a_(i) over 1-based ranks
    let weighted: f64 = v.iter().enumerate().map(|(i, x)| (2.0 * (i as f64 + 1.0) - n - 1.0) * x).sum();
    weighted / (n * total)
}

pub fn eigen_gini(c: &CorrelationMatrix) -> f64 {
    gini(&c.eigenvalues())
}

/// `n` times the absolute negative mass of the unit top eigenvector,
/// oriented so its entries sum to a non-negative value.
pub fn perron_frob_sum_neg(c: &CorrelationMatrix) -> f64 {
    let n = c.n();
    let (_, vecs) = linalg::eigh(n, c.data());
    let top: Vec<f64> = (0..n).map(|i| vecs[i * n + n - 1]).collect();
    let sign = if top.iter().sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
    n as f64 * top.iter().map(|v| (sign * v).min(0.0).abs()).sum::<f64>()
}

/// Minus the OLS slope of `log lambda_k` on `log k` over ranks `k >= 2`,
/// keeping eigenvalues above `1e-10`.
pub fn power_eigen_exponent(c: &CorrelationMatrix) -> Result<f64> {
    if c.n() < 4 {
        return Err(Error::invalid("power exponent needs n >= 4"));
    }
    let mut vals = c.eigenvalues();
    vals.reverse();
    let pts: Vec<(f64, f64)> = vals
        .iter()
        .take_while(|v| **v > 1e-10)
        .enumerate()
        .skip(1)
        .map(|(k, v)| (((k + 1) as f64).ln(), v.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::invalid(format!("only {} usable eigenvalues beyond rank 1", pts.len())));
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    Ok(0.0 - sxy / sxx)
}

pub const METRIC_NAMES: [&str; 6] = [
    "mean_correl",
    "eigen_gini",
    "coph_corr_single",
    "coph_corr_ward",
    "perron_frob_sum_neg",
    "power_eigen_exponent",
];

/// Metrics of one matrix. Entries are `None` when undefined (degenerate
/// cophenetic distances, too few eigenvalues).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    pub mean_correl: f64,
    pub eigen_gini: f64,
    pub coph_corr_single: Option<f64>,
    pub coph_corr_ward: Option<f64>,
    pub perron_frob_sum_neg: f64,
    pub power_eigen_exponent: Option<f64>,
}

impl MetricVector {
    pub fn compute(c: &CorrelationMatrix) -> Result<Self> {
        let defined = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::ZeroVariance(_)) | Err(Error::Invalid(_)) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(Self {
            mean_correl: mean_correl(c)?,
            eigen_gini: eigen_gini(c),
            coph_corr_single: defined(cophenetic_corr(c, LinkageMethod::Single))?,
            coph_corr_ward: defined(cophenetic_corr(c, LinkageMethod::Ward))?,
            perron_frob_sum_neg: perron_frob_sum_neg(c),
            power_eigen_exponent: defined(power_eigen_exponent(c))?,
        })
    }

    pub fn values(&self) -> [Option<f64>; 6] {
        [
            Some(self.mean_correl),
            Some(self.eigen_gini),
            self.coph_corr_single,
            self.coph_corr_ward,
            Some(self.perron_frob_sum_neg),
            self.power_eigen_exponent,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    /// Indexed like [`METRIC_NAMES`].
    pub mean: [f64; 6],
    /// Sample standard deviation; 0 when fewer than two values.
    pub std: [f64; 6],
    /// Matrices where the metric was undefined and left out.
    pub skipped: [usize; 6],
}

impl MetricSummary {
    pub fn get(&self, name: &str) -> Option<(f64, f64)> {
        METRIC_NAMES.iter().position(|m| *m == name).map(|k| (self.mean[k], self.std[k]))
    }
}

pub fn summarize(matrices: &[CorrelationMatrix]) -> Result<MetricSummary> {
    if matrices.is_empty() {
        return Err(Error::invalid("cannot summarize an empty collection"));
    }
    let vectors: Vec<MetricVector> = matrices.par_iter().map(MetricVector::compute).collect::<Result<_>>()?;
    summarize_vectors(&vectors)
}

pub fn summarize_vectors(vectors: &[MetricVector]) -> Result<MetricSummary> {
    if vectors.is_empty() {
        return Err(Error::invalid("cannot summarize an empty collection"));
    }
    let mut mean = [0.0; 6];
    let mut std = [0.0; 6];
    let mut skipped = [0; 6];
    for k in 0..6 {
        let vals: Vec<f64> = vectors.iter().filter_map(|v| v.values()[k]).collect();
        skipped[k] = vectors.len() - vals.len();
        if vals.is_empty() {
            mean[k] = f64::NAN;
            std[k] = f64::NAN;
            continue;
        }
        mean[k] = linalg::mean(&vals);
        std[k] = if vals.len() > 1 { linalg::sample_std(&vals) } else { 0.0 };
    }
    Ok(MetricSummary {
        count: vectors.len(),
        mean,
        std,
        skipped,
    })
}

/// One row per dataset label, a mean and std column per metric.
pub fn write_table1(path: &Path, rows: &[(String, MetricSummary)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["dataset".to_string(), "count".to_string()];
    for m in METRIC_NAMES {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    header.push("coph_skipped".to_string());
    w.write_record(&header)?;
    for (label, s) in rows {
        let mut rec = vec![label.clone(), s.count.to_string()];
        for k in 0..6 {
            rec.push(format!("{:.6}", s.mean[k]));
            rec.push(format!("{:.6}", s.std[k]));
        }
        rec.push(s.skipped[2].max(s.skipped[3]).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
