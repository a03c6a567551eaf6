use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corr::{CorrelationMatrix, NearestConfig};
use super::panel::ReturnPanel;
use crate::error::{Error, Result};
use crate::linalg;

pub const WEEKS_PER_YEAR: f64 = 52.0;

/// One dated observation of the market. Synthetic snapshots carry no date.
#[derive(Clone, Debug, PartialEq)]
pub struct MarketSnapshot {
    pub date: Option<NaiveDate>,
    pub corr: CorrelationMatrix,
    /// Annualized.
    pub vol: Vec<f64>,
    /// 1-year expected returns, decimal per year.
    pub expected: Vec<f64>,
    /// Realized return over the following horizon.
    pub forward: Vec<f64>,
}

impl MarketSnapshot {
    pub fn new(
        date: Option<NaiveDate>,
        corr: CorrelationMatrix,
        vol: Vec<f64>,
        expected: Vec<f64>,
        forward: Vec<f64>,
    ) -> Result<Self> {
        let n = corr.n();
        if vol.len() != n || expected.len() != n || forward.len() != n {
            return Err(Error::invalid(format!(
                "vector lengths {}/{}/{} do not match matrix size {n}",
                vol.len(),
                expected.len(),
                forward.len()
            )));
        }
        if let Some(i) = vol.iter().position(|v| !(*v >= 0.0)) {
            return Err(Error::invalid(format!("volatility of `{}` is {}", corr.ids()[i], vol[i])));
        }
        Ok(Self {
            date,
            corr,
            vol,
            expected,
            forward,
        })
    }

    pub fn n(&self) -> usize {
        self.corr.n()
    }

    pub fn ids(&self) -> &Arc<[String]> {
        self.corr.ids()
    }

    /// Date if present, otherwise `#index`.
    pub fn label(&self, index: usize) -> String {
        match self.date {
            Some(d) => d.to_string(),
            None => format!("#{index}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnapshotConfig {
    pub window: usize,
    pub horizon: usize,
}

impl Default for SnapshotConfig {
    fn default() -> Self {
        Self { window: 52, horizon: 4 }
    }
}

/// Rolling-window snapshots. The snapshot dated `t` uses returns
/// `t - window + 1 ..= t`, the expected returns at `t`, and the compounded
/// returns over `t + 1 ..= t + horizon`.
pub fn build_snapshots(panel: &ReturnPanel, cfg: &SnapshotConfig) -> Result<Vec<MarketSnapshot>> {
    if cfg.window < 2 || cfg.horizon < 1 {
        return Err(Error::invalid("window must be at least 2 and horizon at least 1"));
    }
    if panel.len() < cfg.window + cfg.horizon {
        return Err(Error::invalid(format!(
            "panel has {} dates, need at least {}",
            panel.len(),
            cfg.window + cfg.horizon
        )));
    }
    let ends: Vec<usize> = (cfg.window - 1..panel.len() - cfg.horizon).collect();
    ends.par_iter().map(|&t| snapshot_at(panel, t, cfg)).collect()
}

fn snapshot_at(panel: &ReturnPanel, t: usize, cfg: &SnapshotConfig) -> Result<MarketSnapshot> {
    let n = panel.n();
    let start = t + 1 - cfg.window;
    let series: Vec<Vec<f64>> = (0..n)
        .map(|i| (start..=t).map(|s| panel.returns_at(s)[i]).collect())
        .collect();
    let date = panel.dates()[t];

    let mut vol = vec![0.0; n];
    for i in 0..n {
        let sd = linalg::sample_std(&series[i]);
        if sd == 0.0 {
            return Err(Error::ZeroVariance(format!(
                "asset `{}` has constant returns in the window ending {date}",
                panel.ids()[i]
            )));
        }
        vol[i] = sd * WEEKS_PER_YEAR.sqrt();
    }

    let mut raw = vec![0.0; n * n];
    for i in 0..n {
        raw[i * n + i] = 1.0;
        for j in i + 1..n {
            let r = linalg::pearson(&series[i], &series[j]).expect("variances checked above");
            raw[i * n + j] = r;
            raw[j * n + i] = r;
        }
    }
    let corr = match CorrelationMatrix::new(panel.ids().clone(), raw.clone()) {
        Ok(c) => c,
        Err(_) => CorrelationMatrix::repair(panel.ids().clone(), &raw, &NearestConfig::default())?,
    };

    let forward = (0..n)
        .map(|i| (t + 1..=t + cfg.horizon).map(|s| 1.0 + panel.returns_at(s)[i]).product::<f64>() - 1.0)
        .collect();
    MarketSnapshot::new(Some(date), corr, vol, panel.expected_at(t).to_vec(), forward)
}

/// JSON-lines record. Matrix-only records (GAN samples) omit the vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<NaiveDate>,
    pub ids: Vec<String>,
    /// Row-major.
    pub matrix: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vol: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forward: Option<Vec<f64>>,
}

impl From<&MarketSnapshot> for SnapshotRecord {
    fn from(s: &MarketSnapshot) -> Self {
        Self {
            date: s.date,
            ids: s.ids().to_vec(),
            matrix: s.corr.data().to_vec(),
            vol: Some(s.vol.clone()),
            expected: Some(s.expected.clone()),
            forward: Some(s.forward.clone()),
        }
    }
}

impl From<&CorrelationMatrix> for SnapshotRecord {
    fn from(c: &CorrelationMatrix) -> Self {
        Self {
            date: None,
            ids: c.ids().to_vec(),
            matrix: c.data().to_vec(),
            vol: None,
            expected: None,
            forward: None,
        }
    }
}

pub fn write_jsonl(path: &Path, records: impl IntoIterator<Item = SnapshotRecord>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SnapshotRecord>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let mut out = Vec::new();
    for (k, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SnapshotRecord = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("{}: line {}: {e}", path.display(), k + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Converts records to validated matrices sharing one id list.
pub fn records_to_matrices(records: &[SnapshotRecord]) -> Result<Vec<CorrelationMatrix>> {
    let Some(first) = records.first() else {
        return Ok(Vec::new());
    };
    let ids: Arc<[String]> = first.ids.clone().into();
    records
        .iter()
        .enumerate()
        .map(|(k, r)| {
            if r.ids[..] != ids[..] {
                return Err(Error::invalid(format!("record {k} has a different asset order")));
            }
            CorrelationMatrix::new(ids.clone(), r.matrix.clone())
                .map_err(|e| Error::invalid(format!("record {k}: {e}")))
        })
        .collect()
}

/// Converts full records to snapshots sharing one id list.
pub fn records_to_snapshots(records: &[SnapshotRecord]) -> Result<Vec<MarketSnapshot>> {
    let matrices = records_to_matrices(records)?;
    records
        .iter()
        .zip(matrices)
        .enumerate()
        .map(|(k, (r, corr))| {
            let missing = || Error::invalid(format!("record {k} lacks attribute vectors"));
            MarketSnapshot::new(
                r.date,
                corr,
                r.vol.clone().ok_or_else(missing)?,
                r.expected.clone().ok_or_else(missing)?,
                r.forward.clone().ok_or_else(missing)?,
            )
        })
        .collect()
}
