use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::Arc;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssetKind {
    Bond,
    Fx,
}

impl AssetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AssetKind::Bond => "bond",
            AssetKind::Fx => "fx",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "bond" => Some(AssetKind::Bond),
            "fx" => Some(AssetKind::Fx),
            _ => None,
        }
    }
}

/// Weekly total returns and 1-year expected returns on a uniform weekly grid.
/// Values are stored date-major: entry `t * n + i` is asset `i` at date `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReturnPanel {
    ids: Arc<[String]>,
    kinds: Vec<AssetKind>,
    dates: Vec<NaiveDate>,
    returns: Vec<f64>,
    expected: Vec<f64>,
}

impl ReturnPanel {
    pub fn new(
        ids: Vec<String>,
        kinds: Vec<AssetKind>,
        dates: Vec<NaiveDate>,
        returns: Vec<f64>,
        expected: Vec<f64>,
    ) -> Result<Self> {
        let n = ids.len();
        if n == 0 || kinds.len() != n {
            return Err(Error::invalid(format!("{} ids but {} kinds", n, kinds.len())));
        }
        let unique: BTreeSet<&String> = ids.iter().collect();
        if unique.len() != n {
            return Err(Error::invalid("duplicate asset id"));
        }
        if let Some(pos) = kinds.windows(2).position(|w| w[0] == AssetKind::Fx && w[1] == AssetKind::Bond) {
            return Err(Error::invalid(format!("bond `{}` listed after an fx asset", ids[pos + 1])));
        }
        if let Some(w) = dates.windows(2).find(|w| w[1] - w[0] != Duration::weeks(1)) {
            return Err(Error::invalid(format!("dates {} and {} are not one week apart", w[0], w[1])));
        }
        if returns.len() != n * dates.len() || expected.len() != n * dates.len() {
            return Err(Error::invalid("series length does not match dates x assets"));
        }
        if let Some(k) = returns.iter().chain(&expected).position(|v| !v.is_finite()) {
            let k = k % returns.len();
            return Err(Error::invalid(format!(
                "non-finite value for `{}` at {}",
                ids[k % n],
                dates[k / n]
            )));
        }
        Ok(Self {
            ids: ids.into(),
            kinds,
            dates,
            returns,
            expected,
        })
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn ids(&self) -> &Arc<[String]> {
        &self.ids
    }

    pub fn kinds(&self) -> &[AssetKind] {
        &self.kinds
    }

    pub fn bond_count(&self) -> usize {
        self.kinds.iter().filter(|k| **k == AssetKind::Bond).count()
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn returns_at(&self, t: usize) -> &[f64] {
        let n = self.n();
        &self.returns[t * n..(t + 1) * n]
    }

    pub fn expected_at(&self, t: usize) -> &[f64] {
        let n = self.n();
        &self.expected[t * n..(t + 1) * n]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|a| a == id)
    }

    /// Rows with `from <= date <= to`.
    pub fn slice_dates(&self, from: Option<NaiveDate>, to: Option<NaiveDate>) -> Result<Self> {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&t| from.is_none_or(|f| self.dates[t] >= f) && to.is_none_or(|e| self.dates[t] <= e))
            .collect();
        let n = self.n();
        let mut returns = Vec::with_capacity(keep.len() * n);
        let mut expected = Vec::with_capacity(keep.len() * n);
        for &t in &keep {
            returns.extend_from_slice(self.returns_at(t));
            expected.extend_from_slice(self.expected_at(t));
        }
        Ok(Self {
            ids: self.ids.clone(),
            kinds: self.kinds.clone(),
            dates: keep.iter().map(|&t| self.dates[t]).collect(),
            returns,
            expected,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["date", "asset_id", "kind", "weekly_return", "expected_return"])?;
        for t in 0..self.len() {
            let date = self.dates[t].to_string();
            for i in 0..self.n() {
                w.write_record([
                    date.as_str(),
                    &self.ids[i],
                    self.kinds[i].as_str(),
                    &format!("{:?}", self.returns_at(t)[i]),
                    &format!("{:?}", self.expected_at(t)[i]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

const COLUMNS: [&str; 5] = ["date", "asset_id", "kind", "weekly_return", "expected_return"];

/// Reads a long-format return file. Assets come out bond segment first, each
/// segment in order of first appearance.
pub fn ingest_returns(path: &Path) -> Result<ReturnPanel> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header = rdr.headers()?.clone();
    let col: Vec<usize> = COLUMNS
        .iter()
        .map(|c| {
            header
                .iter()
                .position(|h| h == *c)
                .ok_or_else(|| Error::invalid(format!("missing column `{c}`")))
        })
        .collect::<Result<_>>()?;

    let mut order: Vec<String> = Vec::new();
    let mut kind_of: HashMap<String, AssetKind> = HashMap::new();
    let mut cells: HashMap<(NaiveDate, String), (f64, f64)> = HashMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = line + 2;
        let field = |k: usize| rec.get(col[k]).unwrap_or("");
        let date = NaiveDate::parse_from_str(field(0), "%Y-%m-%d")
            .map_err(|_| Error::invalid(format!("row {row}, column `date`: bad date `{}`", field(0))))?;
        let id = field(1).to_string();
        let kind = AssetKind::parse(field(2))
            .ok_or_else(|| Error::invalid(format!("row {row}, column `kind`: expected bond or fx, got `{}`", field(2))))?;
        let num = |k: usize| -> Result<f64> {
            field(k).parse::<f64>().map_err(|_| {
                Error::invalid(format!("row {row}, column `{}`: cannot parse `{}` as a number", COLUMNS[k], field(k)))
            })
        };
        let (r, e) = (num(3)?, num(4)?);
        match kind_of.get(&id) {
            Some(k) if *k != kind => {
                return Err(Error::invalid(format!("row {row}: asset `{id}` declared as both bond and fx")));
            }
            Some(_) => {}
            None => {
                kind_of.insert(id.clone(), kind);
                order.push(id.clone());
            }
        }
        if cells.insert((date, id.clone()), (r, e)).is_some() {
            return Err(Error::invalid(format!("row {row}: duplicate entry for asset `{id}` on {date}")));
        }
    }
    if cells.is_empty() {
        return Err(Error::invalid("no data rows"));
    }

    let mut ids: Vec<String> = order.iter().filter(|a| kind_of[*a] == AssetKind::Bond).cloned().collect();
    ids.extend(order.iter().filter(|a| kind_of[*a] == AssetKind::Fx).cloned());
    let kinds: Vec<AssetKind> = ids.iter().map(|a| kind_of[a]).collect();

    let seen: BTreeSet<NaiveDate> = cells.keys().map(|(d, _)| *d).collect();
    let first = *seen.iter().next().expect("non-empty");
    let last = *seen.iter().next_back().expect("non-empty");
    let off_grid: Vec<String> = seen
        .iter()
        .filter(|d| (**d - first).num_days() % 7 != 0)
        .map(|d| d.to_string())
        .collect();
    if !off_grid.is_empty() {
        return Err(Error::invalid(format!("dates off the weekly grid: {}", off_grid.join(", "))));
    }
    let mut dates = Vec::new();
    let mut d = first;
    while d <= last {
        dates.push(d);
        d += Duration::weeks(1);
    }

    let mut gaps = Vec::new();
    let mut returns = Vec::with_capacity(dates.len() * ids.len());
    let mut expected = Vec::with_capacity(dates.len() * ids.len());
    for d in &dates {
        for id in &ids {
            match cells.get(&(*d, id.clone())) {
                Some(&(r, e)) => {
                    returns.push(r);
                    expected.push(e);
                }
                None => {
                    gaps.push(format!("{id}@{d}"));
                    returns.push(f64::NAN);
                    expected.push(f64::NAN);
                }
            }
        }
    }
    if !gaps.is_empty() {
        let shown: Vec<&str> = gaps.iter().take(20).map(String::as_str).collect();
        let more = if gaps.len() > 20 { format!(" and {} more", gaps.len() - 20) } else { String::new() };
        return Err(Error::invalid(format!("missing observations: {}{more}", shown.join(", "))));
    }
    ReturnPanel::new(ids, kinds, dates, returns, expected)
}
