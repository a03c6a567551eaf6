//! Simulation sets: forward-return rows (FR) or multivariate-normal draws
//! per covariance matrix (MV).

use std::path::Path;
use std::sync::{Arc, OnceLock};

use fixsynth_tensor::{io as weights_io, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::market::MarketSnapshot;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Provenance {
    Empirical,
    Synthetic,
    Combined,
}

impl Provenance {
    pub const ALL: [Provenance; 3] = [Provenance::Empirical, Provenance::Synthetic, Provenance::Combined];

    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Empirical => "Empirical",
            Provenance::Synthetic => "Synthetic",
            Provenance::Combined => "Combined",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SimKind {
    #[serde(rename = "FR")]
    Fr,
    #[serde(rename = "MV")]
    Mv,
}

impl SimKind {
    pub const ALL: [SimKind; 2] = [SimKind::Fr, SimKind::Mv];

    pub fn as_str(self) -> &'static str {
        match self {
            SimKind::Fr => "FR",
            SimKind::Mv => "MV",
        }
    }
}

/// `rows x m` simulated 1-month returns plus mean expected returns.
#[derive(Debug)]
pub struct SimulationSet {
    rows: usize,
    returns: Vec<f64>,
    mu: Vec<f64>,
    ids: Arc<[String]>,
    pub label: Provenance,
    pub kind: SimKind,
    gram: OnceLock<Vec<f64>>,
}

impl Clone for SimulationSet {
    fn clone(&self) -> Self {
        Self {
            rows: self.rows,
            returns: self.returns.clone(),
            mu: self.mu.clone(),
            ids: self.ids.clone(),
            label: self.label,
            kind: self.kind,
            gram: OnceLock::new(),
        }
    }
}

impl PartialEq for SimulationSet {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows
            && self.returns == other.returns
            && self.mu == other.mu
            && self.ids == other.ids
            && self.label == other.label
            && self.kind == other.kind
    }
}

impl SimulationSet {
    pub fn new(
        ids: Arc<[String]>,
        returns: Vec<f64>,
        mu: Vec<f64>,
        label: Provenance,
        kind: SimKind,
    ) -> Result<Self> {
        let m = ids.len();
        if m == 0 || mu.len() != m || returns.is_empty() || returns.len() % m != 0 {
            return Err(Error::invalid(format!(
                "simulation set with {m} assets, {} means and {} values",
                mu.len(),
                returns.len()
            )));
        }
        Ok(Self {
            rows: returns.len() / m,
            returns,
            mu,
            ids,
            label,
            kind,
            gram: OnceLock::new(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn m(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &Arc<[String]> {
        &self.ids
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn returns(&self) -> &[f64] {
        &self.returns
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let m = self.m();
        &self.returns[r * m..(r + 1) * m]
    }

    /// `R^T R / rows`, computed once.
    pub fn gram(&self) -> &[f64] {
        self.gram.get_or_init(|| {
            let m = self.m();
            let mut g = vec![0.0; m * m];
            for r in 0..self.rows {
                let x = self.row(r);
                for i in 0..m {
                    let xi = x[i];
                    for j in i..m {
                        g[i * m + j] += xi * x[j];
                    }
                }
            }
            let scale = 1.0 / self.rows as f64;
            for i in 0..m {
                for j in i..m {
                    let v = g[i * m + j] * scale;
                    g[i * m + j] = v;
                    g[j * m + i] = v;
                }
            }
            g
        })
    }

    pub fn relabel(mut self, label: Provenance) -> Self {
        self.label = label;
        self
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({
            "rows": self.rows,
            "cols": self.m(),
            "label": self.label,
            "kind": self.kind,
            "ids": &self.ids[..],
            "mu": &self.mu,
        });
        let t = Tensor::new(vec![self.rows, self.m()], self.returns.clone())?;
        weights_io::write_weights(path, &header, &[("returns".into(), &t)])?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        #[derive(Deserialize)]
        struct Header {
            label: Provenance,
            kind: SimKind,
            ids: Vec<String>,
            mu: Vec<f64>,
        }
        let (meta, mut tensors) = weights_io::read_weights(path)?;
        let h: Header = serde_json::from_value(meta)?;
        let (_, t) = tensors.pop().ok_or_else(|| Error::invalid("simulation file has no data"))?;
        Self::new(h.ids.into(), t.into_data(), h.mu, h.label, h.kind)
    }
}

fn check_universe(snapshots: &[MarketSnapshot]) -> Result<Arc<[String]>> {
    let first = snapshots.first().ok_or_else(|| Error::invalid("no snapshots"))?;
    let ids = first.ids().clone();
    if let Some(k) = snapshots.iter().position(|s| s.ids()[..] != ids[..]) {
        return Err(Error::invalid(format!("snapshot {} has a different asset order", snapshots[k].label(k))));
    }
    Ok(ids)
}

fn mean_expected(snapshots: &[MarketSnapshot], m: usize) -> Vec<f64> {
    let mut mu = vec![0.0; m];
    for s in snapshots {
        for (a, e) in mu.iter_mut().zip(&s.expected) {
            *a += e;
        }
    }
    mu.iter_mut().for_each(|a| *a /= snapshots.len() as f64);
    mu
}

/// One row per snapshot: its forward-return vector.
pub fn fr_sims(snapshots: &[MarketSnapshot], label: Provenance) -> Result<SimulationSet> {
    let ids = check_universe(snapshots)?;
    let m = ids.len();
    let returns = snapshots.iter().flat_map(|s| s.forward.iter().copied()).collect();
    SimulationSet::new(ids, returns, mean_expected(snapshots, m), label, SimKind::Fr)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MvConfig {
    pub draws: usize,
    /// Years per simulated period.
    pub horizon: f64,
    pub seed: u64,
}

impl Default for MvConfig {
    fn default() -> Self {
        Self {
            draws: 10,
            horizon: 1.0 / 12.0,
            seed: 0,
        }
    }
}

/// Default jitter schedule, as multiples of `trace / n`.
pub const JITTER_SCHEDULE: [f64; 5] = [0.0, 1e-12, 1e-10, 1e-8, 1e-6];

#[derive(Clone, Debug, PartialEq)]
pub struct CholeskyFactor {
    /// Lower triangular, row-major.
    pub l: Vec<f64>,
    /// Jitter actually added to the diagonal.
    pub jitter: f64,
}

fn cholesky(n: usize, a: &[f64], jitter: f64, floor: f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j] + jitter;
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > floor) {
            return None;
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    Some(l)
}

/// Cholesky factor of `sigma + eps I`, trying each `schedule` entry (scaled
/// by `trace / n`) in turn. An all-zero matrix factors to zero.
pub fn cholesky_psd(n: usize, sigma: &[f64], schedule: &[f64]) -> Result<CholeskyFactor> {
    if sigma.len() != n * n {
        return Err(Error::invalid(format!("expected {} entries, got {}", n * n, sigma.len())));
    }
    let scale = (0..n).map(|i| sigma[i * n + i]).sum::<f64>() / n.max(1) as f64;
    if scale == 0.0 && sigma.iter().all(|v| *v == 0.0) {
        return Ok(CholeskyFactor {
            l: vec![0.0; n * n],
            jitter: 0.0,
        });
    }
    // pivots this small relative to the mean variance signal rank deficiency
    let floor = 1e-14 * scale;
    let mut last = 0.0;
    for &mult in schedule {
        let eps = mult * scale;
        last = eps;
        if let Some(l) = cholesky(n, sigma, eps, floor) {
            return Ok(CholeskyFactor { l, jitter: eps });
        }
    }
    Err(Error::Cholesky {
        what: "matrix".into(),
        jitter: last,
    })
}

/// `diag(vol) C diag(vol) * horizon`.
pub fn covariance(s: &MarketSnapshot, horizon: f64) -> Vec<f64> {
    let n = s.n();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = s.vol[i] * s.corr.get(i, j) * s.vol[j] * horizon;
        }
    }
    out
}

/// Zero-mean normal draws; each `(seed, snapshot, draw)` has its own stream.
pub fn mv_sims(snapshots: &[MarketSnapshot], cfg: &MvConfig, label: Provenance) -> Result<SimulationSet> {
    if cfg.draws == 0 || !(cfg.horizon > 0.0) {
        return Err(Error::invalid("mv config needs draws >= 1 and horizon > 0"));
    }
    let ids = check_universe(snapshots)?;
    let m = ids.len();
    let blocks: Vec<Vec<f64>> = snapshots
        .par_iter()
        .enumerate()
        .map(|(k, s)| {
            let sigma = covariance(s, cfg.horizon);
            let factor = cholesky_psd(m, &sigma, &JITTER_SCHEDULE).map_err(|e| match e {
                Error::Cholesky { jitter, .. } => Error::Cholesky {
                    what: format!("snapshot {}", s.label(k)),
                    jitter,
                },
                other => other,
            })?;
            let stream = derive_seed(cfg.seed, k as u64);
            let mut out = vec![0.0; cfg.draws * m];
            let mut z = vec![0.0; m];
            for d in 0..cfg.draws {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(stream, d as u64));
                for zi in z.iter_mut() {
                    *zi = StandardNormal.sample(&mut rng);
                }
                let row = &mut out[d * m..(d + 1) * m];
                for i in 0..m {
                    row[i] = (0..=i).map(|j| factor.l[i * m + j] * z[j]).sum();
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    SimulationSet::new(ids, blocks.concat(), mean_expected(snapshots, m), label, SimKind::Mv)
}

/// Row concatenation; `mu` is the row-weighted mean.
pub fn combine(sets: &[&SimulationSet]) -> Result<SimulationSet> {
    let first = sets.first().ok_or_else(|| Error::invalid("nothing to combine"))?;
    for s in sets {
        if s.ids[..] != first.ids[..] {
            return Err(Error::invalid("simulation sets cover different universes"));
        }
        if s.kind != first.kind {
            return Err(Error::invalid(format!(
                "cannot combine {} with {} simulations",
                first.kind.as_str(),
                s.kind.as_str()
            )));
        }
    }
    let m = first.m();
    let total: usize = sets.iter().map(|s| s.rows).sum();
    let mut mu = vec![0.0; m];
    let mut returns = Vec::with_capacity(total * m);
    for s in sets {
        for (a, v) in mu.iter_mut().zip(&s.mu) {
            *a += s.rows as f64 * v;
        }
        returns.extend_from_slice(&s.returns);
    }
    mu.iter_mut().for_each(|a| *a /= total as f64);
    SimulationSet::new(first.ids.clone(), returns, mu, Provenance::Combined, first.kind)
}
