//! Ground-truth market generator: a one-factor plus block model with
//! scheduled regimes, used in place of a vendor panel.

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use super::panel::{AssetKind, ReturnPanel};
use crate::error::{Error, Result};

/// Weeks `start..end` scale every block and factor correlation by
/// `corr_scale` (capped so each asset's systematic share stays below 1) and
/// every volatility by `vol_scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Regime {
    pub start: usize,
    pub end: usize,
    pub corr_scale: f64,
    pub vol_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_bonds: usize,
    pub n_fx: usize,
    /// Contiguous blocks over the full universe.
    pub blocks: usize,
    pub weeks: usize,
    pub start: NaiveDate,
    pub intra_corr: [f64; 2],
    pub bond_loading: [f64; 2],
    pub fx_loading: [f64; 2],
    /// Annualized.
    pub bond_vol: [f64; 2],
    pub fx_vol: [f64; 2],
    pub bond_yield: [f64; 2],
    pub fx_carry: [f64; 2],
    /// Annualized stdev of the expected-return noise.
    pub er_noise: f64,
    /// Weekly AR(1) coefficient of the expected-return noise.
    pub er_persistence: f64,
    /// Student-t degrees of freedom for shocks; `None` for Gaussian.
    pub tail_dof: Option<f64>,
    pub regimes: Vec<Regime>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_bonds: 12,
            n_fx: 4,
            blocks: 4,
            weeks: 780,
            start: NaiveDate::from_ymd_opt(2007, 4, 6).expect("valid date"),
            intra_corr: [0.35, 0.65],
            bond_loading: [0.3, 0.6],
            fx_loading: [-0.35, 0.05],
            bond_vol: [0.03, 0.09],
            fx_vol: [0.07, 0.12],
            bond_yield: [0.01, 0.05],
            fx_carry: [-0.02, 0.02],
            er_noise: 0.004,
            er_persistence: 0.98,
            tail_dof: Some(6.0),
            regimes: vec![
                Regime {
                    start: 70,
                    end: 130,
                    corr_scale: 1.4,
                    vol_scale: 1.8,
                },
                Regime {
                    start: 400,
                    end: 440,
                    corr_scale: 1.2,
                    vol_scale: 1.3,
                },
                Regime {
                    start: 650,
                    end: 700,
                    corr_scale: 0.7,
                    vol_scale: 0.9,
                },
            ],
        }
    }
}

impl CorpusConfig {
    pub fn n(&self) -> usize {
        self.n_bonds + self.n_fx
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Err(Error::invalid("universe is empty"));
        }
        if self.blocks == 0 || self.blocks > n {
            return Err(Error::invalid(format!("blocks = {} must lie in 1..={n}", self.blocks)));
        }
        if self.weeks < 2 {
            return Err(Error::invalid("weeks must be at least 2"));
        }
        let ranges = [
            ("intra_corr", self.intra_corr),
            ("bond_loading", self.bond_loading),
            ("fx_loading", self.fx_loading),
            ("bond_vol", self.bond_vol),
            ("fx_vol", self.fx_vol),
            ("bond_yield", self.bond_yield),
            ("fx_carry", self.fx_carry),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo <= hi) {
                return Err(Error::invalid(format!("{name}: lower bound {lo} exceeds upper bound {hi}")));
            }
        }
        if self.intra_corr[0] < 0.0 || self.intra_corr[1] > 1.0 {
            return Err(Error::invalid("intra_corr must lie in [0, 1]"));
        }
        if self.bond_vol[0] < 0.0 || self.fx_vol[0] < 0.0 || self.er_noise < 0.0 {
            return Err(Error::invalid("volatilities must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.er_persistence) {
            return Err(Error::invalid("er_persistence must lie in [0, 1)"));
        }
        if let Some(dof) = self.tail_dof {
            if !(dof > 2.0) {
                return Err(Error::invalid("tail_dof must exceed 2"));
            }
        }
        for r in &self.regimes {
            if r.start >= r.end || r.corr_scale < 0.0 || r.vol_scale < 0.0 {
                return Err(Error::invalid(format!("bad regime {r:?}")));
            }
        }
        Ok(())
    }
}

fn block_of(i: usize, n: usize, k: usize) -> usize {
    i * k / n
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Unit-variance shock source.
struct Shocks {
    t: Option<(StudentT<f64>, f64)>,
}

impl Shocks {
    fn new(dof: Option<f64>) -> Self {
        Self {
            t: dof.map(|v| (StudentT::new(v).expect("dof validated"), ((v - 2.0) / v).sqrt())),
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match &self.t {
            Some((dist, scale)) => dist.sample(rng) * scale,
            None => StandardNormal.sample(rng),
        }
    }
}

/// Weekly return panel. Deterministic given `(cfg, seed)`.
pub fn synth_corpus(cfg: &CorpusConfig, seed: u64) -> Result<ReturnPanel> {
    cfg.validate()?;
    let n = cfg.n();
    let k = cfg.blocks;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let kinds: Vec<AssetKind> = (0..n)
        .map(|i| if i < cfg.n_bonds { AssetKind::Bond } else { AssetKind::Fx })
        .collect();
    let ids: Vec<String> = (0..n)
        .map(|i| match kinds[i] {
            AssetKind::Bond => format!("BOND{:02}", i + 1),
            AssetKind::Fx => format!("FX{:02}", i - cfg.n_bonds + 1),
        })
        .collect();

    let block_corr: Vec<f64> = (0..k).map(|_| uniform(&mut rng, cfg.intra_corr)).collect();
    let mut loading = vec![0.0; n];
    let mut vol = vec![0.0; n];
    let mut base = vec![0.0; n];
    for i in 0..n {
        let (l, v, y) = match kinds[i] {
            AssetKind::Bond => (cfg.bond_loading, cfg.bond_vol, cfg.bond_yield),
            AssetKind::Fx => (cfg.fx_loading, cfg.fx_vol, cfg.fx_carry),
        };
        loading[i] = uniform(&mut rng, l);
        // riskier assets carry higher yields
        let u: f64 = rng.random();
        let w: f64 = rng.random();
        vol[i] = v[0] + (v[1] - v[0]) * u;
        base[i] = y[0] + (y[1] - y[0]) * (0.7 * u + 0.3 * w);
    }

    let shocks = Shocks::new(cfg.tail_dof);
    let noise_sd = cfg.er_noise * (1.0 - cfg.er_persistence * cfg.er_persistence).sqrt();
    let mut er_state: Vec<f64> = (0..n)
        .map(|_| cfg.er_noise * gauss(&mut rng))
        .collect();

    let mut returns = Vec::with_capacity(cfg.weeks * n);
    let mut expected = Vec::with_capacity(cfg.weeks * n);
    let mut block_shock = vec![0.0; k];
    for week in 0..cfg.weeks {
        let (cs, vs) = cfg
            .regimes
            .iter()
            .find(|r| (r.start..r.end).contains(&week))
            .map_or((1.0, 1.0), |r| (r.corr_scale, r.vol_scale));

        for i in 0..n {
            er_state[i] = cfg.er_persistence * er_state[i] + noise_sd * gauss(&mut rng);
            expected.push(base[i] + er_state[i]);
        }

        let market = shocks.draw(&mut rng);
        for b in block_shock.iter_mut() {
            *b = shocks.draw(&mut rng);
        }
        for i in 0..n {
            let rho = block_corr[block_of(i, n, k)];
            let systematic = loading[i] * loading[i] + rho;
            let s = if systematic > 0.0 { cs.min(0.98 / systematic) } else { cs };
            let beta = loading[i] * s.sqrt();
            let rho_s = rho * s;
            let idio = (1.0 - beta * beta - rho_s).max(0.0).sqrt();
            let z = beta * market + rho_s.sqrt() * block_shock[block_of(i, n, k)] + idio * shocks.draw(&mut rng);
            let weekly_vol = vol[i] * vs / 52f64.sqrt();
            returns.push(expected[week * n + i] / 52.0 + weekly_vol * z);
        }
    }

    let dates = (0..cfg.weeks).map(|t| cfg.start + Duration::weeks(t as i64)).collect();
    ReturnPanel::new(ids, kinds, dates, returns, expected)
}
