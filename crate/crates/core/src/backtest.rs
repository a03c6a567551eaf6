//! Experiment grid, fixed-weight evaluation over a held-out panel, and the
//! paired comparison against the empirical variant.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocator::{build_problem, solve_qp, tev, Bounds, QpStatus, SolverConfig};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::linalg;
use crate::market::{AssetKind, MarketSnapshot, ReturnPanel};
use crate::simulation::{combine, fr_sims, mv_sims, MvConfig, Provenance, SimKind, SimulationSet};

/// Weeks per evaluation period.
pub const PERIOD_WEEKS: usize = 4;
pub const PERIODS_PER_YEAR: f64 = 12.0;
pub const MIN_TEST_PERIODS: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub targets_bps: Vec<u32>,
    pub kinds: Vec<SimKind>,
    pub mv: MvConfig,
    pub bounds: Bounds,
    pub solver: SolverConfig,
    /// Restrict to these benchmarks; all bonds when empty.
    pub benchmarks: Vec<String>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            targets_bps: (2..=10).map(|k| k * 10).collect(),
            kinds: SimKind::ALL.to_vec(),
            mv: MvConfig::default(),
            bounds: Bounds::default(),
            solver: SolverConfig::default(),
            benchmarks: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub benchmark: String,
    pub target_bps: u32,
    pub variant: Provenance,
    pub kind: SimKind,
    pub status: QpStatus,
    pub converged: bool,
    /// False when any variant of this (benchmark, target) cell failed.
    pub included: bool,
    pub weights: Vec<f64>,
    pub tev_bps: Option<f64>,
    pub excess_er_bps: Option<f64>,
    pub ratio: Option<f64>,
}

/// Returns of each asset compounded over consecutive non-overlapping
/// periods, plus the expected returns at each period start.
fn periods(panel: &ReturnPanel) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let count = panel.len() / PERIOD_WEEKS;
    if count < MIN_TEST_PERIODS {
        return Err(Error::invalid(format!(
            "test panel has {count} four-week periods, need at least {MIN_TEST_PERIODS}"
        )));
    }
    let n = panel.n();
    let mut realized = Vec::with_capacity(count);
    let mut expected = Vec::with_capacity(count);
    for p in 0..count {
        let start = p * PERIOD_WEEKS;
        let r = (0..n)
            .map(|i| (start..start + PERIOD_WEEKS).map(|t| 1.0 + panel.returns_at(t)[i]).product::<f64>() - 1.0)
            .collect();
        realized.push(r);
        expected.push(panel.expected_at(start).to_vec());
    }
    Ok((realized, expected))
}

/// Fixed-weight evaluation: TEV of period returns against the benchmark and
/// mean excess expected return over the period start dates, both in bps.
pub fn evaluate(weights: &[f64], test: &ReturnPanel, bench: usize) -> Result<(f64, f64)> {
    if weights.len() != test.n() || bench >= test.n() {
        return Err(Error::invalid("weights do not match the test universe"));
    }
    let (realized, expected) = periods(test)?;
    evaluate_periods(weights, &realized, &expected, bench)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn evaluate_periods(weights: &[f64], realized: &[Vec<f64>], expected: &[Vec<f64>], bench: usize) -> Result<(f64, f64)> {
    let port: Vec<f64> = realized.iter().map(|r| dot(weights, r)).collect();
    let bench_r: Vec<f64> = realized.iter().map(|r| r[bench]).collect();
    let excess: Vec<f64> = expected.iter().map(|e| dot(weights, e) - e[bench]).collect();
    Ok((tev(&port, &bench_r, PERIODS_PER_YEAR)?, linalg::mean(&excess) * 1e4))
}

/// The six simulation sets, keyed by (variant, kind).
pub fn build_sets(
    train: &[MarketSnapshot],
    synthetic: &[MarketSnapshot],
    kinds: &[SimKind],
    mv: &MvConfig,
) -> Result<BTreeMap<(Provenance, SimKind), SimulationSet>> {
    let mut out = BTreeMap::new();
    for &kind in kinds {
        let (emp, syn) = match kind {
            SimKind::Fr => (fr_sims(train, Provenance::Empirical)?, fr_sims(synthetic, Provenance::Synthetic)?),
            SimKind::Mv => {
                let emp_cfg = MvConfig {
                    seed: derive_seed(mv.seed, 1),
                    ..*mv
                };
                let syn_cfg = MvConfig {
                    seed: derive_seed(mv.seed, 2),
                    ..*mv
                };
                (
                    mv_sims(train, &emp_cfg, Provenance::Empirical)?,
                    mv_sims(synthetic, &syn_cfg, Provenance::Synthetic)?,
                )
            }
        };
        let comb = combine(&[&emp, &syn])?;
        out.insert((Provenance::Empirical, kind), emp);
        out.insert((Provenance::Synthetic, kind), syn);
        out.insert((Provenance::Combined, kind), comb);
    }
    Ok(out)
}

/// Solves and evaluates every bond benchmark x target x variant x kind.
pub fn run_grid(
    train: &[MarketSnapshot],
    synthetic: &[MarketSnapshot],
    test: &ReturnPanel,
    cfg: &GridConfig,
) -> Result<Vec<ExperimentResult>> {
    if test.is_empty() {
        return Err(Error::invalid("test panel is empty"));
    }
    let sets = build_sets(train, synthetic, &cfg.kinds, &cfg.mv)?;
    run_grid_on_sets(&sets, test.kinds(), test, cfg)
}

pub fn run_grid_on_sets(
    sets: &BTreeMap<(Provenance, SimKind), SimulationSet>,
    kinds: &[AssetKind],
    test: &ReturnPanel,
    cfg: &GridConfig,
) -> Result<Vec<ExperimentResult>> {
    let (realized, expected) = periods(test)?;
    let ids = test.ids();
    if let Some(s) = sets.values().find(|s| s.ids()[..] != ids[..]) {
        return Err(Error::invalid(format!(
            "{} {} simulations use a different universe than the test panel",
            s.label.as_str(),
            s.kind.as_str()
        )));
    }
    let benchmarks: Vec<usize> = if cfg.benchmarks.is_empty() {
        (0..ids.len()).filter(|&i| kinds[i] == AssetKind::Bond).collect()
    } else {
        cfg.benchmarks
            .iter()
            .map(|b| test.index_of(b).ok_or_else(|| Error::invalid(format!("unknown benchmark `{b}`"))))
            .collect::<Result<_>>()?
    };

    let mut cells = Vec::new();
    for &b in &benchmarks {
        for &t in &cfg.targets_bps {
            for &kind in &cfg.kinds {
                for variant in Provenance::ALL {
                    cells.push((b, t, variant, kind));
                }
            }
        }
    }
    let mut results: Vec<ExperimentResult> = cells
        .par_iter()
        .map(|&(b, t, variant, kind)| -> Result<ExperimentResult> {
            let set = &sets[&(variant, kind)];
            let problem = build_problem(set, kinds, &ids[b], t as f64 * 1e-4, &cfg.bounds)?;
            let sol = solve_qp(&problem, &cfg.solver)?;
            let converged = sol.status == QpStatus::Solved;
            let (tev_bps, excess) = if converged {
                let (v, e) = evaluate_periods(&sol.weights, &realized, &expected, b)?;
                (Some(v), Some(e))
            } else {
                (None, None)
            };
            let ratio = match (tev_bps, excess) {
                (Some(v), Some(e)) if v > 0.0 => Some(e / v),
                _ => None,
            };
            Ok(ExperimentResult {
                benchmark: ids[b].clone(),
                target_bps: t,
                variant,
                kind,
                status: sol.status,
                converged,
                included: true,
                weights: sol.weights,
                tev_bps,
                excess_er_bps: excess,
                ratio,
            })
        })
        .collect::<Result<_>>()?;

    apply_exclusions(&mut results);
    Ok(results)
}

/// A (benchmark, target) cell is dropped for every variant and kind when
/// any of its experiments lacks a ratio.
pub fn apply_exclusions(results: &mut [ExperimentResult]) {
    let failed: BTreeSet<(String, u32)> = results
        .iter()
        .filter(|r| r.ratio.is_none())
        .map(|r| (r.benchmark.clone(), r.target_bps))
        .collect();
    for r in results.iter_mut() {
        r.included = !failed.contains(&(r.benchmark.clone(), r.target_bps));
    }
}

/// Paired one-sided test of `variant > baseline` on `d = baseline - variant`.
/// Returns `(t, p)` with `p = P(T <= t)` under `n - 1` degrees of freedom.
pub fn paired_t_test(baseline: &[f64], variant: &[f64]) -> Result<(f64, f64)> {
    if baseline.len() != variant.len() || baseline.len() < 3 {
        return Err(Error::invalid(format!(
            "paired test needs two equal samples of size >= 3, got {} and {}",
            baseline.len(),
            variant.len()
        )));
    }
    let d: Vec<f64> = baseline.iter().zip(variant).map(|(b, v)| b - v).collect();
    let n = d.len() as f64;
    let sd = linalg::sample_std(&d);
    let mean = linalg::mean(&d);
    if !(sd > 1e-12 * mean.abs().max(f64::MIN_POSITIVE)) {
        return Err(Error::ZeroVariance("paired differences are constant".into()));
    }
    let t = mean / (sd / n.sqrt());
    Ok((t, student_t_cdf(t, n - 1.0)))
}

/// Lanczos approximation (g = 7, nine terms).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta `I_x(a, b)` by its hypergeometric power
/// series, switching to `1 - I_{1-x}(b, a)` above the mean.
pub fn incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    if x > (a + 1.0) / (a + b + 2.0) {
        return 1.0 - incomplete_beta(1.0 - x, b, a);
    }
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 0.0;
    while term > 1e-17 * sum && k < 1e6 {
        term *= x * (a + b + k) / (a + 1.0 + k);
        sum += term;
        k += 1.0;
    }
    let log_front = a * x.ln() + b * (1.0 - x).ln() - a.ln() - (ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b));
    log_front.exp() * sum
}

pub fn student_t_cdf(t: f64, dof: f64) -> f64 {
    let x = dof / (dof + t * t);
    let tail = 0.5 * incomplete_beta(x, 0.5 * dof, 0.5);
    if t > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub kind: SimKind,
    pub variant: Provenance,
    pub n_obs: usize,
    pub tev_bps: f64,
    pub excess_er_bps: f64,
    pub ratio_mean: f64,
    /// Against the empirical variant of the same kind; absent on that row.
    pub t_stat: Option<f64>,
    pub p_value: Option<f64>,
    pub ratio_min: f64,
    pub ratio_median: f64,
    pub ratio_max: f64,
    pub share_better: Option<f64>,
    pub wins: Option<usize>,
    pub ties: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    pub total_cells: usize,
    pub excluded_cells: usize,
}

fn median(sorted: &[f64]) -> f64 {
    let k = sorted.len();
    if k % 2 == 1 {
        sorted[k / 2]
    } else {
        0.5 * (sorted[k / 2 - 1] + sorted[k / 2])
    }
}

/// Aggregates included experiments per (kind, variant), pairing each
/// variant with the empirical variant cell by cell.
pub fn report(results: &[ExperimentResult]) -> Result<ComparisonReport> {
    let included: Vec<&ExperimentResult> = results.iter().filter(|r| r.included && r.ratio.is_some()).collect();
    if included.is_empty() {
        return Err(Error::invalid("no converged experiments to report"));
    }
    type Cell = (String, u32);
    let mut by_group: BTreeMap<(SimKind, Provenance), BTreeMap<Cell, &ExperimentResult>> = BTreeMap::new();
    for r in &included {
        by_group
            .entry((r.kind, r.variant))
            .or_default()
            .insert((r.benchmark.clone(), r.target_bps), r);
    }
    let kinds: BTreeSet<SimKind> = included.iter().map(|r| r.kind).collect();
    let mut rows = Vec::new();
    for kind in kinds {
        let Some(base) = by_group.get(&(kind, Provenance::Empirical)) else {
            return Err(Error::invalid(format!("no empirical experiments for {}", kind.as_str())));
        };
        for variant in Provenance::ALL {
            let Some(group) = by_group.get(&(kind, variant)) else {
                continue;
            };
            if group.keys().ne(base.keys()) {
                return Err(Error::invalid(format!(
                    "{} {} cells differ from the empirical cells",
                    kind.as_str(),
                    variant.as_str()
                )));
            }
            let ratios: Vec<f64> = group.values().map(|r| r.ratio.expect("filtered")).collect();
            let tevs: Vec<f64> = group.values().map(|r| r.tev_bps.expect("converged")).collect();
            let ers: Vec<f64> = group.values().map(|r| r.excess_er_bps.expect("converged")).collect();
            let mut sorted = ratios.clone();
            sorted.sort_by(f64::total_cmp);
            let (t_stat, p_value, share, wins, ties) = if variant == Provenance::Empirical {
                (None, None, None, None, None)
            } else {
                let base_ratios: Vec<f64> = base.values().map(|r| r.ratio.expect("filtered")).collect();
                let (t, p) = match paired_t_test(&base_ratios, &ratios) {
                    Ok((t, p)) => (Some(t), Some(p)),
                    Err(_) => (None, None),
                };
                let wins = ratios.iter().zip(&base_ratios).filter(|(v, b)| v > b).count();
                let ties = ratios.iter().zip(&base_ratios).filter(|(v, b)| v == b).count();
                (t, p, Some(wins as f64 / ratios.len() as f64), Some(wins), Some(ties))
            };
            rows.push(ComparisonRow {
                kind,
                variant,
                n_obs: ratios.len(),
                tev_bps: linalg::mean(&tevs),
                excess_er_bps: linalg::mean(&ers),
                ratio_mean: linalg::mean(&ratios),
                t_stat,
                p_value,
                ratio_min: sorted[0],
                ratio_median: median(&sorted),
                ratio_max: sorted[sorted.len() - 1],
                share_better: share,
                wins,
                ties,
            });
        }
    }
    let cells: BTreeSet<Cell> = results.iter().map(|r| (r.benchmark.clone(), r.target_bps)).collect();
    let kept: BTreeSet<Cell> = included.iter().map(|r| (r.benchmark.clone(), r.target_bps)).collect();
    Ok(ComparisonReport {
        rows,
        total_cells: cells.len(),
        excluded_cells: cells.len() - kept.len(),
    })
}

pub const TABLE4_COLUMNS: [&str; 12] = [
    "sim_kind",
    "variant",
    "n_obs",
    "tev_bps",
    "excess_er_bps",
    "ratio_mean",
    "t_stat",
    "p_value",
    "ratio_min",
    "ratio_median",
    "ratio_max",
    "share_ratio_gt_empirical",
];

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_default()
}

pub fn write_table4(path: &Path, rep: &ComparisonReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TABLE4_COLUMNS)?;
    for r in &rep.rows {
        w.write_record([
            r.kind.as_str().to_string(),
            r.variant.as_str().to_string(),
            r.n_obs.to_string(),
            format!("{:.4}", r.tev_bps),
            format!("{:.4}", r.excess_er_bps),
            format!("{:.6}", r.ratio_mean),
            opt(r.t_stat, 6),
            opt(r.p_value, 8),
            format!("{:.6}", r.ratio_min),
            format!("{:.6}", r.ratio_median),
            format!("{:.6}", r.ratio_max),
            opt(r.share_better, 6),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_experiments(path: &Path, results: &[ExperimentResult]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in results {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Plain-text summary, including tie counts and the excess-return convention.
pub fn summary_text(rep: &ComparisonReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "cells: {} total, {} excluded, {} retained",
        rep.total_cells,
        rep.excluded_cells,
        rep.total_cells - rep.excluded_cells
    );
    let _ = writeln!(
        s,
        "excess ER: mean of (mu_t' w - mu_t,bench) over test period start dates, bps; TEV: {PERIOD_WEEKS}-week relative returns, x sqrt({PERIODS_PER_YEAR}), bps"
    );
    for r in &rep.rows {
        let _ = write!(
            s,
            "{:<3} {:<10} obs {:>4}  TEV {:>8.2}  ER {:>8.2}  ratio {:>7.4}",
            r.kind.as_str(),
            r.variant.as_str(),
            r.n_obs,
            r.tev_bps,
            r.excess_er_bps,
            r.ratio_mean
        );
        if let (Some(t), Some(p), Some(w), Some(ties)) = (r.t_stat, r.p_value, r.wins, r.ties) {
            let _ = write!(s, "  t {t:>8.3}  p {p:.3e}  wins {w}/{}  ties {ties}", r.n_obs);
        }
        s.push('\n');
    }
    s
}
