//! Tracking-error minimization under an excess-return floor, a bond budget
//! and per-asset bounds, solved by operator splitting (ADMM).

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::AssetKind;
use crate::simulation::SimulationSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bounds {
    pub bond: [f64; 2],
    pub fx: [f64; 2],
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            bond: [0.0, 1.0],
            fx: [-0.05, 0.05],
        }
    }
}

/// `min (w - e_b)^T G (w - e_b)` with `G = R^T R / rows`, subject to
/// `mu^T w >= mu_b + target`, `sum_bonds w = 1` and `lower <= w <= upper`.
#[derive(Clone, Debug)]
pub struct PortfolioProblem {
    pub bench: usize,
    pub target: f64,
    pub gram: Vec<f64>,
    pub mu: Vec<f64>,
    pub is_bond: Vec<bool>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl PortfolioProblem {
    pub fn m(&self) -> usize {
        self.mu.len()
    }

    /// Mean squared deviation from the benchmark.
    pub fn objective(&self, w: &[f64]) -> f64 {
        let m = self.m();
        let dev: Vec<f64> = (0..m).map(|i| w[i] - if i == self.bench { 1.0 } else { 0.0 }).collect();
        let mut s = 0.0;
        for i in 0..m {
            for j in 0..m {
                s += dev[i] * self.gram[i * m + j] * dev[j];
            }
        }
        s.max(0.0)
    }

    /// Largest constraint violation of `w`.
    pub fn violation(&self, w: &[f64]) -> f64 {
        let budget: f64 = w.iter().zip(&self.is_bond).filter(|(_, b)| **b).map(|(x, _)| x).sum();
        let excess: f64 = w.iter().zip(&self.mu).map(|(x, m)| x * m).sum::<f64>() - self.mu[self.bench] - self.target;
        let mut v = (budget - 1.0).abs().max((-excess).max(0.0));
        for i in 0..self.m() {
            v = v.max(self.lower[i] - w[i]).max(w[i] - self.upper[i]);
        }
        v
    }
}

pub fn build_problem(
    sims: &SimulationSet,
    kinds: &[AssetKind],
    bench_id: &str,
    target: f64,
    bounds: &Bounds,
) -> Result<PortfolioProblem> {
    let m = sims.m();
    if kinds.len() != m {
        return Err(Error::invalid(format!("{} asset kinds for {m} assets", kinds.len())));
    }
    let bench = sims
        .ids()
        .iter()
        .position(|a| a == bench_id)
        .ok_or_else(|| Error::invalid(format!("benchmark `{bench_id}` not in universe")))?;
    if kinds[bench] != AssetKind::Bond {
        return Err(Error::invalid(format!("benchmark `{bench_id}` is not a bond")));
    }
    if !(target >= 0.0) {
        return Err(Error::invalid("target must be non-negative"));
    }
    for [lo, hi] in [bounds.bond, bounds.fx] {
        if !(lo <= hi) {
            return Err(Error::invalid(format!("bounds [{lo}, {hi}] are not ordered")));
        }
    }
    let is_bond: Vec<bool> = kinds.iter().map(|k| *k == AssetKind::Bond).collect();
    let pick = |b: bool, k: usize| if b { bounds.bond[k] } else { bounds.fx[k] };
    Ok(PortfolioProblem {
        bench,
        target,
        gram: sims.gram().to_vec(),
        mu: sims.mu().to_vec(),
        lower: is_bond.iter().map(|b| pick(*b, 0)).collect(),
        upper: is_bond.iter().map(|b| pick(*b, 1)).collect(),
        is_bond,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub eps_abs: f64,
    pub eps_rel: f64,
    /// Tolerance of the infeasibility certificate.
    pub eps_infeasible: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub adaptive_rho: bool,
    /// Allowed constraint violation of a returned solution.
    pub feasibility_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            eps_infeasible: 1e-6,
            max_iter: 50_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            adaptive_rho: true,
            feasibility_tol: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Solved,
    MaxIter,
    Infeasible,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub weights: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub status: QpStatus,
}

impl QpSolution {
    pub fn to_json(&self, ids: &[String]) -> serde_json::Value {
        let weights: BTreeMap<&str, f64> = ids.iter().map(String::as_str).zip(self.weights.iter().copied()).collect();
        serde_json::json!({
            "weights": weights,
            "status": self.status,
            "objective": self.objective,
            "iterations": self.iterations,
            "primal_residual": self.primal_residual,
            "dual_residual": self.dual_residual,
        })
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Constraint rows: scaled return floor, bond budget, then one row per asset.
struct Constraints {
    m: usize,
    mu_row: Vec<f64>,
    budget: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Constraints {
    fn rows(&self) -> usize {
        self.m + 2
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rows());
        out.push(self.mu_row.iter().zip(x).map(|(a, b)| a * b).sum());
        out.push(self.budget.iter().zip(x).map(|(a, b)| a * b).sum());
        out.extend_from_slice(x);
        out
    }

    fn apply_t(&self, y: &[f64]) -> Vec<f64> {
        (0..self.m).map(|i| self.mu_row[i] * y[0] + self.budget[i] * y[1] + y[2 + i]).collect()
    }

    fn project(&self, z: &mut [f64]) {
        for (k, v) in z.iter_mut().enumerate() {
            *v = v.clamp(self.lower[k], self.upper[k]);
        }
    }
}

fn factor(p: &[f64], cons: &Constraints, rho: &[f64], sigma: f64) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    let m = cons.m;
    let mut k = DMatrix::from_row_slice(m, m, p);
    for i in 0..m {
        k[(i, i)] += sigma + rho[2 + i];
        for j in 0..m {
            k[(i, j)] += rho[0] * cons.mu_row[i] * cons.mu_row[j] + rho[1] * cons.budget[i] * cons.budget[j];
        }
    }
    Cholesky::new(k).ok_or_else(|| Error::invalid("KKT matrix is not positive definite"))
}

/// ADMM in the splitting `Ax = z`, `l <= z <= u`; the linear system is
/// reduced to the `m x m` matrix `P + sigma I + A^T diag(rho) A`.
pub fn solve_qp(problem: &PortfolioProblem, cfg: &SolverConfig) -> Result<QpSolution> {
    let m = problem.m();
    let b = problem.bench;
    // objective normalized to unit scale; the argmin is unchanged
    let g_max = problem.gram.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let cost = if g_max > 0.0 { 1.0 / g_max } else { 1.0 };
    let p: Vec<f64> = problem.gram.iter().map(|v| 2.0 * cost * v).collect();
    let q: Vec<f64> = (0..m).map(|i| -p[i * m + b]).collect();

    let mu_scale = inf_norm(&problem.mu).max(1e-12);
    let mut lower = vec![(problem.mu[b] + problem.target) / mu_scale, 1.0];
    let mut upper = vec![f64::INFINITY, 1.0];
    lower.extend_from_slice(&problem.lower);
    upper.extend_from_slice(&problem.upper);
    let cons = Constraints {
        m,
        mu_row: problem.mu.iter().map(|v| v / mu_scale).collect(),
        budget: problem.is_bond.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        lower,
        upper,
    };
    let nrows = cons.rows();
    let row_rho = |base: f64| -> Vec<f64> {
        (0..nrows)
            .map(|k| if cons.lower[k] == cons.upper[k] { 1e3 * base } else { base })
            .collect()
    };

    let mut rho_base = cfg.rho;
    let mut rho = row_rho(rho_base);
    let mut chol = factor(&p, &cons, &rho, cfg.sigma)?;

    let mut x = vec![0.0; m];
    x[b] = 1.0;
    let mut z = cons.apply(&x);
    cons.project(&mut z);
    let mut y = vec![0.0; nrows];
    let (mut r_prim, mut r_dual) = (f64::INFINITY, f64::INFINITY);

    for it in 1..=cfg.max_iter {
        let aty = cons.apply_t(&y);
        let rz: Vec<f64> = (0..nrows).map(|k| rho[k] * z[k]).collect();
        let atrz = cons.apply_t(&rz);
        let rhs = DVector::from_iterator(m, (0..m).map(|i| cfg.sigma * x[i] - q[i] + atrz[i] - aty[i]));
        let xt = chol.solve(&rhs);
        let zt = cons.apply(xt.as_slice());

        let x_new: Vec<f64> = (0..m).map(|i| cfg.alpha * xt[i] + (1.0 - cfg.alpha) * x[i]).collect();
        let relaxed: Vec<f64> = (0..nrows).map(|k| cfg.alpha * zt[k] + (1.0 - cfg.alpha) * z[k]).collect();
        let mut z_new: Vec<f64> = (0..nrows).map(|k| relaxed[k] + y[k] / rho[k]).collect();
        cons.project(&mut z_new);
        let y_new: Vec<f64> = (0..nrows).map(|k| y[k] + rho[k] * (relaxed[k] - z_new[k])).collect();
        let dy: Vec<f64> = (0..nrows).map(|k| y_new[k] - y[k]).collect();
        x = x_new;
        z = z_new;
        y = y_new;

        let check = it % 10 == 0 || it == cfg.max_iter;
        if !check {
            continue;
        }
        let ax = cons.apply(&x);
        let px: Vec<f64> = (0..m).map(|i| (0..m).map(|j| p[i * m + j] * x[j]).sum()).collect();
        let aty = cons.apply_t(&y);
        r_prim = inf_norm(&ax.iter().zip(&z).map(|(a, b)| a - b).collect::<Vec<_>>());
        r_dual = inf_norm(&(0..m).map(|i| px[i] + q[i] + aty[i]).collect::<Vec<_>>());
        let eps_prim = cfg.eps_abs + cfg.eps_rel * inf_norm(&ax).max(inf_norm(&z));
        let eps_dual = cfg.eps_abs + cfg.eps_rel * inf_norm(&px).max(inf_norm(&aty)).max(inf_norm(&q));

        if r_prim <= eps_prim && r_dual <= eps_dual {
            let w: Vec<f64> = (0..m).map(|i| x[i].clamp(problem.lower[i], problem.upper[i])).collect();
            if problem.violation(&w) <= cfg.feasibility_tol {
                return Ok(QpSolution {
                    objective: problem.objective(&w),
                    weights: w,
                    iterations: it,
                    primal_residual: r_prim,
                    dual_residual: r_dual,
                    status: QpStatus::Solved,
                });
            }
        }

        if primal_infeasible(&cons, &dy, cfg.eps_infeasible) {
            return Ok(QpSolution {
                objective: problem.objective(&x),
                weights: x,
                iterations: it,
                primal_residual: r_prim,
                dual_residual: r_dual,
                status: QpStatus::Infeasible,
            });
        }

        if cfg.adaptive_rho && it % 50 == 0 {
            let num = r_prim / inf_norm(&ax).max(inf_norm(&z)).max(1e-12);
            let den = r_dual / inf_norm(&px).max(inf_norm(&aty)).max(inf_norm(&q)).max(1e-12);
            let ratio = (num / den.max(1e-30)).sqrt();
            let proposed = (rho_base * ratio).clamp(1e-6, 1e6);
            if proposed > 5.0 * rho_base || proposed < 0.2 * rho_base {
                rho_base = proposed;
                rho = row_rho(rho_base);
                chol = factor(&p, &cons, &rho, cfg.sigma)?;
            }
        }
    }
    Ok(QpSolution {
        objective: problem.objective(&x),
        weights: x,
        iterations: cfg.max_iter,
        primal_residual: r_prim,
        dual_residual: r_dual,
        status: QpStatus::MaxIter,
    })
}

/// `A^T dy ~ 0` with `u^T max(dy, 0) + l^T min(dy, 0) < 0` certifies that
/// no `x` satisfies `l <= Ax <= u`.
fn primal_infeasible(cons: &Constraints, dy: &[f64], eps: f64) -> bool {
    let norm = inf_norm(dy);
    if norm < 1e-14 {
        return false;
    }
    let d: Vec<f64> = dy.iter().map(|v| v / norm).collect();
    if inf_norm(&cons.apply_t(&d)) > eps {
        return false;
    }
    let mut support = 0.0;
    for k in 0..d.len() {
        if d[k] > eps {
            if cons.upper[k].is_infinite() {
                return false;
            }
            support += cons.upper[k] * d[k];
        } else if d[k] < -eps {
            if cons.lower[k].is_infinite() {
                return false;
            }
            support += cons.lower[k] * d[k];
        }
    }
    support < -eps
}

/// Sample stdev of `port - bench` per period, annualized, in basis points.
pub fn tev(port: &[f64], bench: &[f64], periods_per_year: f64) -> Result<f64> {
    if port.len() != bench.len() || port.len() < 2 {
        return Err(Error::invalid(format!(
            "tracking error needs two equal series of length >= 2, got {} and {}",
            port.len(),
            bench.len()
        )));
    }
    let diff: Vec<f64> = port.iter().zip(bench).map(|(p, b)| p - b).collect();
    Ok(crate::linalg::sample_std(&diff) * periods_per_year.sqrt() * 1e4)
}
