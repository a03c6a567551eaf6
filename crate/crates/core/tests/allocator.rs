use std::sync::Arc;

use fixsynth::allocator::*;
use fixsynth::market::AssetKind;
use fixsynth::simulation::{Provenance, SimKind, SimulationSet};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// `rows` correlated monthly returns for bonds then fx.
fn sims(seed: u64, rows: usize, mu: Vec<f64>, n_fx: usize) -> (SimulationSet, Vec<AssetKind>) {
    let m = mu.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut returns = Vec::with_capacity(rows * m);
    for _ in 0..rows {
        let common: f64 = StandardNormal.sample(&mut rng);
        for i in 0..m {
            let own: f64 = StandardNormal.sample(&mut rng);
            let vol = 0.01 + 0.004 * i as f64;
            returns.push(vol * (0.6 * common + 0.8 * own));
        }
    }
    let ids: Arc<[String]> = (0..m).map(|i| format!("A{i}")).collect();
    let kinds = (0..m).map(|i| if i + n_fx < m { AssetKind::Bond } else { AssetKind::Fx }).collect();
    (SimulationSet::new(ids, returns, mu, Provenance::Empirical, SimKind::Fr).unwrap(), kinds)
}

fn assert_feasible(p: &PortfolioProblem, s: &QpSolution) {
    assert_eq!(s.status, QpStatus::Solved);
    let budget: f64 = s.weights.iter().zip(&p.is_bond).filter(|(_, b)| **b).map(|(w, _)| w).sum();
    assert!((budget - 1.0).abs() <= 1e-6);
    let excess: f64 = s.weights.iter().zip(&p.mu).map(|(w, m)| w * m).sum::<f64>() - p.mu[p.bench] - p.target;
    assert!(excess >= -1e-6);
    for i in 0..p.m() {
        assert!(s.weights[i] >= p.lower[i] - 1e-9 && s.weights[i] <= p.upper[i] + 1e-9);
    }
}

#[test]
fn replication_at_zero_target() {
    let (set, kinds) = sims(1, 400, vec![0.02, 0.03, 0.04, 0.01, 0.005], 1);
    for b in 0..4 {
        let p = build_problem(&set, &kinds, &format!("A{b}"), 0.0, &Bounds::default()).unwrap();
        let s = solve_qp(&p, &SolverConfig::default()).unwrap();
        assert_feasible(&p, &s);
        for (i, w) in s.weights.iter().enumerate() {
            let e = if i == b { 1.0 } else { 0.0 };
            assert!((w - e).abs() <= 1e-4, "{:?}", s.weights);
        }
        assert!(s.objective <= 1e-8);
    }
}

#[test]
fn fx_benchmark_rejected() {
    let (set, kinds) = sims(1, 50, vec![0.02, 0.03, 0.0], 1);
    assert!(build_problem(&set, &kinds, "A2", 0.0, &Bounds::default()).is_err());
    assert!(build_problem(&set, &kinds, "nope", 0.0, &Bounds::default()).is_err());
}

/// Exhaustive search over bond weight `w0` (w1 = 1 - w0) and fx weight at
/// 1e-3 resolution.
fn grid_search(p: &PortfolioProblem) -> Option<(f64, Vec<f64>)> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for a in 0..=1000 {
        for f in -50..=50 {
            let w = vec![a as f64 / 1000.0, 1.0 - a as f64 / 1000.0, f as f64 / 1000.0];
            let excess: f64 = w.iter().zip(&p.mu).map(|(x, m)| x * m).sum::<f64>() - p.mu[p.bench] - p.target;
            if excess < -1e-12 {
                continue;
            }
            let obj = p.objective(&w);
            if best.as_ref().is_none_or(|b| obj < b.0) {
                best = Some((obj, w));
            }
        }
    }
    best
}

#[test]
fn matches_grid_search() {
    for seed in 0..6 {
        let (set, kinds) = sims(seed, 500, vec![0.02, 0.035, 0.01], 1);
        for target in [0.0, 0.004, 0.01] {
            let p = build_problem(&set, &kinds, "A0", target, &Bounds::default()).unwrap();
            let s = solve_qp(&p, &SolverConfig::default()).unwrap();
            assert_feasible(&p, &s);
            let (obj, w) = grid_search(&p).unwrap();
            assert!(s.objective <= obj + 1e-12, "solver {} grid {obj}", s.objective);
            assert!((s.objective - obj).abs() <= 1e-5);
            // the grid is within half a step of the true optimum
            for (a, b) in s.weights.iter().zip(&w) {
                assert!((a - b).abs() <= 2e-3, "{:?} vs {w:?}", s.weights);
            }
        }
    }
}

#[test]
fn unreachable_target_is_infeasible() {
    let (set, kinds) = sims(3, 200, vec![0.02, 0.03, 0.04, 0.01], 1);
    // best bond 4%, fx adds at most 0.05 * 1%
    let p = build_problem(&set, &kinds, "A0", 0.021, &Bounds::default()).unwrap();
    let s = solve_qp(&p, &SolverConfig::default()).unwrap();
    assert_eq!(s.status, QpStatus::Infeasible);
    assert!(s.iterations < SolverConfig::default().max_iter);
}

#[test]
fn solution_json_keys_by_asset() {
    let (set, kinds) = sims(1, 100, vec![0.02, 0.03, 0.0], 1);
    let p = build_problem(&set, &kinds, "A0", 0.0, &Bounds::default()).unwrap();
    let s = solve_qp(&p, &SolverConfig::default()).unwrap();
    let j = s.to_json(set.ids());
    assert_eq!(j["status"], "solved");
    assert!(j["weights"]["A2"].is_number());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn solved_points_are_feasible_and_scale_free(seed in any::<u64>(), target_bp in 0u32..120, bench in 0usize..4) {
        let mu = vec![0.02, 0.03, 0.045, 0.015, 0.01, -0.005];
        let (set, kinds) = sims(seed, 300, mu.clone(), 2);
        let target = target_bp as f64 * 1e-4;
        let p = build_problem(&set, &kinds, &format!("A{bench}"), target, &Bounds::default()).unwrap();
        let cfg = SolverConfig::default();
        let s = solve_qp(&p, &cfg).unwrap();
        let slack = 0.045 + 0.05 * 0.01 + 0.05 * 0.005 - mu[bench] - target;
        if slack < -1e-9 {
            prop_assert_eq!(s.status, QpStatus::Infeasible);
        } else if slack > 1e-6 {
            prop_assert_eq!(s.status, QpStatus::Solved);
        }
        if s.status == QpStatus::Solved {
            assert_feasible(&p, &s);
            if target == 0.0 {
                let e_bench: Vec<f64> = (0..p.m()).map(|i| if i == bench { 1.0 } else { 0.0 }).collect();
                let at_bench = p.objective(&e_bench);
                prop_assert!(s.objective <= at_bench + 1e-12);
            }
            let scaled = SimulationSet::new(
                set.ids().clone(),
                set.returns().iter().map(|v| v * 3.7).collect(),
                mu.clone(),
                Provenance::Empirical,
                SimKind::Fr,
            ).unwrap();
            let p2 = build_problem(&scaled, &kinds, &format!("A{bench}"), target, &Bounds::default()).unwrap();
            let s2 = solve_qp(&p2, &cfg).unwrap();
            prop_assert_eq!(s2.status, QpStatus::Solved);
            for (a, b) in s.weights.iter().zip(&s2.weights) {
                prop_assert!((a - b).abs() <= 1e-5);
            }
        }
        let again = solve_qp(&p, &cfg).unwrap();
        prop_assert_eq!(again, s);
    }
}
