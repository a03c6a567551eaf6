use std::sync::Arc;

use fixsynth::market::{CorrelationMatrix, NearestConfig};
use fixsynth::metrics::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn ids(n: usize) -> Arc<[String]> {
    (0..n).map(|i| format!("A{i}")).collect()
}

/// Random correlation matrix with a random factor structure.
fn random_corr(rng: &mut ChaCha8Rng, n: usize) -> CorrelationMatrix {
    let k = rng.random_range(1..=n);
    let x: Vec<f64> = (0..n * k).map(|_| StandardNormal.sample(rng)).collect();
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|l| x[i * k + l] * x[j * k + l]).sum::<f64>() + if i == j { 0.1 } else { 0.0 };
        }
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = c[i * n + j] / (c[i * n + i] * c[j * n + j]).sqrt();
        }
    }
    CorrelationMatrix::repair(ids(n), &out, &NearestConfig::default()).unwrap()
}

// ---------- naive agglomeration oracle ----------

struct Naive {
    merges: Vec<(usize, usize, f64, usize)>,
    coph: Vec<f64>,
}

/// Exhaustive agglomeration: every step scans all cluster pairs. Ward
/// distances come from cluster centroids of the unit vectors whose Gram
/// matrix is the correlation matrix.
fn naive(c: &CorrelationMatrix, method: LinkageMethod) -> Naive {
    let n = c.n();
    let d = c.distance();
    let mut clusters: Vec<(usize, Vec<usize>)> = (0..n).map(|i| (i, vec![i])).collect();
    let mut merges = Vec::new();
    let mut coph = vec![0.0; n * n];
    let dist = |a: &[usize], b: &[usize]| -> f64 {
        match method {
            LinkageMethod::Single => {
                let mut m = f64::INFINITY;
                for &i in a {
                    for &j in b {
                        m = m.min(d[i * n + j]);
                    }
                }
                m
            }
            LinkageMethod::Ward => {
                let gram = |p: &[usize], q: &[usize]| -> f64 {
                    let mut s = 0.0;
                    for &i in p {
                        for &j in q {
                            s += c.get(i, j);
                        }
                    }
                    s / (p.len() * q.len()) as f64
                };
                let sq = (gram(a, a) + gram(b, b) - 2.0 * gram(a, b)).max(0.0);
                let (na, nb) = (a.len() as f64, b.len() as f64);
                (2.0 * na * nb / (na + nb) * sq).sqrt()
            }
        }
    };
    for step in 0..n - 1 {
        let mut best = (f64::INFINITY, usize::MAX, usize::MAX);
        for x in 0..clusters.len() {
            for y in x + 1..clusters.len() {
                let h = dist(&clusters[x].1, &clusters[y].1);
                let key = (clusters[x].0.min(clusters[y].0), clusters[x].0.max(clusters[y].0));
                let cur = (best.1.min(best.2), best.1.max(best.2));
                if h < best.0 || (h == best.0 && key < cur) {
                    best = (h, x, y);
                }
            }
        }
        let (h, x, y) = best;
        let (bx, by) = (clusters[x].1.clone(), clusters[y].1.clone());
        for &i in &bx {
            for &j in &by {
                coph[i * n + j] = h;
                coph[j * n + i] = h;
            }
        }
        let (ix, iy) = (clusters[x].0, clusters[y].0);
        merges.push((ix.min(iy), ix.max(iy), h, bx.len() + by.len()));
        let mut joined = bx;
        joined.extend(by);
        clusters.remove(y);
        clusters.remove(x);
        clusters.push((n + step, joined));
    }
    Naive { merges, coph }
}

fn pearson_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn linkage_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let c = random_corr(&mut rng, 8);
        for (method, tol) in [(LinkageMethod::Single, 1e-12), (LinkageMethod::Ward, 1e-10)] {
            let ours = linkage_matrix(&c, method);
            let oracle = naive(&c, method);
            for (m, o) in ours.merges.iter().zip(&oracle.merges) {
                assert_eq!((m.left, m.right, m.size), (o.0, o.1, o.3), "{method:?}");
                assert!((m.height - o.2).abs() <= tol, "{method:?}: {} vs {}", m.height, o.2);
            }
            let cc = cophenetic_corr(&c, method).unwrap();
            let expect = pearson_oracle(&condensed(8, &c.distance()), &condensed(8, &oracle.coph));
            assert!((cc - expect).abs() <= tol, "{method:?}: {cc} vs {expect}");
        }
    }
}

#[test]
fn single_heights_are_sorted_mst_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let c = random_corr(&mut rng, 10);
        let n = c.n();
        let d = c.distance();
        // Kruskal over all edges as an independent MST
        let mut edges: Vec<(f64, usize, usize)> = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                edges.push((d[i * n + j], i, j));
            }
        }
        edges.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut comp: Vec<usize> = (0..n).collect();
        let mut weights = Vec::new();
        for (w, i, j) in edges {
            let (ci, cj) = (comp[i], comp[j]);
            if ci != cj {
                weights.push(w);
                for x in comp.iter_mut() {
                    if *x == cj {
                        *x = ci;
                    }
                }
            }
        }
        let heights: Vec<f64> = linkage_matrix(&c, LinkageMethod::Single).merges.iter().map(|m| m.height).collect();
        assert_eq!(heights, weights);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn single_cophenetic_below_direct(seed in any::<u64>(), n in 3usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_corr(&mut rng, n);
        let t = linkage_matrix(&c, LinkageMethod::Single);
        prop_assert!(t.merges.windows(2).all(|w| w[0].height <= w[1].height));
        prop_assert_eq!(t.merges.last().unwrap().size, n);
        let coph = t.cophenetic();
        let d = c.distance();
        for k in 0..n * n {
            prop_assert!(coph[k] <= d[k] + 1e-15);
        }
        if let Ok(v) = cophenetic_corr(&c, LinkageMethod::Ward) {
            prop_assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn permutation_invariance(seed in any::<u64>(), n in 3usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_corr(&mut rng, n);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let p = c.permuted(&perm);
        prop_assert!((eigen_gini(&c) - eigen_gini(&p)).abs() < 1e-12);
        prop_assert!((mean_correl(&c).unwrap() - mean_correl(&p).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn non_negative_matrix_has_positive_perron(seed in any::<u64>(), n in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..3).map(|l| x[i * 3 + l] * x[j * 3 + l]).sum();
                let ni: f64 = (0..3).map(|l| x[i * 3 + l].powi(2)).sum::<f64>().sqrt();
                let nj: f64 = (0..3).map(|l| x[j * 3 + l].powi(2)).sum::<f64>().sqrt();
                data[i * n + j] = if i == j { 1.0 } else { dot / (ni * nj) };
            }
        }
        let c = CorrelationMatrix::repair(ids(n), &data, &NearestConfig::default()).unwrap();
        prop_assume!(c.data().iter().all(|v| *v >= 0.0));
        prop_assert_eq!(perron_frob_sum_neg(&c), 0.0);
    }
}

#[test]
fn ultrametric_blocks_give_unit_coph() {
    // two nested levels: 0.8 within each block of 3, 0.2 across
    let n = 6;
    let data: Vec<f64> = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            if i == j {
                1.0
            } else if i / 3 == j / 3 {
                0.8
            } else {
                0.2
            }
        })
        .collect();
    let c = CorrelationMatrix::new(ids(n), data).unwrap();
    assert!((cophenetic_corr(&c, LinkageMethod::Single).unwrap() - 1.0).abs() <= 1e-12);
}

// ---------- spectral oracles ----------

/// Cyclic Jacobi eigensolver; returns (values, vectors as columns).
fn jacobi(n: usize, a: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j))).map(|(i, j)| m[i * n + j].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p * n + q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * m[p * n + q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let vals = (0..n).map(|i| m[i * n + i]).collect();
    let vecs = (0..n).map(|k| (0..n).map(|i| v[i * n + k]).collect()).collect();
    (vals, vecs)
}

/// Correlation matrix with a prescribed spectrum (summing to n): random
/// rotation of diag(lambda), then Givens rotations that fix the diagonal
/// one entry at a time.
fn with_spectrum(rng: &mut ChaCha8Rng, lambda: &[f64]) -> Vec<f64> {
    let n = lambda.len();
    // random orthogonal matrix by Gram-Schmidt
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < n {
        let mut x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for b in &q {
            let dot: f64 = x.iter().zip(b).map(|(a, b)| a * b).sum();
            for (xi, bi) in x.iter_mut().zip(b) {
                *xi -= dot * bi;
            }
        }
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        q.push(x.into_iter().map(|v| v / norm).collect());
    }
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = (0..n).map(|k| q[k][i] * lambda[k] * q[k][j]).sum();
        }
    }
    loop {
        let low = (0..n).find(|&i| a[i * n + i] < 1.0 - 1e-14);
        let high = (0..n).find(|&i| a[i * n + i] > 1.0 + 1e-14);
        let (Some(i), Some(j)) = (low, high) else { break };
        let (aii, ajj, aij) = (a[i * n + i], a[j * n + j], a[i * n + j]);
        let disc = (aij * aij - (aii - 1.0) * (ajj - 1.0)).sqrt();
        let t = (aij + disc) / (ajj - 1.0);
        let c = 1.0 / (1.0 + t * t).sqrt();
        let s = c * t;
        for k in 0..n {
            let (aki, akj) = (a[k * n + i], a[k * n + j]);
            a[k * n + i] = c * aki - s * akj;
            a[k * n + j] = s * aki + c * akj;
        }
        for k in 0..n {
            let (aik, ajk) = (a[i * n + k], a[j * n + k]);
            a[i * n + k] = c * aik - s * ajk;
            a[j * n + k] = s * aik + c * ajk;
        }
    }
    for i in 0..n {
        a[i * n + i] = 1.0;
        for j in i + 1..n {
            let v = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
    }
    a
}

#[test]
fn constructed_power_law_spectrum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [8, 16, 30] {
        let tail: Vec<f64> = (2..=n).map(|k| 0.8 * (k as f64).powi(-2)).collect();
        let mut lambda = vec![n as f64 - tail.iter().sum::<f64>()];
        lambda.extend(&tail);
        let c = CorrelationMatrix::new(ids(n), with_spectrum(&mut rng, &lambda)).unwrap();
        let e = power_eigen_exponent(&c).unwrap();
        assert!((e - 2.0).abs() <= 1e-6, "n = {n}: {e}");
    }
}

#[test]
fn spectral_metrics_match_jacobi() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..30 {
        let n = rng.random_range(4..12);
        let c = random_corr(&mut rng, n);
        let (vals, vecs) = jacobi(n, c.data());

        // gini straight from the pairwise definition
        let lam: Vec<f64> = vals.iter().map(|v| v.max(0.0)).collect();
        let mean = lam.iter().sum::<f64>() / n as f64;
        let mut pair = 0.0;
        for a in &lam {
            for b in &lam {
                pair += (a - b).abs();
            }
        }
        assert!((eigen_gini(&c) - pair / (2.0 * (n * n) as f64 * mean)).abs() < 1e-10);

        let top = (0..n).max_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
        let mut v = vecs[top].clone();
        if v.iter().sum::<f64>() < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        let expect = n as f64 * v.iter().filter(|x| **x < 0.0).map(|x| -x).sum::<f64>();
        assert!((perron_frob_sum_neg(&c) - expect).abs() < 1e-8);

        // regression recomputed with the closed-form slope
        let mut sorted = vals.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let xs: Vec<f64> = (2..=n).filter(|&k| sorted[k - 1] > 1e-10).map(|k| (k as f64).ln()).collect();
        let ys: Vec<f64> = (2..=n).filter(|&k| sorted[k - 1] > 1e-10).map(|k| sorted[k - 1].ln()).collect();
        let m = xs.len() as f64;
        let slope = (m * xs.iter().zip(&ys).map(|(x, y)| x * y).sum::<f64>() - xs.iter().sum::<f64>() * ys.iter().sum::<f64>())
            / (m * xs.iter().map(|x| x * x).sum::<f64>() - xs.iter().sum::<f64>().powi(2));
        assert!((power_eigen_exponent(&c).unwrap() + slope).abs() < 1e-8);
    }
}

#[test]
fn anti_correlated_asset_shows_in_perron() {
    // block of 4 positively correlated assets plus one hedging asset
    let n = 5;
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            data[i * n + j] = if i == j {
                1.0
            } else if i == 4 || j == 4 {
                -0.4
            } else {
                0.6
            };
        }
    }
    let c = CorrelationMatrix::new(ids(n), data).unwrap();
    let (vals, vecs) = jacobi(n, c.data());
    let top = (0..n).max_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    let v = &vecs[top];
    let sign = if v.iter().sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
    let expect = n as f64 * v.iter().map(|x| (sign * x).min(0.0).abs()).sum::<f64>();
    let got = perron_frob_sum_neg(&c);
    assert!(got > 0.0);
    assert!((got - expect).abs() < 1e-10);
}

#[test]
fn summary_matches_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mats: Vec<CorrelationMatrix> = (0..100).map(|_| random_corr(&mut rng, 8)).collect();
    let s = summarize(&mats).unwrap();
    let mc: Vec<f64> = mats.iter().map(|c| mean_correl(c).unwrap()).collect();
    let m = mc.iter().sum::<f64>() / 100.0;
    let sd = (mc.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 99.0).sqrt();
    assert!((s.mean[0] - m).abs() < 1e-12);
    assert!((s.std[0] - sd).abs() < 1e-12);
    let g: Vec<f64> = mats.iter().map(eigen_gini).collect();
    assert!((s.mean[1] - g.iter().sum::<f64>() / 100.0).abs() < 1e-12);
    let cs: Vec<f64> = mats.iter().filter_map(|c| cophenetic_corr(c, LinkageMethod::Single).ok()).collect();
    assert_eq!(s.skipped[2], 100 - cs.len());
    assert!((s.mean[2] - cs.iter().sum::<f64>() / cs.len() as f64).abs() < 1e-12);
}

#[test]
fn table1_csv_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mats: Vec<CorrelationMatrix> = (0..5).map(|_| random_corr(&mut rng, 6)).collect();
    let s = summarize(&mats).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t1.csv");
    write_table1(&path, &[("corpus".into(), s.clone()), ("wgan".into(), s)]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("dataset,count,mean_correl_mean,mean_correl_std"));
    assert_eq!(lines[0].split(',').count(), 15);
}
