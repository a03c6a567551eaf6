use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg;

pub const SYMMETRY_TOL: f64 = 1e-12;
pub const EIGEN_TOL: f64 = -1e-8;

/// A symmetric, unit-diagonal, positive semidefinite matrix over an ordered
/// asset universe. Only constructible through validation.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    n: usize,
    data: Vec<f64>,
    ids: Arc<[String]>,
}

/// Returns a description of the first violated invariant, if any.
pub fn check_correlation(n: usize, data: &[f64]) -> std::result::Result<(), String> {
    if data.len() != n * n {
        return Err(format!("expected {} entries for {n}x{n}, got {}", n * n, data.len()));
    }
    for i in 0..n {
        if data[i * n + i] != 1.0 {
            return Err(format!("diagonal entry {i} is {}", data[i * n + i]));
        }
        for j in 0..n {
            let v = data[i * n + j];
            if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
                return Err(format!("entry ({i},{j}) = {v} outside [-1, 1]"));
            }
            if (v - data[j * n + i]).abs() > SYMMETRY_TOL {
                return Err(format!("asymmetric at ({i},{j})"));
            }
        }
    }
    if n > 0 {
        let min = linalg::eigenvalues(n, data)[0];
        if min < EIGEN_TOL {
            return Err(format!("minimum eigenvalue {min:.3e} below {EIGEN_TOL:e}"));
        }
    }
    Ok(())
}

impl CorrelationMatrix {
    pub fn new(ids: Arc<[String]>, data: Vec<f64>) -> Result<Self> {
        let n = ids.len();
        check_correlation(n, &data).map_err(|e| Error::invalid(format!("not a correlation matrix: {e}")))?;
        Ok(Self { n, data, ids })
    }

    pub fn identity(ids: Arc<[String]>) -> Self {
        let n = ids.len();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { n, data, ids }
    }

    /// Symmetrizes, resets the diagonal and projects when the result is
    /// not already valid.
    pub fn repair(ids: Arc<[String]>, raw: &[f64], cfg: &NearestConfig) -> Result<Self> {
        let n = ids.len();
        if raw.len() != n * n {
            return Err(Error::invalid(format!("expected {} entries, got {}", n * n, raw.len())));
        }
        let mut sym = symmetrize(n, raw);
        for i in 0..n {
            sym[i * n + i] = 1.0;
        }
        let data = nearest_correlation(n, &sym, cfg)?;
        Ok(Self { n, data, ids })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn ids(&self) -> &Arc<[String]> {
        &self.ids
    }

    /// Correlation distance `sqrt(2 (1 - rho))`, row-major.
    pub fn distance(&self) -> Vec<f64> {
        self.data.iter().map(|r| (2.0 * (1.0 - r)).max(0.0).sqrt()).collect()
    }

    /// Eigenvalues, ascending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        linalg::eigenvalues(self.n, &self.data)
    }

    /// Same matrix with assets reordered: new position `k` holds old asset `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let mut data = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                data[a * n + b] = self.data[perm[a] * n + perm[b]];
            }
        }
        let ids: Arc<[String]> = perm.iter().map(|&k| self.ids[k].clone()).collect();
        Self { n, data, ids }
    }
}

pub fn symmetrize(n: usize, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = 0.5 * (a[i * n + j] + a[j * n + i]);
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub struct NearestConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NearestConfig {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 200 }
    }
}

/// Iterates and per-iteration residuals of the projection; see
/// [`nearest_correlation_trace`].
#[derive(Clone, Debug)]
pub struct NearestTrace {
    pub matrix: Vec<f64>,
    pub iterations: usize,
    /// `||Y_k - Y_{k-1}||_F` per iteration.
    pub residuals: Vec<f64>,
}

fn psd_projection(n: usize, a: &[f64]) -> Vec<f64> {
    let (vals, vecs) = linalg::eigh(n, a);
    let mut out = vec![0.0; n * n];
    for (k, &lam) in vals.iter().enumerate() {
        if lam <= 0.0 {
            continue;
        }
        for i in 0..n {
            let vi = vecs[i * n + k] * lam;
            for j in 0..n {
                out[i * n + j] += vi * vecs[j * n + k];
            }
        }
    }
    symmetrize(n, &out)
}

/// Clips negative eigenvalues and rescales to a unit diagonal, giving an
/// exactly symmetric matrix with entries in `[-1, 1]`.
fn finalize(n: usize, y: &[f64]) -> Vec<f64> {
    let p = psd_projection(n, y);
    let scale: Vec<f64> = (0..n).map(|i| p[i * n + i].max(1e-300).sqrt().recip()).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        out[i * n + i] = 1.0;
        for j in i + 1..n {
            let v = (p[i * n + j] * scale[i] * scale[j]).clamp(-1.0, 1.0);
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    out
}

/// Nearest correlation matrix in Frobenius norm by alternating projections
/// with Dykstra's correction. Valid inputs are returned unchanged.
pub fn nearest_correlation(n: usize, a: &[f64], cfg: &NearestConfig) -> Result<Vec<f64>> {
    nearest_correlation_trace(n, a, cfg).map(|t| t.matrix)
}

pub fn nearest_correlation_trace(n: usize, a: &[f64], cfg: &NearestConfig) -> Result<NearestTrace> {
    if a.len() != n * n {
        return Err(Error::invalid(format!("expected {} entries, got {}", n * n, a.len())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("matrix has non-finite entries"));
    }
    if check_correlation(n, a).is_ok() {
        return Ok(NearestTrace {
            matrix: a.to_vec(),
            iterations: 0,
            residuals: Vec::new(),
        });
    }

    let mut y = symmetrize(n, a);
    let mut correction = vec![0.0; n * n];
    let mut residuals = Vec::new();
    for it in 1..=cfg.max_iter {
        let r: Vec<f64> = y.iter().zip(&correction).map(|(y, c)| y - c).collect();
        let x = psd_projection(n, &r);
        for k in 0..n * n {
            correction[k] = x[k] - r[k];
        }
        let mut next = x;
        for i in 0..n {
            next[i * n + i] = 1.0;
        }
        let change = linalg::frobenius_diff(&next, &y);
        residuals.push(change);
        y = next;
        if change < cfg.tol {
            let matrix = finalize(n, &y);
            if check_correlation(n, &matrix).is_ok() {
                return Ok(NearestTrace {
                    matrix,
                    iterations: it,
                    residuals,
                });
            }
        }
    }
    Err(Error::NotConverged {
        iterations: cfg.max_iter,
        residual: residuals.last().copied().unwrap_or(f64::NAN),
        last_iterate: y,
    })
}
