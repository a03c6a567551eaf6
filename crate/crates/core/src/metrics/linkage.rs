use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::pearson;
use crate::market::CorrelationMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkageMethod {
    Single,
    Ward,
}

/// One agglomeration step. Leaves are `0..n`; the cluster created by merge
/// `k` has id `n + k`. `left < right`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinkageTree {
    pub n: usize,
    pub merges: Vec<Merge>,
}

pub fn linkage_matrix(c: &CorrelationMatrix, method: LinkageMethod) -> LinkageTree {
    linkage_from_distance(c.n(), &c.distance(), method)
}

/// Agglomerative clustering of a full `n x n` distance matrix.
pub fn linkage_from_distance(n: usize, d: &[f64], method: LinkageMethod) -> LinkageTree {
    let raw = match method {
        LinkageMethod::Single => mst_edges(n, d),
        LinkageMethod::Ward => nn_chain_ward(n, d),
    };
    relabel(n, raw)
}

/// Prim's algorithm; returns MST edges as (leaf, leaf, weight).
fn mst_edges(n: usize, d: &[f64]) -> Vec<(usize, usize, f64)> {
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    if n < 2 {
        return edges;
    }
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut parent = vec![0usize; n];
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let mut next = usize::MAX;
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            let dj = d[current * n + j];
            if dj < best[j] {
                best[j] = dj;
                parent[j] = current;
            }
            if next == usize::MAX || best[j] < best[next] {
                next = j;
            }
        }
        in_tree[next] = true;
        edges.push((parent[next].min(next), parent[next].max(next), best[next]));
        current = next;
    }
    edges
}

/// Nearest-neighbour chain with the Lance-Williams Ward update on
/// unsquared distances. Returns merges in discovery order, as
/// (representative leaf, representative leaf, height).
fn nn_chain_ward(n: usize, d: &[f64]) -> Vec<(usize, usize, f64)> {
    let mut dist = d.to_vec();
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut out = Vec::with_capacity(n.saturating_sub(1));
    let mut chain: Vec<usize> = Vec::with_capacity(n);
    let mut remaining = n;
    while remaining > 1 {
        if chain.is_empty() {
            chain.push(active.iter().position(|a| *a).expect("some cluster active"));
        }
        loop {
            let a = *chain.last().expect("non-empty chain");
            let prev = if chain.len() >= 2 { Some(chain[chain.len() - 2]) } else { None };
            let mut b = usize::MAX;
            let mut best = f64::INFINITY;
            for j in 0..n {
                if active[j] && j != a && dist[a * n + j] < best {
                    best = dist[a * n + j];
                    b = j;
                }
            }
            // prefer the previous element on ties so the chain terminates
            if let Some(p) = prev {
                if dist[a * n + p] <= best {
                    best = dist[a * n + p];
                    b = p;
                }
            }
            if Some(b) == prev {
                chain.pop();
                chain.pop();
                let (x, y) = (a.min(b), a.max(b));
                out.push((x, y, best));
                let (nx, ny) = (size[x] as f64, size[y] as f64);
                for k in 0..n {
                    if !active[k] || k == x || k == y {
                        continue;
                    }
                    let nk = size[k] as f64;
                    let dxk = dist[x * n + k];
                    let dyk = dist[y * n + k];
                    let v = ((nx + nk) * dxk * dxk + (ny + nk) * dyk * dyk - nk * best * best) / (nx + ny + nk);
                    let v = v.max(0.0).sqrt();
                    dist[x * n + k] = v;
                    dist[k * n + x] = v;
                }
                active[y] = false;
                size[x] += size[y];
                remaining -= 1;
                break;
            }
            chain.push(b);
        }
    }
    out
}

/// Sorts raw merges by height (stable) and assigns scipy-style cluster ids.
fn relabel(n: usize, mut raw: Vec<(usize, usize, f64)>) -> LinkageTree {
    raw.sort_by(|a, b| a.2.total_cmp(&b.2));
    let mut parent: Vec<usize> = (0..n).collect();
    let mut label: Vec<usize> = (0..n).collect();
    let mut size = vec![1usize; n];
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut merges = Vec::with_capacity(raw.len());
    for (k, (a, b, h)) in raw.into_iter().enumerate() {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        let (la, lb) = (label[ra], label[rb]);
        parent[rb] = ra;
        size[ra] += size[rb];
        label[ra] = n + k;
        merges.push(Merge {
            left: la.min(lb),
            right: la.max(lb),
            height: h,
            size: size[ra],
        });
    }
    LinkageTree { n, merges }
}

impl LinkageTree {
    /// Full `n x n` cophenetic distance matrix.
    pub fn cophenetic(&self) -> Vec<f64> {
        let n = self.n;
        let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        let mut out = vec![0.0; n * n];
        for m in &self.merges {
            let (l, r) = (std::mem::take(&mut members[m.left]), std::mem::take(&mut members[m.right]));
            for &a in &l {
                for &b in &r {
                    out[a * n + b] = m.height;
                    out[b * n + a] = m.height;
                }
            }
            let mut joined = l;
            joined.extend(r);
            members.push(joined);
        }
        out
    }
}

pub fn condensed(n: usize, full: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push(full[i * n + j]);
        }
    }
    out
}

/// Pearson correlation between condensed correlation distances and
/// cophenetic distances.
pub fn cophenetic_corr(c: &CorrelationMatrix, method: LinkageMethod) -> Result<f64> {
    let n = c.n();
    if n < 3 {
        return Err(Error::invalid("cophenetic correlation needs at least 3 assets"));
    }
    let d = c.distance();
    let coph = linkage_from_distance(n, &d, method).cophenetic();
    pearson(&condensed(n, &d), &condensed(n, &coph))
        .ok_or_else(|| Error::ZeroVariance("distances or cophenetic distances are constant".into()))
}
